#pragma once

#include <deque>
#include <map>

#include "ucseg/autodiff.hpp"

namespace ucseg {

// Linear threshold gating the bank update: threshold(t) = base + slope * t/t_max.
// base is 0.4 for 2D data and 0.2 for 3D, slope 0.56.
struct ThresholdSchedule {
  double base = 0.4;
  double slope = 0.56;
  std::size_t t_max = 1;

  double threshold(std::size_t t) const {
    return base + slope * (t_max == 0 ? 1.0 : static_cast<double>(t) / static_cast<double>(t_max));
  }
  static ThresholdSchedule for_rank(std::size_t spatial_rank, std::size_t t_max) {
    return ThresholdSchedule{spatial_rank == 3 ? 0.2 : 0.4, 0.56, t_max};
  }
};

// returns (update?, threshold); update iff dice > threshold(step)
std::pair<bool, double> should_update(double dice_on_labeled, std::size_t step,
                                      const ThresholdSchedule& schedule);

// Per-class FIFO store of L2-normalized sample prototypes, capacity K_f each.
class FeatureBank {
 public:
  FeatureBank() = default;
  FeatureBank(std::size_t num_classes, std::size_t dim, std::size_t capacity);

  void push(std::size_t cls, std::vector<double> prototype);
  std::vector<double> positive_key(std::size_t cls) const;  // mean of occupants
  Tensor negative_keys(std::size_t cls) const;              // [M, dim], other classes

  std::size_t num_classes() const { return slots_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size(std::size_t cls) const;
  std::size_t total_size() const;
  const std::deque<std::vector<double>>& slots(std::size_t cls) const;

 private:
  std::vector<std::deque<std::vector<double>>> slots_;
  std::size_t dim_ = 0;
  std::size_t capacity_ = 0;
};

// Mask-gated global pooling per class: downsample each label channel to the
// feature resolution (bi/trilinear), multiply with the features, global
// average pool, L2-normalize. Classes whose downsampled mask mass is below
// 1e-6 are omitted. features: [D, sp'], label_map: [C, sp] (one-hot or soft).
std::map<std::size_t, Var> extract_prototypes(const Var& features, const Var& label_map);

}  // namespace ucseg
