#include "ucseg/feature_bank.hpp"

#include <cmath>

#include "ucseg/nn.hpp"

namespace ucseg {

std::pair<bool, double> should_update(double dice_on_labeled, std::size_t step,
                                      const ThresholdSchedule& schedule) {
  if (dice_on_labeled < 0.0 || dice_on_labeled > 1.0)
    throw DomainError("should_update: dice outside [0,1]");
  const double th = schedule.threshold(step);
  return {dice_on_labeled > th, th};
}

FeatureBank::FeatureBank(std::size_t num_classes, std::size_t dim, std::size_t capacity)
    : slots_(num_classes), dim_(dim), capacity_(capacity) {
  if (num_classes == 0 || dim == 0 || capacity == 0)
    throw ConfigError("FeatureBank: classes, dim and capacity must be positive");
}

void FeatureBank::push(std::size_t cls, std::vector<double> prototype) {
  if (cls >= slots_.size()) throw IndexError("FeatureBank::push: class index out of range");
  if (prototype.size() != dim_) throw ShapeError("FeatureBank::push: prototype dimension mismatch");
  double nrm = 0.0;
  for (double v : prototype) {
    if (!std::isfinite(v)) throw NumericError("FeatureBank::push: non-finite prototype");
    nrm += v * v;
  }
  nrm = std::sqrt(nrm);
  const double denom = std::max(nrm, 1e-12);
  for (double& v : prototype) v /= denom;
  slots_[cls].push_back(std::move(prototype));
  while (slots_[cls].size() > capacity_) slots_[cls].pop_front();
}

std::vector<double> FeatureBank::positive_key(std::size_t cls) const {
  if (cls >= slots_.size()) throw IndexError("FeatureBank::positive_key: class out of range");
  const auto& q = slots_[cls];
  if (q.empty()) throw EmptyBankError("positive_key: class " + std::to_string(cls) + " is empty");
  std::vector<double> mean(dim_, 0.0);
  for (const auto& v : q)
    for (std::size_t i = 0; i < dim_; ++i) mean[i] += v[i];
  for (double& m : mean) m /= static_cast<double>(q.size());
  return mean;
}

Tensor FeatureBank::negative_keys(std::size_t cls) const {
  if (cls >= slots_.size()) throw IndexError("FeatureBank::negative_keys: class out of range");
  std::size_t rows = 0;
  for (std::size_t c = 0; c < slots_.size(); ++c)
    if (c != cls) rows += slots_[c].size();
  if (rows == 0)
    throw EmptyBankError("negative_keys: no occupants outside class " + std::to_string(cls));
  Tensor out({rows, dim_});
  std::size_t r = 0;
  for (std::size_t c = 0; c < slots_.size(); ++c) {
    if (c == cls) continue;
    for (const auto& v : slots_[c]) {
      std::copy(v.begin(), v.end(), out.data() + r * dim_);
      ++r;
    }
  }
  return out;
}

std::size_t FeatureBank::size(std::size_t cls) const {
  if (cls >= slots_.size()) throw IndexError("FeatureBank::size: class out of range");
  return slots_[cls].size();
}

std::size_t FeatureBank::total_size() const {
  std::size_t n = 0;
  for (const auto& q : slots_) n += q.size();
  return n;
}

const std::deque<std::vector<double>>& FeatureBank::slots(std::size_t cls) const {
  if (cls >= slots_.size()) throw IndexError("FeatureBank::slots: class out of range");
  return slots_[cls];
}

std::map<std::size_t, Var> extract_prototypes(const Var& features, const Var& label_map) {
  const Shape& fs = features->value.shape();
  const Shape& ls = label_map->value.shape();
  if (fs.size() < 2 || ls.size() != fs.size())
    throw ShapeError("extract_prototypes: rank mismatch between features " + shape_str(fs) +
                     " and labels " + shape_str(ls));
  const std::size_t d = fs[0];
  const std::size_t c = ls[0];
  std::vector<std::size_t> feat_sp(fs.begin() + 1, fs.end());

  Shape f4 = {1};
  f4.insert(f4.end(), fs.begin(), fs.end());
  Shape l4 = {1};
  l4.insert(l4.end(), ls.begin(), ls.end());
  Var feats = reshape(features, f4);                             // [1, D, sp']
  Var labels = resize_linear_nd(reshape(label_map, l4), feat_sp);  // [1, C, sp']

  std::map<std::size_t, Var> protos;
  for (std::size_t cls = 0; cls < c; ++cls) {
    Var mask = slice_axis(labels, 1, cls, cls + 1);  // [1, 1, sp']
    double mass = 0.0;
    for (double v : mask->value.vec()) mass += v;
    if (mass < 1e-6) continue;
    Var pooled = gap_spatial(mul_bcast(feats, mask, 1));  // [1, D]
    protos.emplace(cls, l2_normalize_rows(pooled));
  }
  (void)d;
  return protos;
}

}  // namespace ucseg
