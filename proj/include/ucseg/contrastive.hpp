#pragma once

#include <map>

#include "ucseg/feature_bank.hpp"

namespace ucseg {

struct TemperatureConfig {
  double tau = 0.5;
};

// Intra-subnet feature enhancement: InfoNCE per class against the bank.
// Positive key = mean of the class occupants, negatives = occupants of every
// other class (positive term included in the denominator). Classes without a
// positive key or without negatives are skipped and the mean renormalized;
// throws EmptyBankError when no class survives.
Var ife_loss(const std::map<std::size_t, Var>& query_protos, const FeatureBank& bank, double tau);

// 3^r average pooling with stride 3 over a [D, sp'] feature map, flattened to
// L2-normalized tokens [N_p, D]. Spatial dims below 3 are a shape error.
Var patch_tokens(const Var& features);

// Inter-subnet consistency: InfoNCE over same-position token pairs; the
// denominator runs over all positions of tokens_b (incl. the positive).
Var ic_loss(const Var& tokens_a, const Var& tokens_b, double tau);

}  // namespace ucseg
