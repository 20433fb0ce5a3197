#pragma once

#include "ucseg/autodiff.hpp"

namespace ucseg {

// Subjective-logic decomposition of per-pixel evidence: alpha = e + 1,
// S = sum_c alpha_c, b = e / S, u = C / S, with u + sum_c b = 1 everywhere.
struct EvidentialState {
  Var evidence;     // [.., C, sp...]
  Var alpha;        //  same shape
  Var strength;     // channel axis collapsed to extent 1
  Var belief;       //  same shape as evidence
  Var uncertainty;  // channel axis collapsed to extent 1
};

// softplus of raw logits; throws NumericError on non-finite input
Var evidence_from_logits(const Var& logits);

// channel_axis: 0 for a single [C, sp...] map, 1 for batched [N, C, sp...]
EvidentialState evidential_state(const Var& evidence, std::size_t channel_axis);

// convenience: full pipeline logits -> uncertainty map
Var uncertainty_from_logits(const Var& logits, std::size_t channel_axis);

}  // namespace ucseg
