#include "ucseg/evidential.hpp"

namespace ucseg {

Var evidence_from_logits(const Var& logits) {
  if (!logits->value.all_finite()) throw NumericError("evidence_from_logits: non-finite logits");
  return softplus(logits);
}

EvidentialState evidential_state(const Var& evidence, std::size_t channel_axis) {
  if (!evidence->value.all_finite()) throw DomainError("evidential_state: non-finite evidence");
  for (double v : evidence->value.vec())
    if (v < 0.0) throw DomainError("evidential_state: negative evidence");
  if (channel_axis >= evidence->value.rank())
    throw ShapeError("evidential_state: channel axis out of range");
  const double c = static_cast<double>(evidence->value.dim(channel_axis));

  EvidentialState st;
  st.evidence = evidence;
  st.alpha = add_scalar(evidence, 1.0);
  st.strength = sum_axis_keep(st.alpha, channel_axis);
  st.belief = mul_bcast(evidence, rdiv_scalar(1.0, st.strength), channel_axis);
  st.uncertainty = rdiv_scalar(c, st.strength);
  return st;
}

Var uncertainty_from_logits(const Var& logits, std::size_t channel_axis) {
  return evidential_state(evidence_from_logits(logits), channel_axis).uncertainty;
}

}  // namespace ucseg
