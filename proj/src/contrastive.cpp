#include "ucseg/contrastive.hpp"

#include "ucseg/nn.hpp"

namespace ucseg {

Var ife_loss(const std::map<std::size_t, Var>& query_protos, const FeatureBank& bank, double tau) {
  if (tau <= 0.0) throw ConfigError("ife_loss: tau must be positive");
  std::vector<Var> terms;
  for (const auto& [cls, q] : query_protos) {
    if (cls >= bank.num_classes() || bank.size(cls) == 0) continue;
    bool has_negative = false;
    for (std::size_t c = 0; c < bank.num_classes(); ++c)
      if (c != cls && bank.size(c) > 0) {
        has_negative = true;
        break;
      }
    if (!has_negative) continue;

    Var query = q;  // [1, D]
    if (query->value.rank() == 1) query = reshape(query, {1, query->value.numel()});
    auto pos = bank.positive_key(cls);
    Var s_pos = scale(matmul_nt(query, constant(Tensor({1, pos.size()}, pos))), 1.0 / tau);  // [1,1]
    Var s_neg = scale(matmul_nt(query, constant(bank.negative_keys(cls))), 1.0 / tau);       // [1,M]
    Var lse = logsumexp_rows(concat_axis(s_pos, s_neg, 1));  // [1]
    terms.push_back(sub(lse, reshape(s_pos, {1})));
  }
  if (terms.empty()) throw EmptyBankError("ife_loss: no class has both a query and bank keys");
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

Var patch_tokens(const Var& features) {
  const Shape& fs = features->value.shape();
  if (fs.size() < 2) throw ShapeError("patch_tokens: expected [D, sp...]");
  for (std::size_t a = 1; a < fs.size(); ++a)
    if (fs[a] < 3)
      throw ShapeError("patch_tokens: spatial dim " + std::to_string(fs[a]) + " below window 3");
  Shape f4 = {1};
  f4.insert(f4.end(), fs.begin(), fs.end());
  Var pooled = avg_pool_nd(reshape(features, f4), 3);  // [1, D, cells...]
  const std::size_t d = fs[0];
  const std::size_t n_p = pooled->value.numel() / d;
  Var flat = reshape(pooled, {d, n_p});
  return l2_normalize_rows(transpose2d(flat));  // [N_p, D]
}

Var ic_loss(const Var& tokens_a, const Var& tokens_b, double tau) {
  if (tau <= 0.0) throw ConfigError("ic_loss: tau must be positive");
  if (tokens_a->value.rank() != 2 || !tokens_a->value.same_shape(tokens_b->value))
    throw ShapeError("ic_loss: token shapes disagree: " + shape_str(tokens_a->value.shape()) +
                     " vs " + shape_str(tokens_b->value.shape()));
  Var sims = scale(matmul_nt(tokens_a, tokens_b), 1.0 / tau);  // [N_p, N_p]
  return mean_all(sub(logsumexp_rows(sims), take_diag(sims)));
}

}  // namespace ucseg
