#include "ucseg/losses.hpp"

#include <cmath>

namespace ucseg {

Var ce_loss(const Var& probs, const Var& target, double eps_clamp) {
  check_same_shape(probs->value, target->value, "ce_loss");
  Var p = clamp(probs, eps_clamp, 1.0 - eps_clamp);
  Var pos = mul(target, log_op(p));
  Var neg = mul(one_minus(target), log_op(one_minus(p)));
  return scale(mean_all(add(pos, neg)), -1.0);
}

Var dice_loss(const Var& probs, const Var& target, double eps, std::size_t plane_axes) {
  return dice_loss_op(probs, target, eps, plane_axes);
}

double anneal_beta(std::size_t t, std::size_t T, double beta0) {
  if (T == 0) return 1.0;
  return beta0 * std::exp(-(std::log(beta0) / static_cast<double>(T)) * static_cast<double>(t));
}

double warmup_lambda_u(std::size_t t, std::size_t t_max, double beta) {
  const double r = t_max == 0 ? 1.0 : static_cast<double>(t) / static_cast<double>(t_max);
  return beta * std::exp(-5.0 * (1.0 - r) * (1.0 - r));
}

Var cu_loss(const Tensor& pred_label, const Tensor& target_label, const Var& p, const Var& u,
            double beta_t, double eps_clamp) {
  if (pred_label.numel() != target_label.numel() || pred_label.numel() != p->value.numel() ||
      pred_label.numel() != u->value.numel())
    throw ShapeError("cu_loss: element counts disagree");
  const std::size_t n = pred_label.numel();
  Tensor correct(p->value.shape());
  Tensor wrong(p->value.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const bool eq = std::llround(pred_label[i]) == std::llround(target_label[i]);
    correct[i] = eq ? 1.0 : 0.0;
    wrong[i] = eq ? 0.0 : 1.0;
  }
  Var uc = clamp(reshape(u, p->value.shape()), eps_clamp, 1.0 - eps_clamp);
  Var term_correct = sum_all(mul(mul(constant(correct), p), scale(log_op(one_minus(uc)), -1.0)));
  Var term_wrong = sum_all(mul(mul(constant(wrong), one_minus(p)), scale(log_op(uc), -1.0)));
  const double inv_n = 1.0 / static_cast<double>(n);
  return add(scale(term_correct, beta_t * inv_n), scale(term_wrong, (1.0 - beta_t) * inv_n));
}

Var supervised_loss(const Var& probs, const Var& target_onehot, const Var& u, double beta_t,
                    const LossWeights& w, std::size_t channel_axis) {
  check_same_shape(probs->value, target_onehot->value, "supervised_loss");
  Tensor pred_label = argmax_axis(probs->value, channel_axis);
  Tensor target_label = argmax_axis(target_onehot->value, channel_axis);
  Var p_max = select_axis(probs, pred_label, channel_axis);
  Var ce = ce_loss(probs, target_onehot, w.eps_clamp);
  Var dc = dice_loss(probs, target_onehot, w.eps_dice, channel_axis + 1);
  Var cu = cu_loss(pred_label, target_label, p_max, u, beta_t, w.eps_clamp);
  return add(add(ce, dc), cu);
}

Var unsupervised_loss(const Var& probs, const Var& pseudo_onehot, const LossWeights& w,
                      std::size_t channel_axis) {
  Var ce = ce_loss(probs, pseudo_onehot, w.eps_clamp);
  Var dc = dice_loss(probs, pseudo_onehot, w.eps_dice, channel_axis + 1);
  return add(ce, dc);
}

std::pair<Var, Var> consistency_loss(const Var& probs_a, const Var& probs_b, double eps_clamp) {
  return {ce_loss(probs_a, detach(probs_b), eps_clamp),
          ce_loss(probs_b, detach(probs_a), eps_clamp)};
}

Var subnet_total(const Var& l_s, const std::optional<Var>& l_u, const std::optional<Var>& l_q,
                 const std::optional<Var>& l_c, std::size_t t, std::size_t t_max,
                 const LossWeights& w) {
  Var total = l_s;
  if (l_u) total = add(total, scale(*l_u, warmup_lambda_u(t, t_max, w.beta_warm)));
  if (l_q) total = add(total, scale(*l_q, w.lambda_q));
  if (l_c) total = add(total, scale(*l_c, w.lambda_c));
  return total;
}

Var upg_total(const Var& fused_probs, const Var& target_onehot, const Var& u_p, double beta_t,
              const LossWeights& w, std::size_t channel_axis) {
  return supervised_loss(fused_probs, target_onehot, u_p, beta_t, w, channel_axis);
}

Var grand_total(const Var& l_a, const Var& l_b, const std::optional<Var>& l_p,
                const std::optional<Var>& l_f, const LossWeights& w) {
  auto check = [](const Var& v, const char* name) {
    if (!v->value.all_finite()) throw NumericError(std::string("grand_total: ") + name + " is non-finite");
  };
  check(l_a, "L_A");
  check(l_b, "L_B");
  Var total = scale(add(l_a, l_b), 0.5);
  if (l_p) {
    check(*l_p, "L_P");
    total = add(total, *l_p);
  }
  if (l_f) {
    check(*l_f, "L_f");
    total = add(total, scale(*l_f, w.lambda_f));
  }
  return total;
}

}  // namespace ucseg
