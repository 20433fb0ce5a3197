#pragma once

#include <optional>

#include "ucseg/autodiff.hpp"

namespace ucseg {

struct LossWeights {
  double lambda_q = 0.2;
  double lambda_c = 0.5;
  double lambda_f = 0.1;
  double beta_warm = 15.0;
  double beta0 = 0.01;
  double eps_dice = 1e-5;
  double eps_clamp = 1e-7;
};

// Elementwise binary cross-entropy averaged over every entry; probabilities
// are clamped to [eps_clamp, 1 - eps_clamp] before the logs.
Var ce_loss(const Var& probs, const Var& target, double eps_clamp);

// Soft Dice: mean over the first `plane_axes` axes of
// 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps).
Var dice_loss(const Var& probs, const Var& target, double eps, std::size_t plane_axes);

// annealing factor beta_t = beta0 * e^{-(ln beta0 / T) t}: beta0 at t=0, 1 at t=T
double anneal_beta(std::size_t t, std::size_t T, double beta0);

// Gaussian warm-up lambda_u(t) = beta * e^{-5 (1 - t/t_max)^2}
double warmup_lambda_u(std::size_t t, std::size_t t_max, double beta);

// Calibrated-uncertainty loss. `pred_label` / `target_label` are per-pixel
// class indices; `p` is the per-pixel assignment probability and `u` the
// per-pixel uncertainty (same element counts). Sums are divided by the pixel
// count so the term stays scale-comparable with CE/Dice.
Var cu_loss(const Tensor& pred_label, const Tensor& target_label, const Var& p, const Var& u,
            double beta_t, double eps_clamp);

// CE + Dice + CU on one batch of softmax probabilities vs one-hot targets.
// `u` is the evidential uncertainty with the channel axis kept at extent 1.
Var supervised_loss(const Var& probs, const Var& target_onehot, const Var& u, double beta_t,
                    const LossWeights& w, std::size_t channel_axis);

// CE + Dice vs a detached one-hot pseudo-label
Var unsupervised_loss(const Var& probs, const Var& pseudo_onehot, const LossWeights& w,
                      std::size_t channel_axis);

// (CE(a, detach(b)), CE(b, detach(a)))
std::pair<Var, Var> consistency_loss(const Var& probs_a, const Var& probs_b, double eps_clamp);

// L^X = L_s + lambda_u(t) L_u + lambda_q L_q + lambda_c L_c (absent terms skipped)
Var subnet_total(const Var& l_s, const std::optional<Var>& l_u, const std::optional<Var>& l_q,
                 const std::optional<Var>& l_c, std::size_t t, std::size_t t_max,
                 const LossWeights& w);

// L^P: Dice + CE + CU of the fused prediction on labeled data
Var upg_total(const Var& fused_probs, const Var& target_onehot, const Var& u_p, double beta_t,
              const LossWeights& w, std::size_t channel_axis);

// total = (L_A + L_B)/2 + L_P + lambda_f L_f; throws NumericError naming the
// first non-finite component
Var grand_total(const Var& l_a, const Var& l_b, const std::optional<Var>& l_p,
                const std::optional<Var>& l_f, const LossWeights& w);

}  // namespace ucseg
