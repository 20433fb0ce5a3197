#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "ucseg/evidential.hpp"
#include "ucseg/losses.hpp"

using namespace ucseg;

namespace {
const LossWeights kW;
}

TEST_CASE("ce_loss hand values and oracle equivalence") {
  CHECK(ce_loss(constant(Tensor({1}, {0.5})), constant(Tensor({1}, {1.0})), kW.eps_clamp)
            ->value.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // perfect one-hot prediction collapses to the clamp floor
  Var onehot = constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  const double v = ce_loss(onehot, onehot, kW.eps_clamp)->value.item();
  CHECK(v >= 0.0);
  CHECK(v <= 2.0 * kW.eps_clamp);

  Rng rng(3);
  Tensor p = oracle::random_tensor({2, 3, 4}, rng, 0.01, 0.99);
  Tensor t = oracle::random_tensor({2, 3, 4}, rng, 0.0, 1.0);
  const double got = ce_loss(constant(p), constant(t), kW.eps_clamp)->value.item();
  const double want = oracle::bce_mean_ref(p.vec(), t.vec(), kW.eps_clamp);
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("dice_loss hand values") {
  Var y = constant(Tensor({4}, {1.0, 1.0, 0.0, 0.0}));
  Var yh = constant(Tensor({4}, {1.0, 0.0, 1.0, 0.0}));
  CHECK(dice_loss(yh, y, 0.0, 0)->value.item() == doctest::Approx(0.5).epsilon(1e-15));

  Var same = constant(Tensor({2, 8}, 1.0));
  CHECK(dice_loss(same, same, 1e-5, 1)->value.item() == doctest::Approx(0.0).epsilon(1e-9));

  Var zero = constant(Tensor({2, 8}, 0.0));
  CHECK(dice_loss(zero, zero, 1e-5, 1)->value.item() == 0.0);  // eps/eps saves 0/0
}

TEST_CASE("anneal_beta endpoints") {
  CHECK(anneal_beta(0, 100, 0.01) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(anneal_beta(100, 100, 0.01) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(anneal_beta(50, 100, 0.01) == doctest::Approx(0.1).epsilon(1e-12));
  for (std::size_t t = 1; t <= 100; ++t)
    CHECK(anneal_beta(t, 100, 0.01) > anneal_beta(t - 1, 100, 0.01));
}

TEST_CASE("warmup_lambda_u endpoints") {
  CHECK(warmup_lambda_u(100, 100, 15.0) == doctest::Approx(15.0).epsilon(1e-15));
  CHECK(warmup_lambda_u(0, 100, 15.0) ==
        doctest::Approx(15.0 * std::exp(-5.0)).epsilon(1e-12));
  CHECK(warmup_lambda_u(50, 100, 15.0) ==
        doctest::Approx(15.0 * std::exp(-1.25)).epsilon(1e-12));
  for (std::size_t t = 1; t <= 100; ++t)
    CHECK(warmup_lambda_u(t, 100, 15.0) > warmup_lambda_u(t - 1, 100, 15.0));
}

TEST_CASE("cu_loss hand values") {
  SUBCASE("all correct with vanishing uncertainty") {
    Tensor lab({4}, {0.0, 1.0, 0.0, 1.0});
    Var p = constant(Tensor({4}, 0.9));
    Var u = constant(Tensor({4}, kW.eps_clamp));
    const double v = cu_loss(lab, lab, p, u, 0.7, kW.eps_clamp)->value.item();
    CHECK(v >= 0.0);
    CHECK(v < 1e-6);
  }
  SUBCASE("one correct pixel, p=1, u=0.5, beta=1") {
    Tensor lab({1}, {0.0});
    Var p = constant(Tensor({1}, {1.0}));
    Var u = constant(Tensor({1}, {0.5}));
    CHECK(cu_loss(lab, lab, p, u, 1.0, kW.eps_clamp)->value.item() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
  }
  SUBCASE("one wrong pixel with vanishing weights") {
    Tensor pred({1}, {0.0});
    Tensor tgt({1}, {1.0});
    Var p = constant(Tensor({1}, {1.0}));  // 1 - p = 0
    Var u = constant(Tensor({1}, {0.3}));
    CHECK(cu_loss(pred, tgt, p, u, 0.0, kW.eps_clamp)->value.item() == 0.0);
  }
}

TEST_CASE("cu_loss matches a per-pixel summation oracle") {
  Rng rng(31);
  const std::size_t n = 16;
  Tensor pred({n}), tgt({n});
  for (std::size_t i = 0; i < n; ++i) {
    pred[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    tgt[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  }
  Tensor p = oracle::random_tensor({n}, rng, 0.05, 0.95);
  Tensor u = oracle::random_tensor({n}, rng, 0.05, 0.95);
  const double beta_t = 0.37;
  double want = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pred[i] == tgt[i])
      want += beta_t * p[i] * (-std::log(1.0 - u[i]));
    else
      want += (1.0 - beta_t) * (1.0 - p[i]) * (-std::log(u[i]));
  }
  want /= static_cast<double>(n);
  CHECK(cu_loss(pred, tgt, constant(p), constant(u), beta_t, kW.eps_clamp)->value.item() ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("supervised loss composition and gradient") {
  Rng rng(41);
  Var logits = param(oracle::random_tensor({1, 2, 4, 4}, rng, -1.5, 1.5));
  Tensor labels({1, 4, 4});
  for (auto& v : labels.vec()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Var target = constant(one_hot(labels, 2, 1));

  auto assemble = [&] {
    Var probs = softmax_axis(logits, 1);
    Var u = uncertainty_from_logits(logits, 1);
    return supervised_loss(probs, target, u, 0.4, kW, 1);
  };

  SUBCASE("equals ce + dice + cu computed independently") {
    Var probs = softmax_axis(logits, 1);
    Var u = uncertainty_from_logits(logits, 1);
    Tensor pred_label = argmax_axis(probs->value, 1);
    Tensor target_label = argmax_axis(target->value, 1);
    Var p_max = select_axis(probs, pred_label, 1);
    const double parts = ce_loss(probs, target, kW.eps_clamp)->value.item() +
                         dice_loss(probs, target, kW.eps_dice, 2)->value.item() +
                         cu_loss(pred_label, target_label, p_max, u, 0.4, kW.eps_clamp)->value.item();
    CHECK(assemble()->value.item() == doctest::Approx(parts).epsilon(1e-12));
  }

  SUBCASE("gradient matches finite differences") {
    CHECK(oracle::max_grad_rel_err(assemble, {logits}) < 1e-4);
  }

  SUBCASE("perfect prediction with vanishing uncertainty") {
    Var hot = param(Tensor({1, 2, 2, 2}, {20.0, 20.0, -20.0, -20.0, -20.0, -20.0, 20.0, 20.0}));
    Tensor lab({1, 2, 2}, {0.0, 0.0, 1.0, 1.0});
    Var tgt = constant(one_hot(lab, 2, 1));
    Var probs = softmax_axis(hot, 1);
    Var u = constant(Tensor({1, 1, 2, 2}, kW.eps_clamp));
    CHECK(supervised_loss(probs, tgt, u, 0.5, kW, 1)->value.item() < 1e-5);
  }
}

TEST_CASE("unsupervised loss: composition and detachment") {
  Rng rng(43);
  Var logits = param(oracle::random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0));
  Tensor pseudo({1, 4, 4});
  for (auto& v : pseudo.vec()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Var pseudo_oh = constant(one_hot(pseudo, 2, 1));

  Var probs = softmax_axis(logits, 1);
  const double total = unsupervised_loss(probs, pseudo_oh, kW, 1)->value.item();
  const double parts = ce_loss(probs, pseudo_oh, kW.eps_clamp)->value.item() +
                       dice_loss(probs, pseudo_oh, kW.eps_dice, 2)->value.item();
  CHECK(total == doctest::Approx(parts).epsilon(1e-12));
  CHECK(!pseudo_oh->requires_grad);  // targets never receive gradient

  // matching the pseudo-label exactly drives the loss to ~0
  Var hot = constant(one_hot(pseudo, 2, 1));
  Var sharp = scale(sub(hot, constant(Tensor(hot->value.shape(), 0.5))), 60.0);
  CHECK(unsupervised_loss(softmax_axis(sharp, 1), pseudo_oh, kW, 1)->value.item() < 1e-5);
}

TEST_CASE("consistency loss: values and one-sided gradients") {
  Var a = param(Tensor({1, 2}, {0.5, 0.5}));
  Var b = param(Tensor({1, 2}, {1.0, 0.0}));
  auto [lca, lcb] = consistency_loss(a, b, kW.eps_clamp);
  CHECK(lca->value.item() == doctest::Approx(0.6931471805599453).epsilon(1e-6));

  a->ensure_grad();
  b->ensure_grad();
  a->zero_grad();
  b->zero_grad();
  backward(lca);
  CHECK(b->grad.max_abs() == 0.0);  // target side is detached
  CHECK(a->grad.max_abs() > 0.0);

  Var same = constant(Tensor({1, 2}, {1.0, 0.0}));
  auto [l1, l2] = consistency_loss(same, same, kW.eps_clamp);
  CHECK(l1->value.item() < 1e-6);
  CHECK(l2->value.item() < 1e-6);
}

TEST_CASE("weighted totals") {
  Var one = constant(Tensor::scalar(1.0));
  Var total = subnet_total(one, one, one, one, 100, 100, kW);
  CHECK(total->value.item() == doctest::Approx(16.7).epsilon(1e-12));

  Var two = constant(Tensor::scalar(2.0));
  Var ten = constant(Tensor::scalar(10.0));
  CHECK(grand_total(two, two, one, ten, kW)->value.item() == doctest::Approx(4.0).epsilon(1e-12));

  Var zero = constant(Tensor::scalar(0.0));
  CHECK(grand_total(zero, zero, zero, zero, kW)->value.item() == 0.0);

  Var bad = constant(Tensor::scalar(std::nan("")));
  CHECK_THROWS_WITH_AS(grand_total(two, two, bad, ten, kW), doctest::Contains("L_P"),
                       NumericError);
}

TEST_CASE("losses are reproducible by per-pixel summation on small inputs") {
  Rng rng(53);
  Tensor p = oracle::random_tensor({2, 2, 8, 8}, rng, 0.02, 0.98);
  Tensor t({2, 2, 8, 8});
  for (auto& v : t.vec()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;

  const double ce = ce_loss(constant(p), constant(t), kW.eps_clamp)->value.item();
  CHECK(ce == doctest::Approx(oracle::bce_mean_ref(p.vec(), t.vec(), kW.eps_clamp)).epsilon(1e-10));
  CHECK(ce >= 0.0);

  const double dc = dice_loss(constant(p), constant(t), kW.eps_dice, 2)->value.item();
  double want = 0.0;
  for (std::size_t plane = 0; plane < 4; ++plane) {
    std::vector<double> pp(p.vec().begin() + plane * 64, p.vec().begin() + (plane + 1) * 64);
    std::vector<double> tt(t.vec().begin() + plane * 64, t.vec().begin() + (plane + 1) * 64);
    want += oracle::dice_plane_ref(pp, tt, kW.eps_dice);
  }
  want /= 4.0;
  CHECK(dc == doctest::Approx(want).epsilon(1e-10));
  CHECK(dc >= 0.0);
}

TEST_CASE("ce and dice gradients match finite differences") {
  Rng rng(59);
  Var logits = param(oracle::random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0));
  Tensor lab({1, 3, 3});
  for (auto& v : lab.vec()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Var tgt = constant(one_hot(lab, 2, 1));
  CHECK(oracle::max_grad_rel_err(
            [&] { return ce_loss(softmax_axis(logits, 1), tgt, kW.eps_clamp); }, {logits}) < 1e-4);
  CHECK(oracle::max_grad_rel_err(
            [&] { return dice_loss(softmax_axis(logits, 1), tgt, kW.eps_dice, 2); }, {logits}) <
        1e-4);
  CHECK(oracle::max_grad_rel_err(
            [&] {
              Var probs = softmax_axis(logits, 1);
              Var u = uncertainty_from_logits(logits, 1);
              Tensor pl = argmax_axis(probs->value, 1);
              return cu_loss(pl, argmax_axis(tgt->value, 1), select_axis(probs, pl, 1), u, 0.6,
                             kW.eps_clamp);
            },
            {logits}) < 1e-4);
}
