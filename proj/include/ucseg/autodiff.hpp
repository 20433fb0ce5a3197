#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ucseg/tensor.hpp"

namespace ucseg {

// Reverse-mode autodiff over eagerly evaluated Tensor nodes. Graphs are built
// per step and released with the last Var handle. Double precision throughout;
// this is what makes the finite-difference checks in the test suite meaningful.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use; same shape as value
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backprop;  // empty for leaves and constants
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
  }
  void zero_grad() {
    if (grad.numel() > 0)
      std::fill(grad.vec().begin(), grad.vec().end(), 0.0);
  }
};

Var constant(Tensor value);
Var param(Tensor value);  // leaf with requires_grad
Var detach(const Var& x);

// Backpropagate from a scalar root (seeds d(root)/d(root) = 1).
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var elu(const Var& a);
Var softplus(const Var& a);  // max(x,0) + log1p(exp(-|x|))
Var log_op(const Var& a);
Var clamp(const Var& a, double lo, double hi);
inline Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

// ---- reductions & shape ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var reshape(const Var& a, Shape shape);
Var slice_batch(const Var& a, std::size_t begin, std::size_t end);  // axis 0
Var slice_axis(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat_axis(const Var& a, const Var& b, std::size_t axis);
Var concat_flat(const std::vector<Var>& parts);
Var transpose2d(const Var& a);

// ---- axis ops (tensor viewed as [outer, K, inner] around `axis`) ----
Var softmax_axis(const Var& a, std::size_t axis);
Var sum_axis_keep(const Var& a, std::size_t axis);
// x * m with m broadcast along `axis` (m has extent 1 there)
Var mul_bcast(const Var& x, const Var& m, std::size_t axis);
Var rdiv_scalar(double c, const Var& x);  // c / x elementwise
// pick x[..., labels, ...] along `axis`; labels has the axis removed
Var select_axis(const Var& x, const Tensor& labels, std::size_t axis);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);     // [m,k]x[k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k]x[n,k]^T -> [m,n]
Var linear(const Var& x, const Var& w, const Var& b);  // x[n,din], w[dout,din]
Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);  // [m,n] -> [m]
Var take_diag(const Var& a);       // [n,n] -> [n]

// Soft Dice loss: mean over leading planes of 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps)
// where a plane is everything after the first `plane_axes` axes.
Var dice_loss_op(const Var& probs, const Var& target, double eps, std::size_t plane_axes);

// ---- non-differentiable tensor helpers ----
Tensor argmax_axis(const Tensor& x, std::size_t axis);  // ties -> lowest index
Tensor max_axis(const Tensor& x, std::size_t axis);
Tensor one_hot(const Tensor& labels, std::size_t num_classes, std::size_t axis);

}  // namespace ucseg
