#include "ucseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ucseg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

Var make_node(Tensor value, std::vector<Var> inputs, const char* op,
              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  n->op = op;
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

// view as [outer, K, inner] around `axis`
struct AxisView {
  std::size_t outer = 1, k = 1, inner = 1;
};
AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.k = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "const";
  return n;
}

Var param(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "param";
  return n;
}

Var detach(const Var& x) { return constant(x->value); }

void backward(const Var& root) {
  if (root->value.numel() != 1) throw ShapeError("backward() root must be scalar");
  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->requires_grad) n->backprop(*n);
  }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, "add", [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, "sub", [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) self.inputs[0]->grad[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) self.inputs[1]->grad[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, "mul", [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        self.inputs[0]->grad[i] += self.grad[i] * bv[i];
    }
    if (self.inputs[1]->requires_grad) {
      self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        self.inputs[1]->grad[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v *= s;
  return make_node(std::move(out), {a}, "scale", [s](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) in->grad[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v += c;
  return make_node(std::move(out), {a}, "add_scalar", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) in->grad[i] += self.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {a}, "relu", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      if (in->value[i] > 0.0) in->grad[i] += self.grad[i];
  });
}

Var elu(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v = v > 0.0 ? v : std::expm1(v);
  return make_node(std::move(out), {a}, "elu", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double x = in->value[i];
      in->grad[i] += self.grad[i] * (x > 0.0 ? 1.0 : self.value[i] + 1.0);
    }
  });
}

Var softplus(const Var& a) {
  if (!a->value.all_finite()) throw NumericError("softplus: non-finite input");
  Tensor out = a->value;
  for (auto& v : out.vec()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  return make_node(std::move(out), {a}, "softplus", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double x = in->value[i];
      const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      in->grad[i] += self.grad[i] * sig;
    }
  });
}

Var log_op(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v = std::log(v);
  return make_node(std::move(out), {a}, "log", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      in->grad[i] += self.grad[i] / in->value[i];
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v = std::min(std::max(v, lo), hi);
  return make_node(std::move(out), {a}, "clamp", [lo, hi](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double x = in->value[i];
      if (x >= lo && x <= hi) in->grad[i] += self.grad[i];
    }
  });
}

// ---------------- reductions & shape ----------------

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.vec()) s += v;
  return make_node(Tensor::scalar(s), {a}, "sum_all", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : in->grad.vec()) gv += g;
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a->value.numel());
  double s = 0.0;
  for (double v : a->value.vec()) s += v;
  return make_node(Tensor::scalar(s / n), {a}, "mean_all", [n](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    const double g = self.grad[0] / n;
    for (auto& gv : in->grad.vec()) gv += g;
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a->value.numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(a->value.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a->value.vec());
  return make_node(std::move(out), {a}, "reshape", [](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) in->grad[i] += self.grad[i];
  });
}

Var slice_batch(const Var& a, std::size_t begin, std::size_t end) {
  const Shape& s = a->value.shape();
  if (s.empty() || begin > end || end > s[0]) throw ShapeError("slice_batch: bad range");
  Shape os = s;
  os[0] = end - begin;
  const std::size_t stride = a->value.numel() / s[0];
  Tensor out(os);
  std::copy(a->value.data() + begin * stride, a->value.data() + end * stride, out.data());
  return make_node(std::move(out), {a}, "slice_batch", [begin, stride](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    double* g = in->grad.data() + begin * stride;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
  });
}

Var slice_axis(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a->value.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) throw ShapeError("slice_axis: bad range");
  AxisView v = axis_view(s, axis);
  Shape os = s;
  os[axis] = end - begin;
  Tensor out(os);
  const std::size_t kk = end - begin;
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < kk; ++k)
      std::copy(a->value.data() + (o * v.k + begin + k) * v.inner,
                a->value.data() + (o * v.k + begin + k + 1) * v.inner,
                out.data() + (o * kk + k) * v.inner);
  return make_node(std::move(out), {a}, "slice_axis", [v, begin, kk](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < kk; ++k) {
        const double* g = self.grad.data() + (o * kk + k) * v.inner;
        double* gi = in->grad.data() + (o * v.k + begin + k) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) gi[i] += g[i];
      }
  });
}

Var transpose2d(const Var& a) {
  if (a->value.rank() != 2) throw ShapeError("transpose2d: expected rank-2");
  const std::size_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->value[i * n + j];
  return make_node(std::move(out), {a}, "transpose2d", [m, n](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) in->grad[i * n + j] += self.grad[j * m + i];
  });
}

Var concat_axis(const Var& a, const Var& b, std::size_t axis) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (sa.size() != sb.size()) throw ShapeError("concat_axis: rank mismatch");
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (i != axis && sa[i] != sb[i]) throw ShapeError("concat_axis: shape mismatch");
  AxisView va = axis_view(sa, axis);
  AxisView vb = axis_view(sb, axis);
  Shape os = sa;
  os[axis] = sa[axis] + sb[axis];
  Tensor out(os);
  for (std::size_t o = 0; o < va.outer; ++o) {
    double* dst = out.data() + o * (va.k + vb.k) * va.inner;
    std::copy(a->value.data() + o * va.k * va.inner, a->value.data() + (o + 1) * va.k * va.inner, dst);
    std::copy(b->value.data() + o * vb.k * vb.inner, b->value.data() + (o + 1) * vb.k * vb.inner,
              dst + va.k * va.inner);
  }
  return make_node(std::move(out), {a, b}, "concat_axis", [va, vb](Node& self) {
    auto& a_in = self.inputs[0];
    auto& b_in = self.inputs[1];
    for (std::size_t o = 0; o < va.outer; ++o) {
      const double* g = self.grad.data() + o * (va.k + vb.k) * va.inner;
      if (a_in->requires_grad) {
        a_in->ensure_grad();
        double* ga = a_in->grad.data() + o * va.k * va.inner;
        for (std::size_t i = 0; i < va.k * va.inner; ++i) ga[i] += g[i];
      }
      if (b_in->requires_grad) {
        b_in->ensure_grad();
        double* gb = b_in->grad.data() + o * vb.k * vb.inner;
        for (std::size_t i = 0; i < vb.k * vb.inner; ++i) gb[i] += g[i + va.k * va.inner];
      }
    }
  });
}

Var concat_flat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_flat: no inputs");
  std::size_t total = 0;
  for (const auto& p : parts) total += p->value.numel();
  Tensor out({total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.vec().begin(), p->value.vec().end(), out.data() + off);
    off += p->value.numel();
  }
  return make_node(std::move(out), parts, "concat_flat", [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.numel();
      if (in->requires_grad) {
        in->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) in->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// ---------------- axis ops ----------------

Var softmax_axis(const Var& a, std::size_t axis) {
  AxisView v = axis_view(a->value.shape(), axis);
  Tensor out(a->value.shape());
  const double* x = a->value.data();
  double* y = out.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.k * v.inner + i;
      double m = -1e300;
      for (std::size_t k = 0; k < v.k; ++k) m = std::max(m, x[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.k; ++k) {
        const double e = std::exp(x[base + k * v.inner] - m);
        y[base + k * v.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.k; ++k) y[base + k * v.inner] /= z;
    }
  return make_node(std::move(out), {a}, "softmax_axis", [v](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    double* gx = in->grad.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.k * v.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.k; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
        for (std::size_t k = 0; k < v.k; ++k) {
          const std::size_t idx = base + k * v.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

Var sum_axis_keep(const Var& a, std::size_t axis) {
  AxisView v = axis_view(a->value.shape(), axis);
  Shape os = a->value.shape();
  os[axis] = 1;
  Tensor out(os);
  const double* x = a->value.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.k; ++k)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += x[(o * v.k + k) * v.inner + i];
  return make_node(std::move(out), {a}, "sum_axis_keep", [v](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    double* gx = in->grad.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < v.k; ++k)
        for (std::size_t i = 0; i < v.inner; ++i)
          gx[(o * v.k + k) * v.inner + i] += g[o * v.inner + i];
  });
}

Var mul_bcast(const Var& x, const Var& m, std::size_t axis) {
  const Shape& sx = x->value.shape();
  const Shape& sm = m->value.shape();
  if (sx.size() != sm.size() || sm[axis] != 1)
    throw ShapeError("mul_bcast: mask must have extent 1 on axis " + std::to_string(axis));
  for (std::size_t i = 0; i < sx.size(); ++i)
    if (i != axis && sx[i] != sm[i]) throw ShapeError("mul_bcast: shape mismatch");
  AxisView v = axis_view(sx, axis);
  Tensor out(sx);
  const double* xd = x->value.data();
  const double* md = m->value.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.k; ++k)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[(o * v.k + k) * v.inner + i] = xd[(o * v.k + k) * v.inner + i] * md[o * v.inner + i];
  return make_node(std::move(out), {x, m}, "mul_bcast", [v](Node& self) {
    auto& xin = self.inputs[0];
    auto& min = self.inputs[1];
    const double* xd = xin->value.data();
    const double* md = min->value.data();
    const double* g = self.grad.data();
    if (xin->requires_grad) {
      xin->ensure_grad();
      double* gx = xin->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t k = 0; k < v.k; ++k)
          for (std::size_t i = 0; i < v.inner; ++i)
            gx[(o * v.k + k) * v.inner + i] += g[(o * v.k + k) * v.inner + i] * md[o * v.inner + i];
    }
    if (min->requires_grad) {
      min->ensure_grad();
      double* gm = min->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t k = 0; k < v.k; ++k)
          for (std::size_t i = 0; i < v.inner; ++i)
            gm[o * v.inner + i] += g[(o * v.k + k) * v.inner + i] * xd[(o * v.k + k) * v.inner + i];
    }
  });
}

Var select_axis(const Var& x, const Tensor& labels, std::size_t axis) {
  AxisView v = axis_view(x->value.shape(), axis);
  if (labels.numel() != v.outer * v.inner)
    throw ShapeError("select_axis: label count does not match tensor");
  Shape os;
  for (std::size_t i = 0; i < x->value.rank(); ++i)
    if (i != axis) os.push_back(x->value.shape()[i]);
  if (os.empty()) os = {1};
  Tensor out(os);
  std::vector<std::size_t> picks(labels.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const long long c = std::llround(labels[o * v.inner + i]);
      if (c < 0 || c >= static_cast<long long>(v.k))
        throw IndexError("select_axis: label " + std::to_string(c) + " out of range");
      picks[o * v.inner + i] = static_cast<std::size_t>(c);
      out[o * v.inner + i] = x->value[(o * v.k + c) * v.inner + i];
    }
  return make_node(std::move(out), {x}, "select_axis", [v, picks = std::move(picks)](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i)
        in->grad[(o * v.k + picks[o * v.inner + i]) * v.inner + i] += self.grad[o * v.inner + i];
  });
}

Var rdiv_scalar(double c, const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.vec()) v = c / v;
  return make_node(std::move(out), {x}, "rdiv_scalar", [c](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double xv = in->value[i];
      in->grad[i] += self.grad[i] * (-c / (xv * xv));
    }
  });
}

// ---------------- linear algebra ----------------

namespace {
void expect_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected rank-2, got " + shape_str(t.shape()));
}
}  // namespace

Var matmul(const Var& a, const Var& b) {
  expect_rank2(a->value, "matmul");
  expect_rank2(b->value, "matmul");
  const std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k) throw ShapeError("matmul: inner dims differ");
  Tensor out({m, n});
  const double* A = a->value.data();
  const double* B = b->value.data();
  double* C = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return make_node(std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    auto& a_in = self.inputs[0];
    auto& b_in = self.inputs[1];
    const double* A = a_in->value.data();
    const double* B = b_in->value.data();
    const double* G = self.grad.data();
    if (a_in->requires_grad) {
      a_in->ensure_grad();
      double* gA = a_in->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = G + i * n;
          const double* brow = B + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          gA[i * k + p] += acc;
        }
    }
    if (b_in->requires_grad) {
      b_in->ensure_grad();
      double* gB = b_in->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          const double* grow = G + i * n;
          double* gbrow = gB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  expect_rank2(a->value, "matmul_nt");
  expect_rank2(b->value, "matmul_nt");
  const std::size_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(0);
  if (b->value.dim(1) != k) throw ShapeError("matmul_nt: inner dims differ");
  Tensor out({m, n});
  const double* A = a->value.data();
  const double* B = b->value.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = A + i * k;
      const double* brow = B + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  return make_node(std::move(out), {a, b}, "matmul_nt", [m, k, n](Node& self) {
    auto& a_in = self.inputs[0];
    auto& b_in = self.inputs[1];
    const double* A = a_in->value.data();
    const double* B = b_in->value.data();
    const double* G = self.grad.data();
    if (a_in->requires_grad) {
      a_in->ensure_grad();
      double* gA = a_in->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* brow = B + j * k;
          double* garow = gA + i * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += g * brow[p];
        }
    }
    if (b_in->requires_grad) {
      b_in->ensure_grad();
      double* gB = b_in->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* arow = A + i * k;
          double* gbrow = gB + j * k;
          for (std::size_t p = 0; p < k; ++p) gbrow[p] += g * arow[p];
        }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  expect_rank2(x->value, "linear");
  expect_rank2(w->value, "linear");
  const std::size_t n = x->value.dim(0), din = x->value.dim(1), dout = w->value.dim(0);
  if (w->value.dim(1) != din || b->value.numel() != dout)
    throw ShapeError("linear: weight/bias shape mismatch");
  Tensor out({n, dout});
  const double* X = x->value.data();
  const double* W = w->value.data();
  const double* B = b->value.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = B[o];
      const double* xrow = X + i * din;
      const double* wrow = W + o * din;
      for (std::size_t p = 0; p < din; ++p) acc += xrow[p] * wrow[p];
      out[i * dout + o] = acc;
    }
  return make_node(std::move(out), {x, w, b}, "linear", [n, din, dout](Node& self) {
    auto& x_in = self.inputs[0];
    auto& w_in = self.inputs[1];
    auto& b_in = self.inputs[2];
    const double* X = x_in->value.data();
    const double* W = w_in->value.data();
    const double* G = self.grad.data();
    if (x_in->requires_grad) {
      x_in->ensure_grad();
      double* gX = x_in->grad.data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < dout; ++o) {
          const double g = G[i * dout + o];
          if (g == 0.0) continue;
          const double* wrow = W + o * din;
          double* gxrow = gX + i * din;
          for (std::size_t p = 0; p < din; ++p) gxrow[p] += g * wrow[p];
        }
    }
    if (w_in->requires_grad) {
      w_in->ensure_grad();
      double* gW = w_in->grad.data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < dout; ++o) {
          const double g = G[i * dout + o];
          if (g == 0.0) continue;
          const double* xrow = X + i * din;
          double* gwrow = gW + o * din;
          for (std::size_t p = 0; p < din; ++p) gwrow[p] += g * xrow[p];
        }
    }
    if (b_in->requires_grad) {
      b_in->ensure_grad();
      double* gB = b_in->grad.data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < dout; ++o) gB[o] += G[i * dout + o];
    }
  });
}

Var softmax_rows(const Var& a) {
  expect_rank2(a->value, "softmax_rows");
  return softmax_axis(a, 1);
}

Var logsumexp_rows(const Var& a) {
  expect_rank2(a->value, "logsumexp_rows");
  const std::size_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({m});
  const double* X = a->value.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, X[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(X[i * n + j] - mx);
    out[i] = mx + std::log(z);
  }
  return make_node(std::move(out), {a}, "logsumexp_rows", [m, n](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    const double* X = in->value.data();
    const double* Y = self.value.data();
    double* gX = in->grad.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) gX[i * n + j] += g * std::exp(X[i * n + j] - Y[i]);
    }
  });
}

Var take_diag(const Var& a) {
  expect_rank2(a->value, "take_diag");
  const std::size_t n = a->value.dim(0);
  if (a->value.dim(1) != n) throw ShapeError("take_diag: matrix not square");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i * n + i];
  return make_node(std::move(out), {a}, "take_diag", [n](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) in->grad[i * n + i] += self.grad[i];
  });
}

Var dice_loss_op(const Var& probs, const Var& target, double eps, std::size_t plane_axes) {
  check_same_shape(probs->value, target->value, "dice_loss");
  const Shape& s = probs->value.shape();
  if (plane_axes > s.size()) throw ShapeError("dice_loss: plane_axes out of range");
  std::size_t planes = 1;
  for (std::size_t i = 0; i < plane_axes; ++i) planes *= s[i];
  const std::size_t plane = probs->value.numel() / std::max<std::size_t>(planes, 1);
  const double* P = probs->value.data();
  const double* T = target->value.data();
  double loss = 0.0;
  for (std::size_t q = 0; q < planes; ++q) {
    double inter = 0.0, ps = 0.0, ts = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      inter += P[q * plane + i] * T[q * plane + i];
      ps += P[q * plane + i];
      ts += T[q * plane + i];
    }
    loss += 1.0 - (2.0 * inter + eps) / (ps + ts + eps);
  }
  loss /= static_cast<double>(planes);
  return make_node(Tensor::scalar(loss), {probs, target}, "dice_loss",
                   [planes, plane, eps](Node& self) {
    auto& p_in = self.inputs[0];
    auto& t_in = self.inputs[1];
    const double* P = p_in->value.data();
    const double* T = t_in->value.data();
    const double g = self.grad[0] / static_cast<double>(planes);
    for (std::size_t q = 0; q < planes; ++q) {
      double inter = 0.0, ps = 0.0, ts = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        inter += P[q * plane + i] * T[q * plane + i];
        ps += P[q * plane + i];
        ts += T[q * plane + i];
      }
      const double denom = ps + ts + eps;
      const double num = 2.0 * inter + eps;
      if (p_in->requires_grad) {
        p_in->ensure_grad();
        double* gp = p_in->grad.data();
        for (std::size_t i = 0; i < plane; ++i)
          gp[q * plane + i] += g * (num - 2.0 * T[q * plane + i] * denom) / (denom * denom);
      }
      if (t_in->requires_grad) {
        t_in->ensure_grad();
        double* gt = t_in->grad.data();
        for (std::size_t i = 0; i < plane; ++i)
          gt[q * plane + i] += g * (num - 2.0 * P[q * plane + i] * denom) / (denom * denom);
      }
    }
  });
}

// ---------------- tensor helpers ----------------

Tensor argmax_axis(const Tensor& x, std::size_t axis) {
  AxisView v = axis_view(x.shape(), axis);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.shape()[i]);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double best = x[(o * v.k) * v.inner + i];
      std::size_t arg = 0;
      for (std::size_t k = 1; k < v.k; ++k) {
        const double val = x[(o * v.k + k) * v.inner + i];
        if (val > best) {
          best = val;
          arg = k;
        }
      }
      out[o * v.inner + i] = static_cast<double>(arg);
    }
  return out;
}

Tensor max_axis(const Tensor& x, std::size_t axis) {
  AxisView v = axis_view(x.shape(), axis);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.shape()[i]);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double best = x[(o * v.k) * v.inner + i];
      for (std::size_t k = 1; k < v.k; ++k)
        best = std::max(best, x[(o * v.k + k) * v.inner + i]);
      out[o * v.inner + i] = best;
    }
  return out;
}

Tensor one_hot(const Tensor& labels, std::size_t num_classes, std::size_t axis) {
  Shape os = labels.shape();
  os.insert(os.begin() + axis, num_classes);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= labels.shape()[i];
  for (std::size_t i = axis; i < labels.rank(); ++i) inner *= labels.shape()[i];
  Tensor out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const long long c = std::llround(labels[o * inner + i]);
      if (c < 0 || c >= static_cast<long long>(num_classes))
        throw IndexError("one_hot: label " + std::to_string(c) + " out of range");
      out[(o * num_classes + static_cast<std::size_t>(c)) * inner + i] = 1.0;
    }
  return out;
}

}  // namespace ucseg
