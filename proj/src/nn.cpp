#include "ucseg/nn.hpp"

#include <algorithm>
#include <cmath>

namespace ucseg {

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

std::vector<std::size_t> spatial_of(const Tensor& x) {
  if (x.rank() < 3) throw ShapeError("expected [N,C,sp...] tensor, got " + shape_str(x.shape()));
  return {x.shape().begin() + 2, x.shape().end()};
}

std::size_t prod(const std::vector<std::size_t>& v) {
  std::size_t p = 1;
  for (auto d : v) p *= d;
  return p;
}

// ---------------- convolution ----------------

struct ConvDims {
  std::size_t n, ci, co, k, stride, pad, r;
  std::vector<std::size_t> in_sp, out_sp;
  std::size_t in_spn, out_spn, ksp;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t k,
                   std::size_t stride, std::size_t pad) {
  ConvDims d;
  d.in_sp = spatial_of(x);
  d.r = d.in_sp.size();
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.k = k;
  d.stride = stride;
  d.pad = pad;
  if (w.rank() != 2 + d.r || w.dim(1) != d.ci)
    throw ShapeError("conv: weight shape " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()));
  for (std::size_t a = 0; a < d.r; ++a)
    if (w.dim(2 + a) != k) throw ShapeError("conv: weight kernel extent mismatch");
  d.co = w.dim(0);
  if (b.numel() != d.co) throw ShapeError("conv: bias size mismatch");
  for (auto s : d.in_sp) {
    if (s + 2 * pad < k) throw ShapeError("conv: input too small for kernel");
    d.out_sp.push_back((s + 2 * pad - k) / stride + 1);
  }
  d.in_spn = prod(d.in_sp);
  d.out_spn = prod(d.out_sp);
  d.ksp = 1;
  for (std::size_t a = 0; a < d.r; ++a) d.ksp *= k;
  return d;
}

// 2D specialization: axpy-style inner loops over contiguous output rows.
void conv2d_forward(const ConvDims& d, const double* X, const double* W, const double* B,
                    double* O) {
  const std::size_t H = d.in_sp[0], Wd = d.in_sp[1];
  const std::size_t OH = d.out_sp[0], OW = d.out_sp[1];
  const long p = static_cast<long>(d.pad);
  const long s = static_cast<long>(d.stride);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.co; ++co) {
      double* oplane = O + (n * d.co + co) * d.out_spn;
      std::fill(oplane, oplane + d.out_spn, B[co]);
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        const double* xplane = X + (n * d.ci + ci) * d.in_spn;
        const double* wk = W + (co * d.ci + ci) * d.ksp;
        for (std::size_t ky = 0; ky < d.k; ++ky)
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const double wv = wk[ky * d.k + kx];
            const long dy = static_cast<long>(ky) - p;
            const long dx = static_cast<long>(kx) - p;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const long iy = static_cast<long>(oy) * s + dy;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const double* xrow = xplane + static_cast<std::size_t>(iy) * Wd;
              double* orow = oplane + oy * OW;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const long ix = static_cast<long>(ox) * s + dx;
                if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                orow[ox] += wv * xrow[static_cast<std::size_t>(ix)];
              }
            }
          }
      }
    }
}

void conv2d_backward(const ConvDims& d, const double* X, const double* W, const double* G,
                     double* gX, double* gW, double* gB) {
  const std::size_t H = d.in_sp[0], Wd = d.in_sp[1];
  const std::size_t OH = d.out_sp[0], OW = d.out_sp[1];
  const long p = static_cast<long>(d.pad);
  const long s = static_cast<long>(d.stride);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.co; ++co) {
      const double* gplane = G + (n * d.co + co) * d.out_spn;
      if (gB) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d.out_spn; ++i) acc += gplane[i];
        gB[co] += acc;
      }
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        const double* xplane = X + (n * d.ci + ci) * d.in_spn;
        double* gxplane = gX ? gX + (n * d.ci + ci) * d.in_spn : nullptr;
        const double* wk = W + (co * d.ci + ci) * d.ksp;
        double* gwk = gW ? gW + (co * d.ci + ci) * d.ksp : nullptr;
        for (std::size_t ky = 0; ky < d.k; ++ky)
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const double wv = wk[ky * d.k + kx];
            const long dy = static_cast<long>(ky) - p;
            const long dx = static_cast<long>(kx) - p;
            double wacc = 0.0;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const long iy = static_cast<long>(oy) * s + dy;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const double* xrow = xplane + static_cast<std::size_t>(iy) * Wd;
              double* gxrow = gxplane ? gxplane + static_cast<std::size_t>(iy) * Wd : nullptr;
              const double* grow = gplane + oy * OW;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const long ix = static_cast<long>(ox) * s + dx;
                if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                const double g = grow[ox];
                wacc += g * xrow[static_cast<std::size_t>(ix)];
                if (gxrow) gxrow[static_cast<std::size_t>(ix)] += wv * g;
              }
            }
            if (gwk) gwk[ky * d.k + kx] += wacc;
          }
      }
    }
}

// generic rank (used for 3D / 1D)
void conv_nd_generic(const ConvDims& d, const double* X, const double* W, const double* B,
                     const double* G, double* O, double* gX, double* gW, double* gB) {
  const std::size_t r = d.r;
  std::vector<long> tap(r);
  std::vector<std::size_t> ocoord(r), icoord(r);
  std::vector<std::size_t> in_stride(r, 1), out_stride(r, 1);
  for (std::size_t a = r; a-- > 1;) {
    in_stride[a - 1] = in_stride[a] * d.in_sp[a];
    out_stride[a - 1] = out_stride[a] * d.out_sp[a];
  }
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.co; ++co) {
      double* oplane = O ? O + (n * d.co + co) * d.out_spn : nullptr;
      const double* gplane = G ? G + (n * d.co + co) * d.out_spn : nullptr;
      if (oplane) std::fill(oplane, oplane + d.out_spn, B[co]);
      if (gB && gplane) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d.out_spn; ++i) acc += gplane[i];
        gB[co] += acc;
      }
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        const double* xplane = X + (n * d.ci + ci) * d.in_spn;
        double* gxplane = gX ? gX + (n * d.ci + ci) * d.in_spn : nullptr;
        const double* wk = W + (co * d.ci + ci) * d.ksp;
        double* gwk = gW ? gW + (co * d.ci + ci) * d.ksp : nullptr;
        for (std::size_t t = 0; t < d.ksp; ++t) {
          std::size_t tt = t;
          for (std::size_t a = r; a-- > 0;) {
            tap[a] = static_cast<long>(tt % d.k) - static_cast<long>(d.pad);
            tt /= d.k;
          }
          const double wv = wk[t];
          double wacc = 0.0;
          std::fill(ocoord.begin(), ocoord.end(), 0);
          for (std::size_t oi = 0; oi < d.out_spn; ++oi) {
            bool ok = true;
            std::size_t ii = 0;
            for (std::size_t a = 0; a < r; ++a) {
              const long ic = static_cast<long>(ocoord[a] * d.stride) + tap[a];
              if (ic < 0 || ic >= static_cast<long>(d.in_sp[a])) {
                ok = false;
                break;
              }
              ii += static_cast<std::size_t>(ic) * in_stride[a];
            }
            if (ok) {
              if (oplane) oplane[oi] += wv * xplane[ii];
              if (gplane) {
                const double g = gplane[oi];
                wacc += g * xplane[ii];
                if (gxplane) gxplane[ii] += wv * g;
              }
            }
            for (std::size_t a = r; a-- > 0;) {
              if (++ocoord[a] < d.out_sp[a]) break;
              ocoord[a] = 0;
            }
          }
          if (gwk) gwk[t] += wacc;
        }
      }
    }
}

}  // namespace

Var conv_nd(const Var& x, const Var& w, const Var& b, std::size_t k, std::size_t stride,
            std::size_t pad) {
  ConvDims d = conv_dims(x->value, w->value, b->value, k, stride, pad);
  Shape os = {d.n, d.co};
  os.insert(os.end(), d.out_sp.begin(), d.out_sp.end());
  Tensor out(os);
  if (d.r == 2)
    conv2d_forward(d, x->value.data(), w->value.data(), b->value.data(), out.data());
  else
    conv_nd_generic(d, x->value.data(), w->value.data(), b->value.data(), nullptr, out.data(),
                    nullptr, nullptr, nullptr);
  return make_node(std::move(out), {x, w, b}, "conv_nd", [d](Node& self) {
    auto& x_in = self.inputs[0];
    auto& w_in = self.inputs[1];
    auto& b_in = self.inputs[2];
    double* gX = nullptr;
    double* gW = nullptr;
    double* gB = nullptr;
    if (x_in->requires_grad) {
      x_in->ensure_grad();
      gX = x_in->grad.data();
    }
    if (w_in->requires_grad) {
      w_in->ensure_grad();
      gW = w_in->grad.data();
    }
    if (b_in->requires_grad) {
      b_in->ensure_grad();
      gB = b_in->grad.data();
    }
    if (d.r == 2)
      conv2d_backward(d, x_in->value.data(), w_in->value.data(), self.grad.data(), gX, gW, gB);
    else
      conv_nd_generic(d, x_in->value.data(), w_in->value.data(), b_in->value.data(),
                      self.grad.data(), nullptr, gX, gW, gB);
  });
}

Var avg_pool_nd(const Var& x, std::size_t k) {
  const auto in_sp = spatial_of(x->value);
  const std::size_t r = in_sp.size();
  std::vector<std::size_t> out_sp(r);
  for (std::size_t a = 0; a < r; ++a) {
    out_sp[a] = in_sp[a] / k;
    if (out_sp[a] == 0)
      throw ShapeError("avg_pool: spatial dim " + std::to_string(in_sp[a]) + " < window " +
                       std::to_string(k));
  }
  const std::size_t n = x->value.dim(0), c = x->value.dim(1);
  const std::size_t in_spn = prod(in_sp), out_spn = prod(out_sp);
  std::size_t win = 1;
  for (std::size_t a = 0; a < r; ++a) win *= k;

  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t a = r; a-- > 1;) in_stride[a - 1] = in_stride[a] * in_sp[a];

  // precompute for every output cell the base input offset, and window offsets
  std::vector<std::size_t> base(out_spn), woff(win);
  {
    std::vector<std::size_t> oc(r, 0);
    for (std::size_t oi = 0; oi < out_spn; ++oi) {
      std::size_t idx = 0;
      for (std::size_t a = 0; a < r; ++a) idx += oc[a] * k * in_stride[a];
      base[oi] = idx;
      for (std::size_t a = r; a-- > 0;) {
        if (++oc[a] < out_sp[a]) break;
        oc[a] = 0;
      }
    }
    std::vector<std::size_t> wc(r, 0);
    for (std::size_t wi = 0; wi < win; ++wi) {
      std::size_t idx = 0;
      for (std::size_t a = 0; a < r; ++a) idx += wc[a] * in_stride[a];
      woff[wi] = idx;
      for (std::size_t a = r; a-- > 0;) {
        if (++wc[a] < k) break;
        wc[a] = 0;
      }
    }
  }

  Shape os = {n, c};
  os.insert(os.end(), out_sp.begin(), out_sp.end());
  Tensor out(os);
  const double inv = 1.0 / static_cast<double>(win);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* xp = x->value.data() + p * in_spn;
    double* op = out.data() + p * out_spn;
    for (std::size_t oi = 0; oi < out_spn; ++oi) {
      double acc = 0.0;
      for (std::size_t wi = 0; wi < win; ++wi) acc += xp[base[oi] + woff[wi]];
      op[oi] = acc * inv;
    }
  }
  return make_node(std::move(out), {x}, "avg_pool",
                   [in_spn, out_spn, base = std::move(base), woff = std::move(woff), inv,
                    planes = n * c](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      double* gx = in->grad.data() + p * in_spn;
      const double* g = self.grad.data() + p * out_spn;
      for (std::size_t oi = 0; oi < out_spn; ++oi) {
        const double gv = g[oi] * inv;
        for (std::size_t wi = 0; wi < woff.size(); ++wi) gx[base[oi] + woff[wi]] += gv;
      }
    }
  });
}

Var upsample_nearest_nd(const Var& x, std::size_t factor) {
  const auto in_sp = spatial_of(x->value);
  const std::size_t r = in_sp.size();
  std::vector<std::size_t> out_sp(r);
  for (std::size_t a = 0; a < r; ++a) out_sp[a] = in_sp[a] * factor;
  const std::size_t n = x->value.dim(0), c = x->value.dim(1);
  const std::size_t in_spn = prod(in_sp), out_spn = prod(out_sp);

  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t a = r; a-- > 1;) in_stride[a - 1] = in_stride[a] * in_sp[a];
  std::vector<std::size_t> src(out_spn);
  {
    std::vector<std::size_t> oc(r, 0);
    for (std::size_t oi = 0; oi < out_spn; ++oi) {
      std::size_t idx = 0;
      for (std::size_t a = 0; a < r; ++a) idx += (oc[a] / factor) * in_stride[a];
      src[oi] = idx;
      for (std::size_t a = r; a-- > 0;) {
        if (++oc[a] < out_sp[a]) break;
        oc[a] = 0;
      }
    }
  }
  Shape os = {n, c};
  os.insert(os.end(), out_sp.begin(), out_sp.end());
  Tensor out(os);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* xp = x->value.data() + p * in_spn;
    double* op = out.data() + p * out_spn;
    for (std::size_t oi = 0; oi < out_spn; ++oi) op[oi] = xp[src[oi]];
  }
  return make_node(std::move(out), {x}, "upsample_nearest",
                   [in_spn, out_spn, src = std::move(src), planes = n * c](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      double* gx = in->grad.data() + p * in_spn;
      const double* g = self.grad.data() + p * out_spn;
      for (std::size_t oi = 0; oi < out_spn; ++oi) gx[src[oi]] += g[oi];
    }
  });
}

Var resize_linear_nd(const Var& x, const std::vector<std::size_t>& out_sp) {
  const auto in_sp = spatial_of(x->value);
  const std::size_t r = in_sp.size();
  if (out_sp.size() != r) throw ShapeError("resize: rank mismatch");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1);
  const std::size_t in_spn = prod(in_sp), out_spn = prod(out_sp);

  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t a = r; a-- > 1;) in_stride[a - 1] = in_stride[a] * in_sp[a];

  // per output voxel: 2^r (index, weight) pairs
  const std::size_t corners = std::size_t{1} << r;
  std::vector<std::size_t> idx(out_spn * corners);
  std::vector<double> wgt(out_spn * corners);
  {
    std::vector<std::size_t> oc(r, 0);
    std::vector<std::size_t> i0(r), i1(r);
    std::vector<double> t(r);
    for (std::size_t oi = 0; oi < out_spn; ++oi) {
      for (std::size_t a = 0; a < r; ++a) {
        const double scale = static_cast<double>(in_sp[a]) / static_cast<double>(out_sp[a]);
        double s = (static_cast<double>(oc[a]) + 0.5) * scale - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(in_sp[a] - 1));
        const double fl = std::floor(s);
        i0[a] = static_cast<std::size_t>(fl);
        i1[a] = std::min(i0[a] + 1, in_sp[a] - 1);
        t[a] = s - fl;
      }
      for (std::size_t cbits = 0; cbits < corners; ++cbits) {
        std::size_t ii = 0;
        double w = 1.0;
        for (std::size_t a = 0; a < r; ++a) {
          if (cbits & (std::size_t{1} << a)) {
            ii += i1[a] * in_stride[a];
            w *= t[a];
          } else {
            ii += i0[a] * in_stride[a];
            w *= 1.0 - t[a];
          }
        }
        idx[oi * corners + cbits] = ii;
        wgt[oi * corners + cbits] = w;
      }
      for (std::size_t a = r; a-- > 0;) {
        if (++oc[a] < out_sp[a]) break;
        oc[a] = 0;
      }
    }
  }
  Shape os = {n, c};
  os.insert(os.end(), out_sp.begin(), out_sp.end());
  Tensor out(os);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* xp = x->value.data() + p * in_spn;
    double* op = out.data() + p * out_spn;
    for (std::size_t oi = 0; oi < out_spn; ++oi) {
      double acc = 0.0;
      for (std::size_t cb = 0; cb < corners; ++cb)
        acc += wgt[oi * corners + cb] * xp[idx[oi * corners + cb]];
      op[oi] = acc;
    }
  }
  return make_node(std::move(out), {x}, "resize_linear",
                   [in_spn, out_spn, corners, idx = std::move(idx), wgt = std::move(wgt),
                    planes = n * c](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      double* gx = in->grad.data() + p * in_spn;
      const double* g = self.grad.data() + p * out_spn;
      for (std::size_t oi = 0; oi < out_spn; ++oi)
        for (std::size_t cb = 0; cb < corners; ++cb)
          gx[idx[oi * corners + cb]] += wgt[oi * corners + cb] * g[oi];
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps) {
  const auto sp = spatial_of(x->value);
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), spn = prod(sp);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw ShapeError("group_norm: affine parameter size mismatch");
  const std::size_t cpg = c / groups;
  const std::size_t m = cpg * spn;

  std::vector<double> mean(n * groups), inv(n * groups);
  Tensor out(x->value.shape());
  const double* X = x->value.data();
  const double* GM = gamma->value.data();
  const double* BT = beta->value.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (i * c + g * cpg) * spn;
      double mu = 0.0;
      for (std::size_t j = 0; j < m; ++j) mu += X[base + j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = X[base + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double iv = 1.0 / std::sqrt(var + eps);
      mean[i * groups + g] = mu;
      inv[i * groups + g] = iv;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t ch = g * cpg + cc;
        for (std::size_t s = 0; s < spn; ++s) {
          const std::size_t o = (i * c + ch) * spn + s;
          out[o] = GM[ch] * (X[o] - mu) * iv + BT[ch];
        }
      }
    }
  return make_node(std::move(out), {x, gamma, beta}, "group_norm",
                   [n, c, spn, groups, cpg, m, mean = std::move(mean),
                    inv = std::move(inv)](Node& self) {
    auto& x_in = self.inputs[0];
    auto& g_in = self.inputs[1];
    auto& b_in = self.inputs[2];
    const double* X = x_in->value.data();
    const double* GM = g_in->value.data();
    const double* G = self.grad.data();
    if (g_in->requires_grad) g_in->ensure_grad();
    if (b_in->requires_grad) b_in->ensure_grad();
    if (x_in->requires_grad) x_in->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t base = (i * c + g * cpg) * spn;
        const double mu = mean[i * groups + g];
        const double iv = inv[i * groups + g];
        // affine grads + the two reduction terms for dx
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t cc = 0; cc < cpg; ++cc) {
          const std::size_t ch = g * cpg + cc;
          double dg = 0.0, db = 0.0;
          for (std::size_t s = 0; s < spn; ++s) {
            const std::size_t o = (i * c + ch) * spn + s;
            const double xhat = (X[o] - mu) * iv;
            const double gv = G[o];
            dg += gv * xhat;
            db += gv;
            const double dxhat = gv * GM[ch];
            s1 += dxhat;
            s2 += dxhat * xhat;
          }
          if (g_in->requires_grad) g_in->grad[ch] += dg;
          if (b_in->requires_grad) b_in->grad[ch] += db;
        }
        if (x_in->requires_grad) {
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t cc = 0; cc < cpg; ++cc) {
            const std::size_t ch = g * cpg + cc;
            for (std::size_t s = 0; s < spn; ++s) {
              const std::size_t o = (i * c + ch) * spn + s;
              const double xhat = (X[o] - mu) * iv;
              const double dxhat = G[o] * GM[ch];
              x_in->grad[o] += iv * (dxhat - s1 * inv_m - xhat * s2 * inv_m);
            }
          }
        }
        (void)base;
      }
  });
}

Var gap_spatial(const Var& x) {
  const auto sp = spatial_of(x->value);
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), spn = prod(sp);
  Tensor out({n, c});
  const double inv = 1.0 / static_cast<double>(spn);
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    const double* xp = x->value.data() + p * spn;
    for (std::size_t s = 0; s < spn; ++s) acc += xp[s];
    out[p] = acc * inv;
  }
  return make_node(std::move(out), {x}, "gap_spatial", [spn, inv, planes = n * c](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      const double g = self.grad[p] * inv;
      double* gx = in->grad.data() + p * spn;
      for (std::size_t s = 0; s < spn; ++s) gx[s] += g;
    }
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  if (x->value.rank() != 2) throw ShapeError("l2_normalize_rows: expected [N,D]");
  const std::size_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor out(x->value.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x->value[i * d + j] * x->value[i * d + j];
    const double nrm = std::sqrt(s);
    norms[i] = nrm;
    const double denom = std::max(nrm, eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x->value[i * d + j] / denom;
  }
  return make_node(std::move(out), {x}, "l2_normalize",
                   [n, d, eps, norms = std::move(norms)](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    const double* X = in->value.data();
    const double* G = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double nrm = norms[i];
      if (nrm > eps) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += X[i * d + j] * G[i * d + j];
        const double n3 = nrm * nrm * nrm;
        for (std::size_t j = 0; j < d; ++j)
          in->grad[i * d + j] += G[i * d + j] / nrm - X[i * d + j] * dot / n3;
      } else {
        for (std::size_t j = 0; j < d; ++j) in->grad[i * d + j] += G[i * d + j] / eps;
      }
    }
  });
}

namespace {
std::vector<std::size_t> token_index_map(const std::vector<std::size_t>& sp, std::size_t patch,
                                         std::size_t& n_tokens, std::size_t& tok_dim) {
  const std::size_t r = sp.size();
  std::vector<std::size_t> blocks(r);
  for (std::size_t a = 0; a < r; ++a) {
    if (sp[a] % patch != 0)
      throw ShapeError("tokenize: spatial dim " + std::to_string(sp[a]) +
                       " not divisible by patch " + std::to_string(patch));
    blocks[a] = sp[a] / patch;
  }
  std::vector<std::size_t> stride(r, 1);
  for (std::size_t a = r; a-- > 1;) stride[a - 1] = stride[a] * sp[a];
  n_tokens = prod(blocks);
  tok_dim = 1;
  for (std::size_t a = 0; a < r; ++a) tok_dim *= patch;
  std::vector<std::size_t> map(n_tokens * tok_dim);
  std::vector<std::size_t> bc(r, 0), wc(r, 0);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    std::fill(wc.begin(), wc.end(), 0);
    for (std::size_t w = 0; w < tok_dim; ++w) {
      std::size_t idx = 0;
      for (std::size_t a = 0; a < r; ++a) idx += (bc[a] * patch + wc[a]) * stride[a];
      map[t * tok_dim + w] = idx;
      for (std::size_t a = r; a-- > 0;) {
        if (++wc[a] < patch) break;
        wc[a] = 0;
      }
    }
    for (std::size_t a = r; a-- > 0;) {
      if (++bc[a] < blocks[a]) break;
      bc[a] = 0;
    }
  }
  return map;
}
}  // namespace

Var tokenize_patches(const Var& x, std::size_t patch) {
  std::size_t n_tokens = 0, tok_dim = 0;
  auto map = token_index_map(x->value.shape(), patch, n_tokens, tok_dim);
  Tensor out({n_tokens, tok_dim});
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = x->value[map[i]];
  return make_node(std::move(out), {x}, "tokenize", [map = std::move(map)](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < map.size(); ++i) in->grad[map[i]] += self.grad[i];
  });
}

Var detokenize_patches(const Var& tokens, const std::vector<std::size_t>& sp, std::size_t patch) {
  std::size_t n_tokens = 0, tok_dim = 0;
  auto map = token_index_map(sp, patch, n_tokens, tok_dim);
  if (tokens->value.rank() != 2 || tokens->value.dim(0) != n_tokens ||
      tokens->value.dim(1) != tok_dim)
    throw ShapeError("detokenize: token tensor " + shape_str(tokens->value.shape()) +
                     " does not match target map");
  Tensor out(sp);
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] = tokens->value[i];
  return make_node(std::move(out), {tokens}, "detokenize", [map = std::move(map)](Node& self) {
    auto& in = self.inputs[0];
    in->ensure_grad();
    for (std::size_t i = 0; i < map.size(); ++i) in->grad[i] += self.grad[map[i]];
  });
}

}  // namespace ucseg
