#include "cpgg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace cpgg {

namespace {

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
using RowMatrix = typename Tensor<S>::RowMatrix;

template <typename S>
void require_same_shape(const char* op, const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename S>
void require_rank(const char* op, const Var<S>& a, int rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <typename S>
bool wants(const NodePtr<S>& n) {
  return n->requires_grad;
}

/// Elementwise unary op; dfn(x, y) returns dy/dx.
template <typename S, typename Fwd, typename Deriv>
Var<S> unary(const Var<S>& x, Fwd fwd, Deriv dfn) {
  Tensor<S> y(x.shape());
  const S* xs = x.value().data();
  S* ys = y.data();
  for (Index i = 0; i < y.size(); ++i) ys[i] = fwd(xs[i]);
  return detail::make_result<S>(std::move(y), {x}, [dfn](Node<S>& self) {
    auto& in = self.inputs[0];
    Tensor<S> g(in->value.shape());
    const S* xv = in->value.data();
    const S* yv = self.value.data();
    const S* gy = self.grad.data();
    for (Index i = 0; i < g.size(); ++i) g[i] = gy[i] * dfn(xv[i], yv[i]);
    in->accumulate(g);
  });
}

}  // namespace

// ---------------------------------------------------------------- arithmetic

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape("add", a, b);
  Tensor<S> y(a.shape());
  y.vec() = a.value().vec() + b.value().vec();
  return detail::make_result<S>(std::move(y), {a, b}, [](Node<S>& self) {
    for (auto& in : self.inputs)
      if (wants(in)) in->accumulate(self.grad);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape("sub", a, b);
  Tensor<S> y(a.shape());
  y.vec() = a.value().vec() - b.value().vec();
  return detail::make_result<S>(std::move(y), {a, b}, [](Node<S>& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
    if (wants(self.inputs[1])) {
      Tensor<S> g(self.grad.shape());
      g.vec() = -self.grad.vec();
      self.inputs[1]->accumulate(g);
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape("mul", a, b);
  Tensor<S> y(a.shape());
  y.vec() = a.value().vec().cwiseProduct(b.value().vec());
  return detail::make_result<S>(std::move(y), {a, b}, [](Node<S>& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    if (wants(lhs)) {
      Tensor<S> g(lhs->value.shape());
      g.vec() = self.grad.vec().cwiseProduct(rhs->value.vec());
      lhs->accumulate(g);
    }
    if (wants(rhs)) {
      Tensor<S> g(rhs->value.shape());
      g.vec() = self.grad.vec().cwiseProduct(lhs->value.vec());
      rhs->accumulate(g);
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> y(a.shape());
  y.vec() = a.value().vec() * factor;
  return detail::make_result<S>(std::move(y), {a}, [factor](Node<S>& self) {
    Tensor<S> g(self.grad.shape());
    g.vec() = self.grad.vec() * factor;
    self.inputs[0]->accumulate(g);
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  Tensor<S> y(a.shape());
  y.vec() = a.value().vec().array() + offset;
  return detail::make_result<S>(std::move(y), {a},
                                [](Node<S>& self) { self.inputs[0]->accumulate(self.grad); });
}

template <typename S>
Var<S> scale_rows(const Var<S>& a, std::span<const S> factors) {
  if (static_cast<Index>(factors.size()) != a.value().rows()) {
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for shape " +
                     shape_str(a.shape()));
  }
  std::vector<S> f(factors.begin(), factors.end());
  Tensor<S> y(a.shape());
  const Index cols = a.value().row_size();
  for (Index r = 0; r < a.value().rows(); ++r) y.mat().row(r) = a.value().mat().row(r) * f[r];
  return detail::make_result<S>(std::move(y), {a}, [f = std::move(f), cols](Node<S>& self) {
    Tensor<S> g(self.grad.shape());
    for (Index r = 0; r < g.rows(); ++r) g.mat().row(r) = self.grad.mat().row(r) * f[r];
    (void)cols;
    self.inputs[0]->accumulate(g);
  });
}

// --------------------------------------------------------------- activations

template <typename S>
Var<S> leaky_relu(const Var<S>& x, S slope) {
  return unary<S>(
      x, [slope](S v) { return v > 0 ? v : slope * v; },
      [slope](S v, S) { return v > 0 ? S(1) : slope; });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  return unary<S>(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
  return unary<S>(
      x, [](S v) { return v / (S(1) + std::exp(-v)); },
      [](S v, S) {
        S s = S(1) / (S(1) + std::exp(-v));
        return s * (S(1) + v * (S(1) - s));
      });
}

template <typename S>
Var<S> exp(const Var<S>& x) {
  return unary<S>(
      x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

// ------------------------------------------------------------ linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<S> y({a.shape()[0], b.shape()[1]});
  y.mat().noalias() = a.value().mat() * b.value().mat();
  return detail::make_result<S>(std::move(y), {a, b}, [](Node<S>& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    if (wants(lhs)) {
      Tensor<S> g(lhs->value.shape());
      g.mat().noalias() = self.grad.mat() * rhs->value.mat().transpose();
      lhs->accumulate(g);
    }
    if (wants(rhs)) {
      Tensor<S> g(rhs->value.shape());
      g.mat().noalias() = lhs->value.mat().transpose() * self.grad.mat();
      rhs->accumulate(g);
    }
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  if (x.shape()[1] != w.shape()[0] || b.size() != w.shape()[1]) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                     shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  Tensor<S> y({x.shape()[0], w.shape()[1]});
  y.mat().noalias() = x.value().mat() * w.value().mat();
  y.mat().rowwise() += b.value().vec().transpose();
  return detail::make_result<S>(std::move(y), {x, w, b}, [](Node<S>& self) {
    auto& xi = self.inputs[0];
    auto& wi = self.inputs[1];
    auto& bi = self.inputs[2];
    if (wants(xi)) {
      Tensor<S> g(xi->value.shape());
      g.mat().noalias() = self.grad.mat() * wi->value.mat().transpose();
      xi->accumulate(g);
    }
    if (wants(wi)) {
      Tensor<S> g(wi->value.shape());
      g.mat().noalias() = xi->value.mat().transpose() * self.grad.mat();
      wi->accumulate(g);
    }
    if (wants(bi)) {
      Tensor<S> g(bi->value.shape());
      g.vec() = self.grad.mat().colwise().sum().transpose();
      bi->accumulate(g);
    }
  });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
  require_rank("softmax_rows", x, 2);
  Tensor<S> y(x.shape());
  auto xm = x.value().mat();
  auto ym = y.mat();
  for (Index r = 0; r < xm.rows(); ++r) {
    S m = xm.row(r).maxCoeff();
    ym.row(r) = (xm.row(r).array() - m).exp();
    ym.row(r) /= ym.row(r).sum();
  }
  return detail::make_result<S>(std::move(y), {x}, [](Node<S>& self) {
    Tensor<S> g(self.value.shape());
    auto yv = self.value.mat();
    auto gy = self.grad.mat();
    for (Index r = 0; r < yv.rows(); ++r) {
      S dot = gy.row(r).dot(yv.row(r));
      g.mat().row(r) = yv.row(r).cwiseProduct((gy.row(r).array() - dot).matrix());
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  const Index nq = q.shape()[0];
  const Index nk = k.shape()[0];
  const Index d = q.shape()[1];
  if (k.shape()[1] != d || v.shape()[1] != d || v.shape()[0] != nk) {
    throw ShapeError("attention: q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                     shape_str(v.shape()));
  }
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const Index dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
  auto probs = std::make_shared<std::vector<RowMatrix<S>>>(static_cast<size_t>(heads));
  Tensor<S> y({nq, d});
  auto qm = q.value().mat();
  auto km = k.value().mat();
  auto vm = v.value().mat();
  for (int h = 0; h < heads; ++h) {
    const Index c0 = h * dh;
    RowMatrix<S> s = (qm.middleCols(c0, dh) * km.middleCols(c0, dh).transpose()) * inv_scale;
    for (Index r = 0; r < nq; ++r) {
      S m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    y.mat().middleCols(c0, dh).noalias() = s * vm.middleCols(c0, dh);
    (*probs)[static_cast<size_t>(h)] = std::move(s);
  }
  return detail::make_result<S>(std::move(y), {q, k, v}, [probs, heads, dh, inv_scale](Node<S>& self) {
    auto& qi = self.inputs[0];
    auto& ki = self.inputs[1];
    auto& vi = self.inputs[2];
    Tensor<S> gq(qi->value.shape()), gk(ki->value.shape()), gv(vi->value.shape());
    auto go = self.grad.mat();
    for (int h = 0; h < heads; ++h) {
      const Index c0 = h * dh;
      const auto& p = (*probs)[static_cast<size_t>(h)];
      gv.mat().middleCols(c0, dh).noalias() = p.transpose() * go.middleCols(c0, dh);
      RowMatrix<S> dp = go.middleCols(c0, dh) * vi->value.mat().middleCols(c0, dh).transpose();
      RowMatrix<S> ds(p.rows(), p.cols());
      for (Index r = 0; r < p.rows(); ++r) {
        S dot = dp.row(r).dot(p.row(r));
        ds.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
      }
      ds *= inv_scale;
      gq.mat().middleCols(c0, dh).noalias() = ds * ki->value.mat().middleCols(c0, dh);
      gk.mat().middleCols(c0, dh).noalias() = ds.transpose() * qi->value.mat().middleCols(c0, dh);
    }
    if (wants(qi)) qi->accumulate(gq);
    if (wants(ki)) ki->accumulate(gk);
    if (wants(vi)) vi->accumulate(gv);
  });
}

// ------------------------------------------------------------- normalization

namespace {

/// Shared kernel: rows of `x` are normalization groups of length `len`;
/// `channel_of(i)` maps a flat element index to its affine parameter.
template <typename S, typename ChannelOf>
Var<S> normalize_groups(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, Index groups, Index len,
                        S eps, ChannelOf channel_of) {
  auto xhat = std::make_shared<Tensor<S>>(x.shape());
  auto rstd = std::make_shared<std::vector<S>>(static_cast<size_t>(groups));
  Tensor<S> y(x.shape());
  const S* xv = x.value().data();
  const S* gv = gamma.value().data();
  const S* bv = beta.value().data();
  for (Index g = 0; g < groups; ++g) {
    const Index base = g * len;
    S mu = 0;
    for (Index i = 0; i < len; ++i) mu += xv[base + i];
    mu /= static_cast<S>(len);
    S var = 0;
    for (Index i = 0; i < len; ++i) {
      S c = xv[base + i] - mu;
      var += c * c;
    }
    var /= static_cast<S>(len);
    S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(g)] = rs;
    for (Index i = 0; i < len; ++i) {
      S xh = (xv[base + i] - mu) * rs;
      (*xhat)[base + i] = xh;
      Index c = channel_of(base + i);
      y[base + i] = xh * gv[c] + bv[c];
    }
  }
  return detail::make_result<S>(
      std::move(y), {x, gamma, beta}, [xhat, rstd, groups, len, channel_of](Node<S>& self) {
        auto& xi = self.inputs[0];
        auto& gi = self.inputs[1];
        auto& bi = self.inputs[2];
        const S* gy = self.grad.data();
        const S* gam = gi->value.data();
        Tensor<S> dgamma(gi->value.shape()), dbeta(bi->value.shape());
        Tensor<S> dx(xi->value.shape());
        std::vector<S> dxh(static_cast<size_t>(len));
        for (Index g = 0; g < groups; ++g) {
          const Index base = g * len;
          S mean_d = 0, mean_dx = 0;
          for (Index i = 0; i < len; ++i) {
            Index c = channel_of(base + i);
            S xh = (*xhat)[base + i];
            dgamma[c] += gy[base + i] * xh;
            dbeta[c] += gy[base + i];
            S d = gy[base + i] * gam[c];
            dxh[static_cast<size_t>(i)] = d;
            mean_d += d;
            mean_dx += d * xh;
          }
          mean_d /= static_cast<S>(len);
          mean_dx /= static_cast<S>(len);
          const S rs = (*rstd)[static_cast<size_t>(g)];
          for (Index i = 0; i < len; ++i) {
            dx[base + i] = rs * (dxh[static_cast<size_t>(i)] - mean_d - (*xhat)[base + i] * mean_dx);
          }
        }
        if (wants(xi)) xi->accumulate(dx);
        if (wants(gi)) gi->accumulate(dgamma);
        if (wants(bi)) bi->accumulate(dbeta);
      });
}

}  // namespace

template <typename S>
Var<S> layernorm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  require_rank("layernorm", x, 2);
  const Index d = x.shape()[1];
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layernorm: affine length does not match width of " + shape_str(x.shape()));
  }
  return normalize_groups<S>(x, gamma, beta, x.shape()[0], d, eps, [d](Index i) { return i % d; });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps) {
  const Index channels = x.value().rows();
  if (groups <= 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.size() != channels || beta.size() != channels) {
    throw ShapeError("group_norm: affine length does not match channel count");
  }
  const Index spatial = x.value().row_size();
  const Index len = spatial * (channels / groups);
  return normalize_groups<S>(x, gamma, beta, groups, len, eps,
                             [spatial](Index i) { return i / spatial; });
}

// ---------------------------------------------------------------- volumetric

namespace {

struct ConvGeometry {
  Index cin, t, h, w;
  Index cout, kt, kh, kw;
  Triple stride, pad;
  Index ot, oh, ow;
  Index patch() const { return cin * kt * kh * kw; }
  Index positions() const { return ot * oh * ow; }
};

template <typename S>
ConvGeometry conv_geometry(const Var<S>& x, const Var<S>& w, Triple stride, Triple pad) {
  require_rank("conv3d", x, 4);
  require_rank("conv3d", w, 5);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[0]) {
    throw ShapeError("conv3d: weight " + shape_str(ws) + " expects " + std::to_string(ws[1]) +
                     " input channels, input is " + shape_str(xs));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], ws[4], stride, pad, 0, 0, 0};
  const Index in[3] = {g.t, g.h, g.w};
  const Index k[3] = {g.kt, g.kh, g.kw};
  Index out[3];
  for (int a = 0; a < 3; ++a) {
    if (stride[a] <= 0 || pad[a] < 0) throw ShapeError("conv3d: stride must be positive, pad non-negative");
    if (in[a] + 2 * pad[a] < k[a]) {
      throw ShapeError("conv3d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
    }
    out[a] = (in[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
  }
  g.ot = out[0];
  g.oh = out[1];
  g.ow = out[2];
  return g;
}

template <typename S>
void im2col(const ConvGeometry& g, const S* x, RowMatrix<S>& col) {
  col.setZero(g.patch(), g.positions());
  Index row = 0;
  for (Index c = 0; c < g.cin; ++c)
    for (Index dt = 0; dt < g.kt; ++dt)
      for (Index dh = 0; dh < g.kh; ++dh)
        for (Index dw = 0; dw < g.kw; ++dw, ++row) {
          S* dst = col.row(row).data();
          for (Index ot = 0; ot < g.ot; ++ot) {
            Index it = ot * g.stride[0] - g.pad[0] + dt;
            if (it < 0 || it >= g.t) continue;
            for (Index oh = 0; oh < g.oh; ++oh) {
              Index ih = oh * g.stride[1] - g.pad[1] + dh;
              if (ih < 0 || ih >= g.h) continue;
              const S* src = x + ((c * g.t + it) * g.h + ih) * g.w;
              S* out = dst + (ot * g.oh + oh) * g.ow;
              for (Index ow = 0; ow < g.ow; ++ow) {
                Index iw = ow * g.stride[2] - g.pad[2] + dw;
                if (iw >= 0 && iw < g.w) out[ow] = src[iw];
              }
            }
          }
        }
}

template <typename S>
void col2im(const ConvGeometry& g, const RowMatrix<S>& col, S* dx) {
  Index row = 0;
  for (Index c = 0; c < g.cin; ++c)
    for (Index dt = 0; dt < g.kt; ++dt)
      for (Index dh = 0; dh < g.kh; ++dh)
        for (Index dw = 0; dw < g.kw; ++dw, ++row) {
          const S* srcrow = col.row(row).data();
          for (Index ot = 0; ot < g.ot; ++ot) {
            Index it = ot * g.stride[0] - g.pad[0] + dt;
            if (it < 0 || it >= g.t) continue;
            for (Index oh = 0; oh < g.oh; ++oh) {
              Index ih = oh * g.stride[1] - g.pad[1] + dh;
              if (ih < 0 || ih >= g.h) continue;
              S* dst = dx + ((c * g.t + it) * g.h + ih) * g.w;
              const S* src = srcrow + (ot * g.oh + oh) * g.ow;
              for (Index ow = 0; ow < g.ow; ++ow) {
                Index iw = ow * g.stride[2] - g.pad[2] + dw;
                if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
              }
            }
          }
        }
}

template <typename S>
Var<S> conv3d_impl(const Var<S>& x, const Var<S>& w, const Var<S>* bias, Triple stride, Triple pad) {
  const ConvGeometry g = conv_geometry(x, w, stride, pad);
  if (bias && bias->size() != g.cout) {
    throw ShapeError("conv3d: bias length " + std::to_string(bias->size()) + " for " +
                     std::to_string(g.cout) + " output channels");
  }
  auto col = std::make_shared<RowMatrix<S>>();
  im2col(g, x.value().data(), *col);
  Tensor<S> y({g.cout, g.ot, g.oh, g.ow});
  typename Tensor<S>::ConstMatrixMap wm(w.value().data(), g.cout, g.patch());
  y.mat().noalias() = wm * (*col);
  if (bias) y.mat().colwise() += bias->value().vec();

  std::vector<Var<S>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return detail::make_result<S>(std::move(y), std::move(inputs), [g, col, has_bias](Node<S>& self) {
    auto& xi = self.inputs[0];
    auto& wi = self.inputs[1];
    auto gy = self.grad.mat();
    if (wants(wi)) {
      Tensor<S> gw(wi->value.shape());
      typename Tensor<S>::MatrixMap gwm(gw.data(), g.cout, g.patch());
      gwm.noalias() = gy * col->transpose();
      wi->accumulate(gw);
    }
    if (has_bias && wants(self.inputs[2])) {
      Tensor<S> gb(self.inputs[2]->value.shape());
      gb.vec() = gy.rowwise().sum();
      self.inputs[2]->accumulate(gb);
    }
    if (wants(xi)) {
      typename Tensor<S>::ConstMatrixMap wm(wi->value.data(), g.cout, g.patch());
      RowMatrix<S> dcol = wm.transpose() * gy;
      Tensor<S> gx(xi->value.shape());
      col2im(g, dcol, gx.data());
      xi->accumulate(gx);
    }
  });
}

}  // namespace

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, Triple stride, Triple pad) {
  return conv3d_impl<S>(x, w, nullptr, stride, pad);
}

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, Triple stride, Triple pad) {
  return conv3d_impl<S>(x, w, &bias, stride, pad);
}

template <typename S>
Var<S> upsample_nearest(const Var<S>& x, Triple f) {
  require_rank("upsample_nearest", x, 4);
  const auto& s = x.shape();
  const Index c = s[0], t = s[1], h = s[2], w = s[3];
  const Index ot = t * f[0], oh = h * f[1], ow = w * f[2];
  Tensor<S> y({c, ot, oh, ow});
  const S* xv = x.value().data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index a = 0; a < ot; ++a)
      for (Index b = 0; b < oh; ++b) {
        const S* src = xv + ((ci * t + a / f[0]) * h + b / f[1]) * w;
        S* dst = y.data() + ((ci * ot + a) * oh + b) * ow;
        for (Index d = 0; d < ow; ++d) dst[d] = src[d / f[2]];
      }
  return detail::make_result<S>(std::move(y), {x}, [f, c, t, h, w, ot, oh, ow](Node<S>& self) {
    Tensor<S> g(self.inputs[0]->value.shape());
    const S* gy = self.grad.data();
    for (Index ci = 0; ci < c; ++ci)
      for (Index a = 0; a < ot; ++a)
        for (Index b = 0; b < oh; ++b) {
          S* dst = g.data() + ((ci * t + a / f[0]) * h + b / f[1]) * w;
          const S* src = gy + ((ci * ot + a) * oh + b) * ow;
          for (Index d = 0; d < ow; ++d) dst[d / f[2]] += src[d];
        }
    self.inputs[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- structural

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> y = x.value().reshaped(std::move(shape));
  return detail::make_result<S>(std::move(y), {x}, [](Node<S>& self) {
    self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.shape()));
  });
}

template <typename S>
Var<S> gather_rows(const Var<S>& x, std::span<const Index> rows) {
  const Index n = x.value().rows();
  const Index width = x.value().row_size();
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  for (Index r : rows) {
    if (r < 0 || r >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<Index>(rows.size());
  Tensor<S> y(out_shape);
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.value().data() + rows[i] * width, width, y.data() + static_cast<Index>(i) * width);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result<S>(std::move(y), {x}, [idx = std::move(idx), width](Node<S>& self) {
    Tensor<S> g(self.inputs[0]->value.shape());
    for (size_t i = 0; i < idx.size(); ++i) {
      const S* src = self.grad.data() + static_cast<Index>(i) * width;
      S* dst = g.data() + idx[i] * width;
      for (Index j = 0; j < width; ++j) dst[j] += src[j];
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, Index begin, Index count) {
  std::vector<Index> idx(static_cast<size_t>(count));
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, std::span<const Index>(idx));
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index total = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) {
      throw ShapeError("concat_rows: trailing shapes differ, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.value().rows();
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = total;
  Tensor<S> y(out_shape);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy_n(p.value().data(), p.size(), y.data() + off);
    off += p.size();
  }
  return detail::make_result<S>(std::move(y), parts, [offsets = std::move(offsets)](Node<S>& self) {
    for (size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (!wants(in)) continue;
      Tensor<S> g(in->value.shape());
      std::copy_n(self.grad.data() + offsets[i], g.size(), g.data());
      in->accumulate(g);
    }
  });
}

template <typename S>
Var<S> mean_rows(const Var<S>& x) {
  require_rank("mean_rows", x, 2);
  const Index n = x.shape()[0];
  Tensor<S> y({1, x.shape()[1]});
  y.mat() = x.value().mat().colwise().mean();
  return detail::make_result<S>(std::move(y), {x}, [n](Node<S>& self) {
    Tensor<S> g(self.inputs[0]->value.shape());
    g.mat().rowwise() = self.grad.mat().row(0) / static_cast<S>(n);
    self.inputs[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Var<S> sum(const Var<S>& x) {
  Tensor<S> y = Tensor<S>::scalar(x.value().vec().sum());
  return detail::make_result<S>(std::move(y), {x}, [](Node<S>& self) {
    Tensor<S> g(self.inputs[0]->value.shape(), self.grad[0]);
    self.inputs[0]->accumulate(g);
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const S n = static_cast<S>(x.size());
  Tensor<S> y = Tensor<S>::scalar(x.value().vec().sum() / n);
  return detail::make_result<S>(std::move(y), {x}, [n](Node<S>& self) {
    Tensor<S> g(self.inputs[0]->value.shape(), self.grad[0] / n);
    self.inputs[0]->accumulate(g);
  });
}

namespace {

template <typename S>
Var<S> squared_error(const char* op, const Var<S>& p, const Var<S>& t, S norm) {
  require_same_shape(op, p, t);
  Tensor<S> y = Tensor<S>::scalar((p.value().vec() - t.value().vec()).squaredNorm() / norm);
  return detail::make_result<S>(std::move(y), {p, t}, [norm](Node<S>& self) {
    auto& pi = self.inputs[0];
    auto& ti = self.inputs[1];
    Tensor<S> g(pi->value.shape());
    g.vec() = (pi->value.vec() - ti->value.vec()) * (S(2) * self.grad[0] / norm);
    if (wants(pi)) pi->accumulate(g);
    if (wants(ti)) {
      g.vec() = -g.vec();
      ti->accumulate(g);
    }
  });
}

}  // namespace

template <typename S>
Var<S> mse(const Var<S>& prediction, const Var<S>& target) {
  return squared_error<S>("mse", prediction, target, static_cast<S>(prediction.size()));
}

template <typename S>
Var<S> row_sq_dist_mean(const Var<S>& prediction, const Var<S>& target) {
  return squared_error<S>("row_sq_dist_mean", prediction, target, static_cast<S>(prediction.value().rows()));
}

template <typename S>
Var<S> bce_with_logits(const Var<S>& logits, std::span<const S> targets) {
  if (static_cast<Index>(targets.size()) != logits.size()) {
    throw ShapeError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()));
  }
  const Index n = logits.size();
  std::vector<S> y(targets.begin(), targets.end());
  S total = 0;
  for (Index i = 0; i < n; ++i) {
    S x = logits.value()[i];
    total += std::max(x, S(0)) - x * y[static_cast<size_t>(i)] + std::log1p(std::exp(-std::abs(x)));
  }
  return detail::make_result<S>(Tensor<S>::scalar(total / static_cast<S>(n)), {logits},
                                [y = std::move(y), n](Node<S>& self) {
                                  auto& in = self.inputs[0];
                                  Tensor<S> g(in->value.shape());
                                  for (Index i = 0; i < n; ++i) {
                                    S s = S(1) / (S(1) + std::exp(-in->value[i]));
                                    g[i] = (s - y[static_cast<size_t>(i)]) * self.grad[0] / static_cast<S>(n);
                                  }
                                  in->accumulate(g);
                                });
}

// ------------------------------------------------------------ instantiation

#define CPGG_INSTANTIATE_OPS(S)                                                                 \
  template Var<S> add(const Var<S>&, const Var<S>&);                                            \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                            \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                            \
  template Var<S> scale(const Var<S>&, S);                                                      \
  template Var<S> add_scalar(const Var<S>&, S);                                                 \
  template Var<S> scale_rows(const Var<S>&, std::span<const S>);                                \
  template Var<S> leaky_relu(const Var<S>&, S);                                                 \
  template Var<S> silu(const Var<S>&);                                                          \
  template Var<S> sigmoid(const Var<S>&);                                                       \
  template Var<S> exp(const Var<S>&);                                                           \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                         \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, int);                  \
  template Var<S> softmax_rows(const Var<S>&);                                                  \
  template Var<S> layernorm(const Var<S>&, const Var<S>&, const Var<S>&, S);                    \
  template Var<S> group_norm(const Var<S>&, const Var<S>&, const Var<S>&, int, S);              \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, Triple, Triple);                         \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&, Triple, Triple);          \
  template Var<S> upsample_nearest(const Var<S>&, Triple);                                      \
  template Var<S> reshape(const Var<S>&, Shape);                                                \
  template Var<S> gather_rows(const Var<S>&, std::span<const Index>);                           \
  template Var<S> slice_rows(const Var<S>&, Index, Index);                                      \
  template Var<S> concat_rows(const std::vector<Var<S>>&);                                      \
  template Var<S> mean_rows(const Var<S>&);                                                     \
  template Var<S> sum(const Var<S>&);                                                           \
  template Var<S> mean(const Var<S>&);                                                          \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                            \
  template Var<S> row_sq_dist_mean(const Var<S>&, const Var<S>&);                               \
  template Var<S> bce_with_logits(const Var<S>&, std::span<const S>);

CPGG_INSTANTIATE_OPS(float)
CPGG_INSTANTIATE_OPS(double)

}  // namespace cpgg
