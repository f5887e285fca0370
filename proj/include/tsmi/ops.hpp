#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsmi/autodiff.hpp"
#include "tsmi/kernels.hpp"
#include "tsmi/rng.hpp"
#include "tsmi/tensor.hpp"

namespace tsmi::ops {

using detail::grad_if;
using detail::make_result;

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  Tensor<Real> out({m, n});
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), {&a, &b}, [a, b, m, k, n](const Tensor<Real>& g) {
    if (Real* da = grad_if(a)) kernels::gemm_nt(m, n, k, g.data(), b.value().data(), da);
    if (Real* db = grad_if(b)) kernels::gemm_tn(k, m, n, a.value().data(), g.data(), db);
  });
}

/// y = x W + b over the last axis of x. W is [in x out].
template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
  require_rank(w.shape(), 2, "linear weight");
  const std::size_t in = w.shape()[0], out_dim = w.shape()[1];
  require_shape(b.shape(), {out_dim}, "linear bias");
  if (x.shape().empty() || x.shape().back() != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  const std::size_t rows = x.size() / in;
  Shape os = x.shape();
  os.back() = out_dim;
  Tensor<Real> y(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(b.value().data(), b.value().data() + out_dim, y.data() + r * out_dim);
  kernels::gemm_nn(rows, in, out_dim, x.value().data(), w.value().data(), y.data());
  return make_result(std::move(y), {&x, &w, &b}, [x, w, b, rows, in, out_dim](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x)) kernels::gemm_nt(rows, out_dim, in, g.data(), w.value().data(), dx);
    if (Real* dw = grad_if(w)) kernels::gemm_tn(in, rows, out_dim, x.value().data(), g.data(), dw);
    if (Real* db = grad_if(b))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[r * out_dim + j];
  });
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<Real> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result(std::move(y), {&a, &b}, [a, b](const Tensor<Real>& g) {
    if (Real* da = grad_if(a)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (Real* db = grad_if(b)) for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
  });
}

template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<Real> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_result(std::move(y), {&a, &b}, [a, b](const Tensor<Real>& g) {
    if (Real* da = grad_if(a)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (Real* db = grad_if(b)) for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
  });
}

template <typename Real>
Var<Real> scale(const Var<Real>& x, Real c) {
  Tensor<Real> y = x.value();
  for (auto& v : y.storage()) v *= c;
  return make_result(std::move(y), {&x}, [x, c](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
  });
}

/// x + p where p is repeated along the leading axes of x (bias rows,
/// positional embeddings).
template <typename Real>
Var<Real> add_tiled(const Var<Real>& x, const Var<Real>& p) {
  const std::size_t ps = p.size();
  const Shape& xs = x.shape();
  const Shape& pshape = p.shape();
  bool ok = ps > 0 && pshape.size() <= xs.size() &&
            std::equal(pshape.rbegin(), pshape.rend(), xs.rbegin());
  if (!ok)
    throw DimensionError("add_tiled: " + shape_str(pshape) + " does not tile " + shape_str(xs));
  Tensor<Real> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += p.value()[i % ps];
  return make_result(std::move(y), {&x, &p}, [x, p, ps](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    if (Real* dp = grad_if(p)) for (std::size_t i = 0; i < g.size(); ++i) dp[i % ps] += g[i];
  });
}

template <typename Real>
Var<Real> relu(const Var<Real>& x) {
  Tensor<Real> y = x.value();
  for (auto& v : y.storage()) v = v <= Real(0) ? Real(0) : v;  // NaN passes through
  return make_result(std::move(y), {&x}, [x](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.value()[i] > Real(0)) dx[i] += g[i];
  });
}

/// Inverted dropout. Outside training (or p == 0) this returns `x` itself.
template <typename Real>
Var<Real> dropout(const Var<Real>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  const Real keep_scale = Real(1.0 / (1.0 - p));
  std::vector<Real> mask(x.size());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : Real(0);
  Tensor<Real> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return make_result(std::move(y), {&x}, [x, mask = std::move(mask)](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
  });
}

namespace detail {
template <typename Real>
void im2col(const Real* x, std::size_t cin, std::size_t t_in, std::size_t k, std::size_t pad,
            std::size_t t_out, Real* cols) {
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t j = 0; j < k; ++j) {
      Real* row = cols + (c * k + j) * t_out;
      for (std::size_t t = 0; t < t_out; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
        row[t] = (src >= 0 && src < static_cast<std::ptrdiff_t>(t_in)) ? x[c * t_in + src] : Real(0);
      }
    }
}
}  // namespace detail

/// Cross-correlation over time. x: [B, Cin, T], w: [Cout, Cin, K], b: [Cout].
template <typename Real>
Var<Real> conv1d(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b, std::size_t padding) {
  require_rank(x.shape(), 3, "conv1d input");
  require_rank(w.shape(), 3, "conv1d weight");
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], t_in = x.shape()[2];
  const std::size_t cout = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != cin)
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  require_shape(b.shape(), {cout}, "conv1d bias");
  if (k > t_in + 2 * padding)
    throw DimensionError("conv1d: kernel width " + std::to_string(k) +
                         " exceeds padded input length " + std::to_string(t_in + 2 * padding));
  const std::size_t t_out = t_in + 2 * padding - k + 1;
  const std::size_t ck = cin * k;
  Tensor<Real> y({batch, cout, t_out});
  std::vector<Real> cols(ck * t_out);
  for (std::size_t n = 0; n < batch; ++n) {
    detail::im2col(x.value().data() + n * cin * t_in, cin, t_in, k, padding, t_out, cols.data());
    Real* yn = y.data() + n * cout * t_out;
    for (std::size_t o = 0; o < cout; ++o) std::fill(yn + o * t_out, yn + (o + 1) * t_out, b.value()[o]);
    kernels::gemm_nn(cout, ck, t_out, w.value().data(), cols.data(), yn);
  }
  return make_result(std::move(y), {&x, &w, &b},
                     [=](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    Real* dw = grad_if(w);
    Real* db = grad_if(b);
    std::vector<Real> col(ck * t_out), dcol(ck * t_out);
    for (std::size_t n = 0; n < batch; ++n) {
      const Real* gn = g.data() + n * cout * t_out;
      if (db)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t t = 0; t < t_out; ++t) db[o] += gn[o * t_out + t];
      if (dw) {
        detail::im2col(x.value().data() + n * cin * t_in, cin, t_in, k, padding, t_out, col.data());
        kernels::gemm_nt(cout, t_out, ck, gn, col.data(), dw);
      }
      if (dx) {
        std::fill(dcol.begin(), dcol.end(), Real(0));
        kernels::gemm_tn(ck, cout, t_out, w.value().data(), gn, dcol.data());
        Real* dxn = dx + n * cin * t_in;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t t = 0; t < t_out; ++t) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(padding);
              if (src >= 0 && src < static_cast<std::ptrdiff_t>(t_in))
                dxn[c * t_in + src] += dcol[(c * k + j) * t_out + t];
            }
      }
    }
  });
}

template <typename Real>
struct BatchNormStats {
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean({channels}, Real(0)), running_var({channels}, Real(1)) {}
};

/// Per-channel normalization of x: [B, C, T]. Training mode normalizes with
/// batch statistics over (B, T) and folds them into `stats` with momentum;
/// eval mode uses the running statistics.
template <typename Real>
Var<Real> batchnorm1d(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                      BatchNormStats<Real>& stats, bool training,
                      double momentum = kBatchNormMomentum, double eps = kNormEps) {
  require_rank(x.shape(), 3, "batchnorm1d input");
  const std::size_t batch = x.shape()[0], ch = x.shape()[1], len = x.shape()[2];
  require_shape(gamma.shape(), {ch}, "batchnorm1d gamma");
  require_shape(beta.shape(), {ch}, "batchnorm1d beta");
  require_shape(stats.running_mean.shape(), {ch}, "batchnorm1d running stats");
  const std::size_t count = batch * len;
  std::vector<Real> mean(ch), inv_std(ch);
  const Tensor<Real>& xv = x.value();
  for (std::size_t c = 0; c < ch; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t t = 0; t < len; ++t) s += xv[(n * ch + c) * len + t];
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t t = 0; t < len; ++t) {
          const double d = xv[(n * ch + c) * len + t] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<Real>(mu);
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      stats.running_mean[c] = static_cast<Real>((1.0 - momentum) * stats.running_mean[c] + momentum * mu);
      stats.running_var[c] = static_cast<Real>((1.0 - momentum) * stats.running_var[c] + momentum * unbiased);
    } else {
      mean[c] = stats.running_mean[c];
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + eps));
    }
  }
  Tensor<Real> xhat(x.shape());
  Tensor<Real> y(x.shape());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = (n * ch + c) * len + t;
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        y[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
      }
  return make_result(std::move(y), {&x, &gamma, &beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    Real* dg = grad_if(gamma);
    Real* dbeta = grad_if(beta);
    for (std::size_t c = 0; c < ch; ++c) {
      Real sum_g = 0, sum_gx = 0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = (n * ch + c) * len + t;
          sum_g += g[i];
          sum_gx += g[i] * xhat[i];
        }
      if (dg) dg[c] += sum_gx;
      if (dbeta) dbeta[c] += sum_g;
      if (!dx) continue;
      const Real gm = gamma.value()[c];
      const Real is = inv_std[c];
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = (n * ch + c) * len + t;
          if (training) {
            const Real cnt = static_cast<Real>(count);
            dx[i] += gm * is / cnt * (cnt * g[i] - sum_g - xhat[i] * sum_gx);
          } else {
            dx[i] += gm * is * g[i];
          }
        }
    }
  });
}

/// [B, M, N] -> [B, N, M]
template <typename Real>
Var<Real> transpose_last2(const Var<Real>& x) {
  require_rank(x.shape(), 3, "transpose_last2");
  const std::size_t batch = x.shape()[0], m = x.shape()[1], n = x.shape()[2];
  Tensor<Real> y({batch, n, m});
  for (std::size_t b = 0; b < batch; ++b)
    kernels::transpose(m, n, x.value().data() + b * m * n, y.data() + b * m * n);
  return make_result(std::move(y), {&x}, [x, batch, m, n](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    if (!dx) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) dx[b * m * n + j * n + i] += g[b * m * n + i * m + j];
  });
}

/// Normalizes over the last axis, then applies gamma/beta.
template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                     double eps = kNormEps) {
  if (x.shape().empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  require_shape(gamma.shape(), {d}, "layer_norm gamma");
  require_shape(beta.shape(), {d}, "layer_norm beta");
  const std::size_t rows = x.size() / d;
  Tensor<Real> xhat(x.shape()), y(x.shape());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.value().data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j];
    const double mu = s / static_cast<double>(d);
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += (xr[j] - mu) * (xr[j] - mu);
    const double is = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv_std[r] = static_cast<Real>(is);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = static_cast<Real>((xr[j] - mu) * is);
      y[r * d + j] = gamma.value()[j] * xhat[r * d + j] + beta.value()[j];
    }
  }
  return make_result(std::move(y), {&x, &gamma, &beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    Real* dg = grad_if(gamma);
    Real* db = grad_if(beta);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* gr = g.data() + r * d;
      const Real* hr = xhat.data() + r * d;
      if (dg) for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * hr[j];
      if (db) for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
      if (!dx) continue;
      Real sum_h = 0, sum_hx = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const Real dh = gr[j] * gamma.value()[j];
        sum_h += dh;
        sum_hx += dh * hr[j];
      }
      const Real dd = static_cast<Real>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const Real dh = gr[j] * gamma.value()[j];
        dx[r * d + j] += inv_std[r] / dd * (dd * dh - sum_h - hr[j] * sum_hx);
      }
    }
  });
}

namespace detail {
template <typename Real>
void softmax_row(const Real* in, Real* out, std::size_t n) {
  Real mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = in[j] > mx ? in[j] : mx;
  Real s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  const Real inv = Real(1) / s;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}
}  // namespace detail

/// Softmax over the last axis, max-subtracted.
template <typename Real>
Var<Real> softmax(const Var<Real>& x) {
  if (x.shape().empty()) throw DimensionError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<Real> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(x.value().data() + r * n, y.data() + r * n, n);
  Tensor<Real> yc = y;
  return make_result(std::move(y), {&x}, [x, n, rows, yc = std::move(yc)](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    if (!dx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = yc.data() + r * n;
      const Real* gr = g.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Multi-head scaled dot-product self-attention core. q, k, v: [B, T, d]
/// with head h owning columns [h*dh, (h+1)*dh). Returns the per-head context
/// (attention-weighted values) in the same layout, before any output
/// projection. When `probs_out` is given it receives A as [B, H, T, T].
template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, std::size_t heads,
                    Tensor<Real>* probs_out = nullptr) {
  require_rank(q.shape(), 3, "attention query");
  require_shape(k.shape(), q.shape(), "attention key");
  require_shape(v.shape(), q.shape(), "attention value");
  const std::size_t batch = q.shape()[0], len = q.shape()[1], d = q.shape()[2];
  if (heads == 0 || d % heads != 0)
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  Tensor<Real> probs({batch, heads, len, len});
  Tensor<Real> ctx({batch, len, d});
  std::vector<Real> scores(len);
  const Real* qv = q.value().data();
  const Real* kv = k.value().data();
  const Real* vv = v.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      Real* A = probs.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const Real* qi = qv + (b * len + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const Real* kj = kv + (b * len + j) * d + h * dh;
          Real s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * scale;
        }
        detail::softmax_row(scores.data(), A + i * len, len);
        Real* ci = ctx.data() + (b * len + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const Real a = A[i * len + j];
          const Real* vj = vv + (b * len + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ci[c] += a * vj[c];
        }
      }
    }
  if (probs_out) *probs_out = probs;
  return make_result(std::move(ctx), {&q, &k, &v},
                     [=, probs = std::move(probs)](const Tensor<Real>& g) {
    Real* dq = grad_if(q);
    Real* dk = grad_if(k);
    Real* dv = grad_if(v);
    const Real* qv = q.value().data();
    const Real* kv = k.value().data();
    const Real* vv = v.value().data();
    std::vector<Real> dA(len * len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const Real* A = probs.data() + (b * heads + h) * len * len;
        for (std::size_t i = 0; i < len; ++i) {
          const Real* gi = g.data() + (b * len + i) * d + h * dh;
          for (std::size_t j = 0; j < len; ++j) {
            const Real* vj = vv + (b * len + j) * d + h * dh;
            Real s = 0;
            for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
            dA[i * len + j] = s;
            if (dv) {
              Real* dvj = dv + (b * len + j) * d + h * dh;
              const Real a = A[i * len + j];
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += a * gi[c];
            }
          }
        }
        if (!dq && !dk) continue;
        for (std::size_t i = 0; i < len; ++i) {
          Real dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += A[i * len + j] * dA[i * len + j];
          const Real* qi = qv + (b * len + i) * d + h * dh;
          for (std::size_t j = 0; j < len; ++j) {
            const Real ds = A[i * len + j] * (dA[i * len + j] - dot) * scale;
            const Real* kj = kv + (b * len + j) * d + h * dh;
            if (dq) {
              Real* dqi = dq + (b * len + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
            }
            if (dk) {
              Real* dkj = dk + (b * len + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
  });
}

/// Elementwise overwrite: y[i] = mask[i] ? donor[i] : x[i]. Overwritten
/// entries carry no gradient back to x.
template <typename Real>
Var<Real> overwrite(const Var<Real>& x, const std::vector<std::uint8_t>& mask,
                    const Tensor<Real>& donor) {
  require_shape(donor.shape(), x.shape(), "overwrite donor");
  if (mask.size() != x.size()) throw DimensionError("overwrite: mask length mismatch");
  Tensor<Real> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i)
    if (mask[i]) y[i] = donor[i];
  return make_result(std::move(y), {&x}, [x, mask](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!mask[i]) dx[i] += g[i];
  });
}

/// Max over the time axis: [B, T, d] -> [B, d]. Ties route the gradient to
/// the earliest timestep.
template <typename Real>
Var<Real> max_pool_over_time(const Var<Real>& x) {
  require_rank(x.shape(), 3, "max_pool_over_time");
  const std::size_t batch = x.shape()[0], len = x.shape()[1], d = x.shape()[2];
  Tensor<Real> y({batch, d});
  std::vector<std::size_t> arg(batch * d, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < d; ++j) {
      Real best = x.value()[(b * len) * d + j];
      for (std::size_t t = 1; t < len; ++t) {
        const Real v = x.value()[(b * len + t) * d + j];
        if (v > best) {
          best = v;
          arg[b * d + j] = t;
        }
      }
      y[b * d + j] = best;
    }
  return make_result(std::move(y), {&x}, [x, arg = std::move(arg), len, d](const Tensor<Real>& g) {
    Real* dx = grad_if(x);
    if (!dx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) {
      const std::size_t b = i / d, j = i % d;
      dx[(b * len + arg[i]) * d + j] += g[i];
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label]. logits: [B, K].
template <typename Real>
Var<Real> cross_entropy(const Var<Real>& logits, const std::vector<int>& labels) {
  require_rank(logits.shape(), 2, "cross_entropy logits");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  for (std::size_t b = 0; b < batch; ++b)
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " at index " +
                              std::to_string(b) + " outside [0," + std::to_string(classes) + ")");
  Tensor<Real> probs(logits.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* z = logits.value().data() + b * classes;
    Real mx = z[0];
    for (std::size_t j = 1; j < classes; ++j) mx = z[j] > mx ? z[j] : mx;
    double s = 0.0;
    for (std::size_t j = 0; j < classes; ++j) s += std::exp(static_cast<double>(z[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(s);
    total += lse - static_cast<double>(z[labels[b]]);
    for (std::size_t j = 0; j < classes; ++j)
      probs[b * classes + j] = static_cast<Real>(std::exp(static_cast<double>(z[j]) - lse));
  }
  Tensor<Real> loss({1}, Real(total / static_cast<double>(batch)));
  return make_result(std::move(loss), {&logits},
                     [logits, labels, batch, classes, probs = std::move(probs)](const Tensor<Real>& g) {
    Real* dz = grad_if(logits);
    if (!dz) return;
    const Real s = g[0] / static_cast<Real>(batch);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < classes; ++j) {
        const Real onehot = static_cast<int>(j) == labels[b] ? Real(1) : Real(0);
        dz[b * classes + j] += s * (probs[b * classes + j] - onehot);
      }
  });
}

/// Sum of squares, returned as a 1-element tensor.
template <typename Real>
Var<Real> sum_squares(const Var<Real>& x) {
  Real s = 0;
  for (Real v : x.value().values()) s += v * v;
  return make_result(Tensor<Real>({1}, s), {&x}, [x](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x))
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] += Real(2) * x.value()[i] * g[0];
  });
}

/// Sum of absolute values (subgradient 0 at 0).
template <typename Real>
Var<Real> abs_sum(const Var<Real>& x) {
  Real s = 0;
  for (Real v : x.value().values()) s += std::abs(v);
  return make_result(Tensor<Real>({1}, s), {&x}, [x](const Tensor<Real>& g) {
    if (Real* dx = grad_if(x))
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Real v = x.value()[i];
        dx[i] += (v > 0 ? g[0] : (v < 0 ? -g[0] : Real(0)));
      }
  });
}

}  // namespace tsmi::ops
