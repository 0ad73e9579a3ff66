#pragma once

// Differentiable operations on Graph. Sequence data uses a channel-major
// [C, S, L] layout (S samples of length L) so a convolution over the whole
// batch is a single GEMM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "sourcenet/nn/graph.hpp"
#include "sourcenet/rng.hpp"

namespace sourcenet::nn {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  detail::require(va.shape == vb.shape, "add: shape mismatch " + shape_str(va.shape) + " vs " +
                                            shape_str(vb.shape));
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
  return g.op(std::move(out), {a, b}, [&g, a, b](const Tensor<T>& go) {
    if (g.needs_grad(a)) detail::accumulate(g.grad(a), go);
    if (g.needs_grad(b)) detail::accumulate(g.grad(b), go);
  });
}

template <class T>
Var relu(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return g.op(std::move(out), {x}, [&g, x](const Tensor<T>& go) {
    const auto& vx = g.value(x);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      if (vx.data[i] > T(0)) gx.data[i] += go.data[i];
  });
}

template <class T>
Var tanh(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (T& v : out.data) v = std::tanh(v);
  const int self = static_cast<int>(g.size());
  return g.op(std::move(out), {x}, [&g, x, self](const Tensor<T>& go) {
    const auto& y = g.value(Var{self});
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      gx.data[i] += go.data[i] * (T(1) - y.data[i] * y.data[i]);
  });
}

/// Exact (erf) GELU.
template <class T>
Var gelu(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  const T r2 = T(1) / std::sqrt(T(2));
  for (T& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * r2));
  return g.op(std::move(out), {x}, [&g, x, r2](const Tensor<T>& go) {
    const auto& vx = g.value(x);
    auto& gx = g.grad(x);
    const T c = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      const T v = vx.data[i];
      const T d = T(0.5) * (T(1) + std::erf(v * r2)) + v * c * std::exp(T(-0.5) * v * v);
      gx.data[i] += go.data[i] * d;
    }
  });
}

/// Inverted dropout; identity when p == 0 or outside training.
template <class T>
Var dropout(Graph<T>& g, Var x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  Tensor<T> out = g.value(x);
  auto keep = std::make_shared<std::vector<T>>(out.data.size());
  const T scale = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    (*keep)[i] = uniform01(*rng) >= p ? scale : T(0);
    out.data[i] *= (*keep)[i];
  }
  return g.op(std::move(out), {x}, [&g, x, keep](const Tensor<T>& go) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i] * (*keep)[i];
  });
}

// ---------------------------------------------------------------------------
// Dense

/// x [R, in] * W[out, in]^T + b[out] -> [R, out]. `b` may be invalid.
template <class T>
Var linear(Graph<T>& g, Var x, Var W, Var b = {}) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(W);
  detail::require(vx.shape.size() == 2 && vw.shape.size() == 2 && vx.dim(1) == vw.dim(1),
                  "linear: x " + shape_str(vx.shape) + " W " + shape_str(vw.shape));
  const std::int64_t R = vx.dim(0), in = vx.dim(1), out_dim = vw.dim(0);
  Tensor<T> out({R, out_dim});
  auto Y = mat(out, R, out_dim);
  Y.noalias() = mat(vx, R, in) * mat(vw, out_dim, in).transpose();
  if (b.valid()) {
    const auto& vb = g.value(b);
    detail::require(vb.size() == out_dim, "linear: bias size");
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vb.ptr(), out_dim);
  }
  Var bb = b.valid() ? b : W;
  return g.op(std::move(out), {x, W, bb}, [&g, x, W, b, R, in, out_dim](const Tensor<T>& go) {
    const auto G = mat(go, R, out_dim);
    if (g.needs_grad(W)) mat(g.grad(W), out_dim, in).noalias() += G.transpose() * mat(g.value(x), R, in);
    if (g.needs_grad(x)) mat(g.grad(x), R, in).noalias() += G * mat(g.value(W), out_dim, in);
    if (b.valid() && g.needs_grad(b)) {
      auto& gb = g.grad(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.ptr(), out_dim) += G.colwise().sum();
    }
  });
}

/// Row-wise layer normalization with gain and bias.
template <class T>
Var layernorm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& vx = g.value(x);
  const std::int64_t R = vx.dim(0), D = vx.dim(1);
  const auto& ga = g.value(gamma);
  const auto& be = g.value(beta);
  detail::require(ga.size() == D && be.size() == D, "layernorm: parameter size");
  Tensor<T> out({R, D});
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(R * D));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(R));
  for (std::int64_t r = 0; r < R; ++r) {
    const T* xr = vx.ptr() + r * D;
    T mean = 0;
    for (std::int64_t d = 0; d < D; ++d) mean += xr[d];
    mean /= T(D);
    T var = 0;
    for (std::int64_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= T(D);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::int64_t d = 0; d < D; ++d) {
      const T h = (xr[d] - mean) * rs;
      (*xhat)[r * D + d] = h;
      out.data[r * D + d] = h * ga.data[d] + be.data[d];
    }
  }
  return g.op(std::move(out), {x, gamma, beta}, [&g, x, gamma, beta, R, D, xhat, rstd](const Tensor<T>& go) {
    const auto& ga = g.value(gamma);
    if (g.needs_grad(gamma) || g.needs_grad(beta)) {
      auto& gg = g.grad(gamma);
      auto& gb = g.grad(beta);
      for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t d = 0; d < D; ++d) {
          gg.data[d] += go.data[r * D + d] * (*xhat)[r * D + d];
          gb.data[d] += go.data[r * D + d];
        }
    }
    if (!g.needs_grad(x)) return;
    auto& gx = g.grad(x);
    for (std::int64_t r = 0; r < R; ++r) {
      T s1 = 0, s2 = 0;
      for (std::int64_t d = 0; d < D; ++d) {
        const T gh = go.data[r * D + d] * ga.data[d];
        s1 += gh;
        s2 += gh * (*xhat)[r * D + d];
      }
      s1 /= T(D);
      s2 /= T(D);
      for (std::int64_t d = 0; d < D; ++d) {
        const T gh = go.data[r * D + d] * ga.data[d];
        gx.data[r * D + d] += (*rstd)[r] * (gh - s1 - (*xhat)[r * D + d] * s2);
      }
    }
  });
}

/// Columns of several [R, c_i] tensors side by side.
template <class T>
Var concat_cols(Graph<T>& g, const std::vector<Var>& xs) {
  const std::int64_t R = g.value(xs.at(0)).dim(0);
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (Var v : xs) {
    detail::require(g.value(v).dim(0) == R, "concat_cols: row mismatch");
    widths.push_back(g.value(v).dim(1));
    total += widths.back();
  }
  Tensor<T> out({R, total});
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    mat(out, R, total).middleCols(off, widths[k]) = mat(g.value(xs[k]), R, widths[k]);
    off += widths[k];
  }
  return g.op(std::move(out), xs, [&g, xs, widths, R, total](const Tensor<T>& go) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (g.needs_grad(xs[k]))
        mat(g.grad(xs[k]), R, widths[k]) += mat(go, R, total).middleCols(off, widths[k]);
      off += widths[k];
    }
  });
}

/// Rows gathered by index; -1 yields a zero row. out[r] = x[idx[r]].
template <class T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::int64_t> idx) {
  const auto& vx = g.value(x);
  const std::int64_t D = vx.size() / vx.dim(0);
  const auto R = static_cast<std::int64_t>(idx.size());
  Tensor<T> out({R, D});
  for (std::int64_t r = 0; r < R; ++r)
    if (idx[r] >= 0) {
      detail::require(idx[r] < vx.dim(0), "gather_rows: index out of range");
      std::copy_n(vx.ptr() + idx[r] * D, D, out.ptr() + r * D);
    }
  return g.op(std::move(out), {x}, [&g, x, idx = std::move(idx), D](const Tensor<T>& go) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < idx.size(); ++r)
      if (idx[r] >= 0)
        for (std::int64_t d = 0; d < D; ++d) gx.data[idx[r] * D + d] += go.data[r * D + d];
  });
}

/// x + m * delta, rowwise; rows with mask 0 pass through unchanged.
template <class T>
Var masked_residual(Graph<T>& g, Var x, Var delta, std::vector<std::uint8_t> mask) {
  const auto& vx = g.value(x);
  const auto& vd = g.value(delta);
  detail::require(vx.shape == vd.shape, "masked_residual: shape mismatch");
  const std::int64_t R = vx.dim(0), D = vx.dim(1);
  detail::require(static_cast<std::int64_t>(mask.size()) == R, "masked_residual: mask size");
  Tensor<T> out = vx;
  for (std::int64_t r = 0; r < R; ++r)
    if (mask[r])
      for (std::int64_t d = 0; d < D; ++d) out.data[r * D + d] += vd.data[r * D + d];
  return g.op(std::move(out), {x, delta}, [&g, x, delta, mask = std::move(mask), D](const Tensor<T>& go) {
    if (g.needs_grad(x)) detail::accumulate(g.grad(x), go);
    if (!g.needs_grad(delta)) return;
    auto& gd = g.grad(delta);
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r])
        for (std::int64_t d = 0; d < D; ++d) gd.data[r * D + d] += go.data[r * D + d];
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// Output positions t with 0 <= t*stride + k - pad < L.
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t k, std::int64_t L,
                                                         std::int64_t Lout, int stride, int pad) {
  const std::int64_t off = k - pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  std::int64_t hi = L - off <= 0 ? 0 : (L - off + stride - 1) / stride;
  lo = std::min(lo, Lout);
  hi = std::clamp(hi, lo, Lout);
  return {lo, hi};
}

// im2col of samples [s0, s0 + ns) into col [Cin*K, ns*Lout].
template <class T>
void im2col(const T* x, std::int64_t Cin, std::int64_t S, std::int64_t L, std::int64_t K,
            std::int64_t Lout, int stride, int pad, std::int64_t s0, std::int64_t ns, T* col) {
  const std::int64_t cols = ns * Lout;
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t k = 0; k < K; ++k) {
      T* dst = col + (ci * K + k) * cols;
      const auto [lo, hi] = valid_range(k, L, Lout, stride, pad);
      const std::int64_t off = k - pad;
      for (std::int64_t s = 0; s < ns; ++s) {
        const T* src = x + (ci * S + s0 + s) * L;
        T* d = dst + s * Lout;
        std::fill(d, d + lo, T(0));
        if (stride == 1) {
          if (hi > lo) std::copy(src + lo + off, src + hi + off, d + lo);
        } else {
          for (std::int64_t t = lo; t < hi; ++t) d[t] = src[t * stride + off];
        }
        std::fill(d + hi, d + Lout, T(0));
      }
    }
}

template <class T>
void col2im(const T* col, std::int64_t Cin, std::int64_t S, std::int64_t L, std::int64_t K,
            std::int64_t Lout, int stride, int pad, std::int64_t s0, std::int64_t ns, T* dx) {
  const std::int64_t cols = ns * Lout;
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t k = 0; k < K; ++k) {
      const T* src = col + (ci * K + k) * cols;
      const auto [lo, hi] = valid_range(k, L, Lout, stride, pad);
      const std::int64_t off = k - pad;
      for (std::int64_t s = 0; s < ns; ++s) {
        T* d = dx + (ci * S + s0 + s) * L;
        const T* c = src + s * Lout;
        for (std::int64_t t = lo; t < hi; ++t) d[t * stride + off] += c[t];
      }
    }
}

// Samples per im2col chunk so a chunk stays cache-resident.
inline std::int64_t conv_chunk(std::int64_t rows, std::int64_t Lout) {
  return std::max<std::int64_t>(1, (std::int64_t{1} << 16) / std::max<std::int64_t>(1, rows * Lout));
}

}  // namespace detail

/// x [Cin, S, L] (*) W [Cout, Cin, K] -> [Cout, S, Lout], no bias.
template <class T>
Var conv1d(Graph<T>& g, Var x, Var W, int stride, int pad) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(W);
  detail::require(vx.shape.size() == 3 && vw.shape.size() == 3 && vx.dim(0) == vw.dim(1),
                  "conv1d: x " + shape_str(vx.shape) + " W " + shape_str(vw.shape));
  const std::int64_t Cin = vx.dim(0), S = vx.dim(1), L = vx.dim(2);
  const std::int64_t Cout = vw.dim(0), K = vw.dim(2);
  const std::int64_t Lout = (L + 2 * pad - K) / stride + 1;
  detail::require(Lout > 0, "conv1d: sequence too short");
  const std::int64_t cols = S * Lout, rows = Cin * K;
  const std::int64_t chunk = detail::conv_chunk(rows, Lout);
  Tensor<T> out({Cout, S, Lout});
  {
    Buffer<T> col(static_cast<std::size_t>(rows * chunk * Lout));
    const auto Wm = mat(vw, Cout, rows);
    for (std::int64_t s0 = 0; s0 < S; s0 += chunk) {
      const std::int64_t ns = std::min(chunk, S - s0);
      detail::im2col(vx.ptr(), Cin, S, L, K, Lout, stride, pad, s0, ns, col.data());
      mat(out, Cout, cols).middleCols(s0 * Lout, ns * Lout).noalias() =
          Wm * CMatMap<T>(col.data(), rows, ns * Lout);
    }
  }
  return g.op(std::move(out), {x, W},
              [&g, x, W, Cin, S, L, Cout, K, Lout, cols, rows, chunk, stride, pad](const Tensor<T>& go) {
                const auto G = mat(go, Cout, cols);
                const auto Wm = mat(g.value(W), Cout, rows);
                const bool need_w = g.needs_grad(W), need_x = g.needs_grad(x);
                Buffer<T> col(static_cast<std::size_t>(rows * chunk * Lout));
                RowMat<T> gw = RowMat<T>::Zero(Cout, rows);
                for (std::int64_t s0 = 0; s0 < S; s0 += chunk) {
                  const std::int64_t ns = std::min(chunk, S - s0);
                  const auto Gc = G.middleCols(s0 * Lout, ns * Lout);
                  if (need_w) {
                    detail::im2col(g.value(x).ptr(), Cin, S, L, K, Lout, stride, pad, s0, ns, col.data());
                    gw.noalias() += Gc * CMatMap<T>(col.data(), rows, ns * Lout).transpose();
                  }
                  if (need_x) {
                    MatMap<T>(col.data(), rows, ns * Lout).noalias() = Wm.transpose() * Gc;
                    detail::col2im(col.data(), Cin, S, L, K, Lout, stride, pad, s0, ns, g.grad(x).ptr());
                  }
                }
                if (need_w) mat(g.grad(W), Cout, rows) += gw;
              });
}

/// Mean over the time axis: [C, S, L] -> [S, C].
template <class T>
Var mean_time(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  const std::int64_t C = vx.dim(0), S = vx.dim(1), L = vx.dim(2);
  Tensor<T> out({S, C});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t s = 0; s < S; ++s) {
      const T* p = vx.ptr() + (c * S + s) * L;
      T acc = 0;
      for (std::int64_t t = 0; t < L; ++t) acc += p[t];
      out.data[s * C + c] = acc / T(L);
    }
  return g.op(std::move(out), {x}, [&g, x, C, S, L](const Tensor<T>& go) {
    auto& gx = g.grad(x);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t s = 0; s < S; ++s) {
        const T v = go.data[s * C + c] / T(L);
        T* p = gx.ptr() + (c * S + s) * L;
        for (std::int64_t t = 0; t < L; ++t) p[t] += v;
      }
  });
}

// ---------------------------------------------------------------------------
// Set operations. Rows are laid out as B groups of N (padded) positions.

/// Scaled dot-product attention over each group with H heads; keys with
/// mask 0 get zero probability. Q, K, V: [B*N, D]. `probs_out`, if given,
/// receives the [B, H, N, N] probabilities.
template <class T>
Var attention(Graph<T>& g, Var Q, Var K, Var V, const std::vector<std::uint8_t>& mask,
              std::int64_t B, std::int64_t N, std::int64_t H,
              std::shared_ptr<Tensor<T>>* probs_out = nullptr) {
  const auto& vq = g.value(Q);
  const std::int64_t D = vq.dim(1);
  detail::require(vq.dim(0) == B * N && D % H == 0, "attention: bad shape");
  detail::require(g.value(K).shape == vq.shape && g.value(V).shape == vq.shape,
                  "attention: Q/K/V shapes differ");
  const std::int64_t dh = D / H;
  const T scale = T(1) / std::sqrt(T(dh));
  auto P = std::make_shared<Tensor<T>>(Shape{B, H, N, N});
  Tensor<T> out({B * N, D});
  using OStride = Eigen::OuterStride<>;
  using Blk = Eigen::Map<const RowMat<T>, 0, OStride>;
  using MBlk = Eigen::Map<RowMat<T>, 0, OStride>;
  for (std::int64_t b = 0; b < B; ++b) {
    std::int64_t any = 0;
    for (std::int64_t j = 0; j < N; ++j) any += mask[b * N + j];
    if (any == 0) throw AllMasked("attention: every station of an event is masked");
    for (std::int64_t h = 0; h < H; ++h) {
      Blk q(vq.ptr() + b * N * D + h * dh, N, dh, OStride(D));
      Blk k(g.value(K).ptr() + b * N * D + h * dh, N, dh, OStride(D));
      Blk v(g.value(V).ptr() + b * N * D + h * dh, N, dh, OStride(D));
      MatMap<T> p(P->ptr() + (b * H + h) * N * N, N, N);
      p.noalias() = (q * k.transpose()) * scale;
      for (std::int64_t i = 0; i < N; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < N; ++j)
          if (mask[b * N + j]) mx = std::max(mx, p(i, j));
        T sum = 0;
        for (std::int64_t j = 0; j < N; ++j) {
          p(i, j) = mask[b * N + j] ? std::exp(p(i, j) - mx) : T(0);
          sum += p(i, j);
        }
        for (std::int64_t j = 0; j < N; ++j) p(i, j) /= sum;
      }
      MBlk o(out.ptr() + b * N * D + h * dh, N, dh, OStride(D));
      o.noalias() = p * v;
    }
  }
  if (probs_out) *probs_out = P;
  return g.op(std::move(out), {Q, K, V}, [&g, Q, K, V, P, B, N, H, D, dh, scale](const Tensor<T>& go) {
    auto& gq = g.grad(Q);
    auto& gk = g.grad(K);
    auto& gv = g.grad(V);
    RowMat<T> dP(N, N), dS(N, N);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t off = b * N * D + h * dh;
        Blk q(g.value(Q).ptr() + off, N, dh, OStride(D));
        Blk k(g.value(K).ptr() + off, N, dh, OStride(D));
        Blk v(g.value(V).ptr() + off, N, dh, OStride(D));
        Blk dO(go.ptr() + off, N, dh, OStride(D));
        CMatMap<T> p(P->ptr() + (b * H + h) * N * N, N, N);
        MBlk(gv.ptr() + off, N, dh, OStride(D)).noalias() += p.transpose() * dO;
        dP.noalias() = dO * v.transpose();
        for (std::int64_t i = 0; i < N; ++i) {
          T dot = 0;
          for (std::int64_t j = 0; j < N; ++j) dot += dP(i, j) * p(i, j);
          for (std::int64_t j = 0; j < N; ++j) dS(i, j) = p(i, j) * (dP(i, j) - dot) * scale;
        }
        MBlk(gq.ptr() + off, N, dh, OStride(D)).noalias() += dS * k;
        MBlk(gk.ptr() + off, N, dh, OStride(D)).noalias() += dS.transpose() * q;
      }
  });
}

/// Softmax-weighted pooling of H [B*N, D] with scores s [B*N, 1] over the
/// unmasked rows of each group: z [B, D]. Weights go to `weights_out`.
template <class T>
Var softmax_pool(Graph<T>& g, Var Hs, Var s, const std::vector<std::uint8_t>& mask,
                 std::int64_t B, std::int64_t N, std::shared_ptr<Tensor<T>>* weights_out = nullptr) {
  const auto& vh = g.value(Hs);
  const auto& vs = g.value(s);
  const std::int64_t D = vh.dim(1);
  detail::require(vh.dim(0) == B * N && vs.size() == B * N, "softmax_pool: bad shape");
  auto A = std::make_shared<Tensor<T>>(Shape{B, N});
  Tensor<T> out({B, D});
  for (std::int64_t b = 0; b < B; ++b) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t i = 0; i < N; ++i)
      if (mask[b * N + i]) mx = std::max(mx, vs.data[b * N + i]);
    if (!std::isfinite(mx)) throw AllMasked("attention pooling: every station is masked");
    T sum = 0;
    for (std::int64_t i = 0; i < N; ++i) {
      const T a = mask[b * N + i] ? std::exp(vs.data[b * N + i] - mx) : T(0);
      A->data[b * N + i] = a;
      sum += a;
    }
    for (std::int64_t i = 0; i < N; ++i) {
      T& a = A->data[b * N + i];
      a /= sum;
      if (a == T(0)) continue;
      for (std::int64_t d = 0; d < D; ++d) out.data[b * D + d] += a * vh.data[(b * N + i) * D + d];
    }
  }
  if (weights_out) *weights_out = A;
  return g.op(std::move(out), {Hs, s}, [&g, Hs, s, A, B, N, D](const Tensor<T>& go) {
    const auto& vh = g.value(Hs);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* dz = go.ptr() + b * D;
      if (g.needs_grad(Hs)) {
        auto& gh = g.grad(Hs);
        for (std::int64_t i = 0; i < N; ++i) {
          const T a = A->data[b * N + i];
          if (a == T(0)) continue;
          for (std::int64_t d = 0; d < D; ++d) gh.data[(b * N + i) * D + d] += a * dz[d];
        }
      }
      if (!g.needs_grad(s)) continue;
      std::vector<T> da(static_cast<std::size_t>(N), T(0));
      T dot = 0;
      for (std::int64_t i = 0; i < N; ++i) {
        const T a = A->data[b * N + i];
        if (a == T(0)) continue;
        T acc = 0;
        for (std::int64_t d = 0; d < D; ++d) acc += vh.data[(b * N + i) * D + d] * dz[d];
        da[i] = acc;
        dot += a * acc;
      }
      auto& gs = g.grad(s);
      for (std::int64_t i = 0; i < N; ++i) {
        const T a = A->data[b * N + i];
        if (a != T(0)) gs.data[b * N + i] += a * (da[i] - dot);
      }
    }
  });
}

/// Mean over the unmasked rows of each group: [B*N, D] -> [B, D].
template <class T>
Var masked_mean(Graph<T>& g, Var Hs, const std::vector<std::uint8_t>& mask, std::int64_t B,
                std::int64_t N) {
  const auto& vh = g.value(Hs);
  const std::int64_t D = vh.dim(1);
  std::vector<T> inv(static_cast<std::size_t>(B));
  Tensor<T> out({B, D});
  for (std::int64_t b = 0; b < B; ++b) {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < N; ++i) n += mask[b * N + i];
    if (n == 0) throw AllMasked("mean pooling: every station is masked");
    inv[b] = T(1) / T(n);
    for (std::int64_t i = 0; i < N; ++i)
      if (mask[b * N + i])
        for (std::int64_t d = 0; d < D; ++d)
          out.data[b * D + d] += inv[b] * vh.data[(b * N + i) * D + d];
  }
  return g.op(std::move(out), {Hs}, [&g, Hs, mask, inv, B, N, D](const Tensor<T>& go) {
    auto& gh = g.grad(Hs);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < N; ++i)
        if (mask[b * N + i])
          for (std::int64_t d = 0; d < D; ++d)
            gh.data[(b * N + i) * D + d] += inv[b] * go.data[b * D + d];
  });
}

/// Output head: tanh on the 5 deviatoric entries, affine on Mw.
template <class T>
Var source_head(Graph<T>& g, Var raw, T mw_offset, T mw_scale) {
  const auto& vr = g.value(raw);
  detail::require(vr.shape.size() == 2 && vr.dim(1) == 6, "source_head: expects [B, 6]");
  const std::int64_t B = vr.dim(0);
  Tensor<T> out({B, 6});
  for (std::int64_t b = 0; b < B; ++b) {
    for (int k = 0; k < 5; ++k) out.data[b * 6 + k] = std::tanh(vr.data[b * 6 + k]);
    out.data[b * 6 + 5] = mw_offset + mw_scale * vr.data[b * 6 + 5];
  }
  const int self = static_cast<int>(g.size());
  return g.op(std::move(out), {raw}, [&g, raw, self, B, mw_scale](const Tensor<T>& go) {
    const auto& y = g.value(Var{self});
    auto& gr = g.grad(raw);
    for (std::int64_t b = 0; b < B; ++b) {
      for (int k = 0; k < 5; ++k) {
        const T t = y.data[b * 6 + k];
        gr.data[b * 6 + k] += go.data[b * 6 + k] * (T(1) - t * t);
      }
      gr.data[b * 6 + 5] += go.data[b * 6 + 5] * mw_scale;
    }
  });
}

/// Sum of squares of all entries (a scalar).
template <class T>
Var sum_squares(Graph<T>& g, Var x) {
  T acc = 0;
  for (T v : g.value(x).data) acc += v * v;
  return g.op(Tensor<T>({1}, acc), {x}, [&g, x](const Tensor<T>& go) {
    const auto& vx = g.value(x);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < vx.data.size(); ++i) gx.data[i] += T(2) * vx.data[i] * go.data[0];
  });
}

}  // namespace sourcenet::nn
