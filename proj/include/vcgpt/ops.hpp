#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vcgpt/error.hpp"
#include "vcgpt/rng.hpp"
#include "vcgpt/tensor.hpp"

namespace vcgpt {

using TokenId = std::int32_t;

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b,
                    double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* __restrict a, const double* __restrict b,
                    double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T, via a transposed copy of B so the inner loop
// stays contiguous.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), c, m, k, n);
}

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void check_finite(const Tensor& out, const char* op) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op,
                         const char* name) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline double* grad_if_needed(const ImplPtr& impl) {
  return impl->requires_grad ? impl->grad_buffer() : nullptr;
}

inline void record(const Tensor& out, std::vector<ImplPtr> parents,
                   std::function<void()> fn) {
  out.impl()->requires_grad = true;
  active_tape()->record(out.impl(), std::move(parents), std::move(fn));
}

constexpr double kGeluCoeff = 0.044715;

}  // namespace detail

/// Matrix product of [m,k] and [k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul", "lhs");
  detail::require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, lhs " +
                         shape_str(a.shape()) + " vs rhs " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  detail::check_finite(out, "matmul");
  if (detail::tracking({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    detail::record(out, {ai, bi}, [ai, bi, oi, m, k, n] {
      const double* g = oi->grad.data();
      if (double* ga = detail::grad_if_needed(ai)) detail::gemm_nt(g, bi->data.data(), ga, m, n, k);
      if (double* gb = detail::grad_if_needed(bi)) detail::gemm_tn(ai->data.data(), g, gb, m, k, n);
    });
  }
  return out;
}

/// a [m,k] times the transpose of b [n,k]; used for projections onto an
/// embedding table stored as [vocab, d].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt", "lhs");
  detail::require_rank(b, 2, "matmul_nt", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, lhs " +
                         shape_str(a.shape()) + " vs rhs^T of " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  detail::check_finite(out, "matmul_nt");
  if (detail::tracking({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    detail::record(out, {ai, bi}, [ai, bi, oi, m, k, n] {
      const double* g = oi->grad.data();
      // dA = G·B, dB = Gᵀ·A
      if (double* ga = detail::grad_if_needed(ai)) detail::gemm_nn(g, bi->data.data(), ga, m, n, k);
      if (double* gb = detail::grad_if_needed(bi)) detail::gemm_tn(g, ai->data.data(), gb, m, n, k);
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose", "input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi, r, c] {
      double* gx = detail::grad_if_needed(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += oi->grad[j * r + i];
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "add");
  if (detail::tracking({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    detail::record(out, {ai, bi}, [ai, bi, oi] {
      const std::size_t n = oi->data.size();
      if (double* ga = detail::grad_if_needed(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i];
      if (double* gb = detail::grad_if_needed(bi))
        for (std::size_t i = 0; i < n; ++i) gb[i] += oi->grad[i];
    });
  }
  return out;
}

/// x[..., d] + bias[d], broadcast along the trailing axis only.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(bias, 1, "add_bias", "bias");
  const std::size_t d = bias.dim(0);
  if (x.shape().back() != d) {
    throw DimensionError("add_bias: trailing extent of " + shape_str(x.shape()) +
                         " does not match bias " + shape_str(bias.shape()));
  }
  Tensor out(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + bias[j];
  detail::check_finite(out, "add_bias");
  if (detail::tracking({&x, &bias})) {
    auto xi = x.impl(), bi = bias.impl(), oi = out.impl();
    detail::record(out, {xi, bi}, [xi, bi, oi, rows, d] {
      const double* g = oi->grad.data();
      if (double* gx = detail::grad_if_needed(xi))
        for (std::size_t i = 0; i < rows * d; ++i) gx[i] += g[i];
      if (double* gb = detail::grad_if_needed(bi))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    });
  }
  return out;
}

/// Elementwise product of equal-shape tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  detail::check_finite(out, "mul");
  if (detail::tracking({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    detail::record(out, {ai, bi}, [ai, bi, oi] {
      const std::size_t n = oi->data.size();
      if (double* ga = detail::grad_if_needed(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * bi->data[i];
      if (double* gb = detail::grad_if_needed(bi))
        for (std::size_t i = 0; i < n; ++i) gb[i] += oi->grad[i] * ai->data[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  detail::check_finite(out, "scale");
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi, factor] {
      if (double* gx = detail::grad_if_needed(xi))
        for (std::size_t i = 0; i < oi->data.size(); ++i) gx[i] += oi->grad[i] * factor;
    });
  }
  return out;
}

/// Sum of all elements as a [1] tensor.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  detail::check_finite(out, "sum");
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi] {
      if (double* gx = detail::grad_if_needed(xi))
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += oi->grad[0];
    });
  }
  return out;
}

/// GELU, tanh approximation (GPT-2 convention).
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + detail::kGeluCoeff * v * v * v)));
  }
  detail::check_finite(out, "gelu");
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi] {
      double* gx = detail::grad_if_needed(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        const double v = xi->data[i];
        const double u = c * (v + detail::kGeluCoeff * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * detail::kGeluCoeff * v * v);
        gx[i] += oi->grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    });
  }
  return out;
}

/// Normalizes each trailing-axis slice to zero mean / unit variance, then
/// applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_rank(gain, 1, "layer_norm", "gain");
  detail::require_rank(bias, 1, "layer_norm", "bias");
  const std::size_t d = x.shape().back();
  if (gain.dim(0) != d || bias.dim(0) != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  if (eps < 0.0) throw ContractError("layer_norm: eps must be nonnegative");
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    inv_std[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (detail::tracking({&x, &gain, &bias})) {
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    detail::record(out, {xi, gi, bi},
                   [xi, gi, bi, oi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      const double* g = oi->grad.data();
      double* gx = detail::grad_if_needed(xi);
      double* gg = detail::grad_if_needed(gi);
      double* gb = detail::grad_if_needed(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * d;
        const double* xh = xhat.data() + r * d;
        if (gg)
          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
        if (gb)
          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
        if (gx) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gr[j] * gi->data[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(d);
          mean_dxh_xh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gr[j] * gi->data[j];
            gx[r * d + j] += inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

/// Softmax along `axis`, with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  detail::check_finite(out, "softmax");
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi, outer, inner, n] {
      double* gx = detail::grad_if_needed(xi);
      if (!gx) return;
      const auto& y = oi->data;
      const auto& g = oi->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Row-wise log-softmax of a [T,V] buffer.
inline std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows,
                                            std::size_t cols) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[j] - lz;
  }
  return out;
}

}  // namespace detail

/// Mean of -log softmax(logits)[t, target_t] over positions whose target is
/// not `ignore_id`.
inline Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                            TokenId ignore_id) {
  detail::require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  std::size_t supervised = 0;
  for (TokenId t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    ++supervised;
  }
  if (supervised == 0) throw ContractError("cross_entropy: no supervised positions");
  std::vector<double> logp = detail::log_softmax_rows(logits.data(), rows, vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    total -= logp[r * vocab + static_cast<std::size_t>(targets[r])];
  }
  const double inv = 1.0 / static_cast<double>(supervised);
  Tensor out = Tensor::scalar(total * inv);
  detail::check_finite(out, "cross_entropy");
  if (detail::tracking({&logits})) {
    auto li = logits.impl(), oi = out.impl();
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    detail::record(out, {li}, [li, oi, logp = std::move(logp), tgt = std::move(tgt), rows,
                               vocab, ignore_id, inv] {
      double* gl = detail::grad_if_needed(li);
      if (!gl) return;
      const double g = oi->grad[0] * inv;
      for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_id) continue;
        for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * std::exp(logp[r * vocab + j]);
        gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
      }
    });
  }
  return out;
}

/// Per-position log softmax(logits)[t, target_t] as a [T] tensor.
inline Tensor token_log_probs(const Tensor& logits, std::span<const TokenId> targets) {
  detail::require_rank(logits, 2, "token_log_probs", "logits");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("token_log_probs: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  for (TokenId t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("token_log_probs: target " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  std::vector<double> logp = detail::log_softmax_rows(logits.data(), rows, vocab);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = logp[r * vocab + static_cast<std::size_t>(targets[r])];
  detail::check_finite(out, "token_log_probs");
  if (detail::tracking({&logits})) {
    auto li = logits.impl(), oi = out.impl();
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    detail::record(out, {li}, [li, oi, logp = std::move(logp), tgt = std::move(tgt), rows, vocab] {
      double* gl = detail::grad_if_needed(li);
      if (!gl) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const double g = oi->grad[r];
        for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] -= g * std::exp(logp[r * vocab + j]);
        gl[r * vocab + static_cast<std::size_t>(tgt[r])] += g;
      }
    });
  }
  return out;
}

/// Gathers rows of `table` [V,d] for the given ids -> [T,d].
inline Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  detail::require_rank(table, 2, "embedding", "table");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  Tensor out(Shape{ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[t]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d,
                out.data().data() + t * d);
  }
  if (detail::tracking({&table})) {
    auto ti = table.impl(), oi = out.impl();
    std::vector<TokenId> idv(ids.begin(), ids.end());
    detail::record(out, {ti}, [ti, oi, idv = std::move(idv), d] {
      double* gt = detail::grad_if_needed(ti);
      if (!gt) return;
      for (std::size_t t = 0; t < idv.size(); ++t) {
        double* row = gt + static_cast<std::size_t>(idv[t]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += oi->grad[t * d + j];
      }
    });
  }
  return out;
}

/// Rows [begin, begin+count) of a [N,d] tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_rows", "input");
  if (count == 0 || begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t d = x.dim(1);
  Tensor out(Shape{count, d});
  std::copy_n(x.data().data() + begin * d, count * d, out.data().data());
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi, begin, d] {
      double* gx = detail::grad_if_needed(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < oi->data.size(); ++i) gx[begin * d + i] += oi->grad[i];
    });
  }
  return out;
}

/// Inverted dropout. Identity when p == 0 or rng is null (evaluation).
inline Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng->uniform() < p ? 0.0 : keep;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * mask[i];
  if (detail::tracking({&x})) {
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {xi}, [xi, oi, mask = std::move(mask)] {
      if (double* gx = detail::grad_if_needed(xi))
        for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += oi->grad[i] * mask[i];
    });
  }
  return out;
}

/// Scaled dot-product attention over `heads` column groups.
/// q: [T,d], k and v: [S,d]. With `causal`, query t sees keys 0..t only
/// (requires T == S). When `probs_out` is given it receives the attention
/// weights laid out [head][t][s].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        bool causal, std::vector<double>* probs_out = nullptr) {
  detail::require_rank(q, 2, "attention", "query");
  detail::require_rank(k, 2, "attention", "key");
  detail::require_rank(v, 2, "attention", "value");
  const std::size_t tq = q.dim(0), ts = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.shape() != k.shape()) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + ", key " +
                         shape_str(k.shape()) + ", value " + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (causal && tq != ts) throw DimensionError("attention: causal mask needs square scores");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(heads * tq * ts, 0.0);
  Tensor out(Shape{tq, d});
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < tq; ++t) {
      double* p = probs.data() + (h * tq + t) * ts;
      const std::size_t visible = causal ? t + 1 : ts;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < visible; ++s) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dh; ++j) dot += qd[t * d + off + j] * kd[s * d + off + j];
        p[s] = dot * sc;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s < visible; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::size_t s = 0; s < visible; ++s) p[s] /= z;
      double* o = out.data().data() + t * d + off;
      for (std::size_t s = 0; s < visible; ++s) {
        const double w = p[s];
        const double* vr = vd + s * d + off;
        for (std::size_t j = 0; j < dh; ++j) o[j] += w * vr[j];
      }
    }
  }
  detail::check_finite(out, "attention");
  if (probs_out) *probs_out = probs;
  if (detail::tracking({&q, &k, &v})) {
    auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
    detail::record(out, {qi, ki, vi},
                   [qi, ki, vi, oi, probs = std::move(probs), heads, tq, ts, d, dh, sc, causal] {
      double* gq = detail::grad_if_needed(qi);
      double* gk = detail::grad_if_needed(ki);
      double* gv = detail::grad_if_needed(vi);
      const double* go = oi->grad.data();
      const double* qd = qi->data.data();
      const double* kd = ki->data.data();
      const double* vd = vi->data.data();
      std::vector<double> dp(ts);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t t = 0; t < tq; ++t) {
          const double* p = probs.data() + (h * tq + t) * ts;
          const std::size_t visible = causal ? t + 1 : ts;
          const double* gor = go + t * d + off;
          double dot = 0.0;
          for (std::size_t s = 0; s < visible; ++s) {
            const double* vr = vd + s * d + off;
            double acc = 0.0;
            for (std::size_t j = 0; j < dh; ++j) acc += gor[j] * vr[j];
            dp[s] = acc;
            dot += acc * p[s];
            if (gv) {
              double* gvr = gv + s * d + off;
              for (std::size_t j = 0; j < dh; ++j) gvr[j] += p[s] * gor[j];
            }
          }
          for (std::size_t s = 0; s < visible; ++s) {
            const double ds = p[s] * (dp[s] - dot) * sc;
            if (ds == 0.0) continue;
            if (gq) {
              double* gqr = gq + t * d + off;
              const double* kr = kd + s * d + off;
              for (std::size_t j = 0; j < dh; ++j) gqr[j] += ds * kr[j];
            }
            if (gk) {
              double* gkr = gk + s * d + off;
              const double* qr = qd + t * d + off;
              for (std::size_t j = 0; j < dh; ++j) gkr[j] += ds * qr[j];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace vcgpt
