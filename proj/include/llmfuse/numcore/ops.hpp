/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Differentiable operations over Tape variables. Every op computes its
// forward value eagerly and records a closure that maps the output gradient
// to input gradients. Matrices are rank-2 row-major [rows x cols].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/tape.hpp"
#include "llmfuse/numcore/tensor.hpp"

namespace llmfuse {

namespace kernels {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using In = Eigen::Map<const RowMajor<T>>;
template <class T>
using Out = Eigen::Map<RowMajor<T>>;

// Shapes that Eigen runs through its packed matrix-matrix kernel.
inline bool use_blocked(std::size_t rows, std::size_t depth, std::size_t cols) {
  return rows > 1 && cols > 1 && depth > 0 && rows + depth + cols >= 20;
}

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  if (use_blocked(m, k, n)) {
    Out<T>(C, m, n).noalias() += In<T>(A, m, k) * In<T>(B, k, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t m, std::size_t n, std::size_t k) {
  if (use_blocked(m, n, k)) {
    Out<T>(C, m, k).noalias() += In<T>(A, m, n) * In<T>(B, k, n).transpose();
    return;
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < k; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < n; ++c) s += A[i * n + c] * B[r * n + c];
      C[i * k + r] += s;
    }
}

// C[k x n] += A[m x k]^T * G[m x n]
template <class T>
void gemm_tn(const T* A, const T* G, T* C, std::size_t m, std::size_t k, std::size_t n) {
  if (use_blocked(k, m, n)) {
    Out<T>(C, k, n).noalias() += In<T>(A, m, k).transpose() * In<T>(G, m, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const T* g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * g[j];
    }
  }
}

}  // namespace kernels

namespace detail {

template <class T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw ArgumentError("variable is not attached to a tape");
  return *a.tape;
}

template <class T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || !a.tape) throw ArgumentError("variables belong to different tapes");
  return *a.tape;
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ArgumentError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k) {
    throw ArgumentError("matmul: shape mismatch " + shape_string(A.shape()) + " * " + shape_string(B.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_nn(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(), [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(a.id))
      kernels::gemm_nt(g.data(), t.value(b.id).data().data(), t.grad(a.id).data(), m, n, k);
    if (t.requires_grad(b.id))
      kernels::gemm_tn(t.value(a.id).data().data(), g.data(), t.grad(b.id).data(), m, k, n);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  if (a.shape() != b.shape()) {
    throw ArgumentError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out = a.value();
  out.drop_grad();
  detail::accumulate(out.data(), b.value().data());
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(a.id)) detail::accumulate<T>(t.grad(a.id), g);
    if (t.requires_grad(b.id)) detail::accumulate<T>(t.grad(b.id), g);
  });
}

// x[m x n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_row(Var<T> x, Var<T> bias) {
  auto& tape = detail::tape_of(x, bias);
  const auto& X = x.value();
  const std::size_t n = X.cols(), m = X.size() / n;
  if (bias.value().size() != n) {
    throw ArgumentError("add_row: bias " + shape_string(bias.shape()) + " does not match " + shape_string(X.shape()));
  }
  Tensor<T> out(X.shape());
  const auto& B = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + B[j];
  return tape.push(std::move(out), x.requires_grad() || bias.requires_grad(), [x, bias, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(x.id)) detail::accumulate<T>(t.grad(x.id), g);
    if (t.requires_grad(bias.id)) {
      auto gb = t.grad(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  if (a.shape() != b.shape()) {
    throw ArgumentError("mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  const auto& A = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return tape.push(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto ga = t.grad(a.id);
      const auto& B = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(b.id)) {
      auto gb = t.grad(b.id);
      const auto& A = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

// x * s for a one-element tensor s.
template <class T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  auto& tape = detail::tape_of(x, s);
  if (s.value().size() != 1) throw ArgumentError("mul_scalar: scale must have one element");
  const T sv = s.value()[0];
  Tensor<T> out(x.shape());
  const auto& X = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * X[i];
  return tape.push(std::move(out), x.requires_grad() || s.requires_grad(), [x, s](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.requires_grad(x.id)) {
      const T sv = t.value(s.id)[0];
      auto gx = t.grad(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
    }
    if (t.requires_grad(s.id)) {
      const auto& X = t.value(x.id);
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * X[i];
      t.grad(s.id)[0] += acc;
    }
  });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  auto& tape = detail::tape_of(x);
  Tensor<T> out(x.shape());
  const auto& X = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * X[i];
  return tape.push(std::move(out), x.requires_grad(), [x, c](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

namespace detail {

// Pointwise op; `deriv(x, y)` returns dy/dx given input and output.
template <class T, class F, class D>
Var<T> unary(Var<T> x, F f, D deriv) {
  auto& tape = tape_of(x);
  const auto& X = x.value();
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  return tape.push(std::move(out), x.requires_grad(), [x, deriv](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const auto& X = t.value(x.id);
    const auto& Y = t.value(self);
    auto gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(X[i], Y[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary(x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v, T) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      });
}

// Tanh approximation of GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T{1} + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T th = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T{1} + th) + T(0.5) * v * (T{1} - th * th) * c * (T{1} + T{3} * a * v * v);
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  auto& tape = detail::tape_of(x);
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return tape.push(Tensor<T>::scalar(acc), x.requires_grad(), [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(x.id)) v += g;
  });
}

// Softmax along an arbitrary axis.
template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  auto& tape = detail::tape_of(x);
  Tensor<T> out = softmax(x.value(), axis);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  return tape.push(std::move(out), x.requires_grad(), [x, outer, inner, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const auto& Y = t.value(self);
    auto gx = t.grad(x.id);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * Y[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = base + i * inner;
          gx[k] += Y[k] * (g[k] - dot);
        }
      }
    }
  });
}

// Row-wise log-softmax over the last axis.
template <class T>
Var<T> log_softmax(Var<T> x) {
  auto& tape = detail::tape_of(x);
  const auto& X = x.value();
  const std::size_t n = X.cols(), m = X.size() / n;
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < m; ++r) {
    auto row = log_softmax<T>(X.data().subspan(r * n, n));
    std::copy(row.begin(), row.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return tape.push(std::move(out), x.requires_grad(), [x, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const auto& Y = t.value(self);
    auto gx = t.grad(x.id);
    for (std::size_t r = 0; r < m; ++r) {
      T gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(Y[r * n + j]) * gs;
    }
  });
}

// Row-wise layer normalization with gain and bias over the last axis.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  auto& tape = detail::tape_of(x, gain);
  const auto& X = x.value();
  const std::size_t n = X.cols(), m = X.size() / n;
  if (gain.value().size() != n || bias.value().size() != n) throw ArgumentError("layer_norm: gain/bias size mismatch");
  auto xhat = std::make_shared<std::vector<T>>(X.size());
  auto rstd = std::make_shared<std::vector<T>>(m);
  Tensor<T> out(X.shape());
  const auto& G = gain.value();
  const auto& B = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += X[r * n + j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = X[r * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (X[r * n + j] - mean) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * G[j] + B[j];
    }
  }
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return tape.push(std::move(out), rg, [x, gain, bias, xhat, rstd, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const auto& G = t.value(gain.id);
    if (t.requires_grad(gain.id)) {
      auto gg = t.grad(gain.id);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
    }
    if (t.requires_grad(bias.id)) {
      auto gb = t.grad(bias.id);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
    if (t.requires_grad(x.id)) {
      auto gx = t.grad(x.id);
      for (std::size_t r = 0; r < m; ++r) {
        T mean_d = 0, mean_dh = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * G[j];
          mean_d += d;
          mean_dh += d * (*xhat)[r * n + j];
        }
        mean_d /= T(n);
        mean_dh /= T(n);
        for (std::size_t j = 0; j < n; ++j) {
          const T d = g[r * n + j] * G[j];
          gx[r * n + j] += (*rstd)[r] * (d - mean_d - (*xhat)[r * n + j] * mean_dh);
        }
      }
    }
  });
}

// Rows of `table` selected by ids -> [ids.size() x cols].
template <class T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> ids) {
  auto& tape = detail::tape_of(table);
  const auto& W = table.value();
  detail::require_rank2(W, "embedding");
  const std::size_t d = W.cols();
  if (ids.empty()) throw ArgumentError("embedding: empty id list");
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= W.rows()) throw ArgumentError("embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(W.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return tape.push(std::move(out), table.requires_grad(), [table, idv, d](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gw = t.grad(table.id);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gw[idv[i] * d + j] += g[i * d + j];
  });
}

// Rows [begin, end) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  auto& tape = detail::tape_of(x);
  const auto& X = x.value();
  detail::require_rank2(X, "slice_rows");
  if (begin >= end || end > X.rows()) {
    throw ArgumentError("slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ")");
  }
  const std::size_t n = X.cols();
  std::vector<T> data(X.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                      X.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return tape.push(Tensor<T>({end - begin, n}, std::move(data)), x.requires_grad(), [x, begin, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

// Stacks two matrices with equal column counts.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank2(A, "concat_rows");
  detail::require_rank2(B, "concat_rows");
  if (A.cols() != B.cols()) throw ArgumentError("concat_rows: column mismatch");
  std::vector<T> data(A.data().begin(), A.data().end());
  data.insert(data.end(), B.data().begin(), B.data().end());
  const std::size_t na = A.size();
  return tape.push(Tensor<T>({A.rows() + B.rows(), A.cols()}, std::move(data)), a.requires_grad() || b.requires_grad(),
                   [a, b, na](Tape<T>& t, std::size_t self) {
                     auto g = t.grad(self);
                     if (t.requires_grad(a.id)) detail::accumulate<T>(t.grad(a.id), g.subspan(0, na));
                     if (t.requires_grad(b.id)) detail::accumulate<T>(t.grad(b.id), g.subspan(na));
                   });
}

inline std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ArgumentError("conv1d: kernel and stride must be positive");
  if (length + 2 * padding < kernel) {
    throw ArgumentError("conv1d: input length " + std::to_string(length) + " too short for kernel " +
                        std::to_string(kernel));
  }
  return (length + 2 * padding - kernel) / stride + 1;
}

// x[T x Din] convolved with kernel[K x Din x Dout]; zero padding at both ends.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> kernel, std::size_t stride, std::size_t padding) {
  auto& tape = detail::tape_of(x, kernel);
  const auto& X = x.value();
  const auto& W = kernel.value();
  detail::require_rank2(X, "conv1d");
  if (W.rank() != 3 || W.dim(1) != X.cols()) {
    throw ArgumentError("conv1d: kernel " + shape_string(W.shape()) + " incompatible with input " + shape_string(X.shape()));
  }
  const std::size_t len = X.rows(), din = X.cols(), k = W.dim(0), dout = W.dim(2);
  const std::size_t out_len = conv1d_output_length(len, k, stride, padding);
  Tensor<T> out({out_len, dout});
  // Input rows seen by one tap, zero where the tap falls in the padding.
  auto gather = [=](const Tensor<T>& X, std::size_t tap) {
    std::vector<T> rows(out_len * din, T{0});
    for (std::size_t o = 0; o < out_len; ++o) {
      const auto r = static_cast<std::ptrdiff_t>(o * stride + tap) - static_cast<std::ptrdiff_t>(padding);
      if (r < 0 || r >= static_cast<std::ptrdiff_t>(len)) continue;
      std::copy_n(X.data().data() + r * din, din, rows.data() + o * din);
    }
    return rows;
  };
  for (std::size_t tap = 0; tap < k; ++tap) {
    kernels::gemm_nn(gather(X, tap).data(), W.data().data() + tap * din * dout, out.data().data(), out_len, din, dout);
  }
  return tape.push(std::move(out), x.requires_grad() || kernel.requires_grad(),
                   [x, kernel, len, din, k, dout, out_len, stride, padding, gather](Tape<T>& t, std::size_t self) {
                     auto g = t.grad(self);
                     const auto& X = t.value(x.id);
                     const auto& W = t.value(kernel.id);
                     for (std::size_t tap = 0; tap < k; ++tap) {
                       if (t.requires_grad(kernel.id)) {
                         kernels::gemm_tn(gather(X, tap).data(), g.data(), t.grad(kernel.id).data() + tap * din * dout, out_len, din,
                                          dout);
                       }
                       if (!t.requires_grad(x.id)) continue;
                       std::vector<T> gx(out_len * din, T{0});
                       kernels::gemm_nt(g.data(), W.data().data() + tap * din * dout, gx.data(), out_len, dout, din);
                       auto dst = t.grad(x.id);
                       for (std::size_t o = 0; o < out_len; ++o) {
                         const auto r = static_cast<std::ptrdiff_t>(o * stride + tap) - static_cast<std::ptrdiff_t>(padding);
                         if (r < 0 || r >= static_cast<std::ptrdiff_t>(len)) continue;
                         for (std::size_t c = 0; c < din; ++c) dst[r * din + c] += gx[o * din + c];
                       }
                     }
                   });
}

// Scaled dot-product attention with `heads` heads over the column blocks of
// q[Lq x D], k[Lk x D], v[Lk x D]. With `causal`, query i sees keys
// j <= i + (Lk - Lq).
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, bool causal) {
  auto& tape = detail::tape_of(q, k);
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  detail::require_rank2(Q, "attention");
  const std::size_t lq = Q.rows(), lk = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != lk) throw ArgumentError("attention: q/k/v shape mismatch");
  if (heads == 0 || d % heads != 0) throw ArgumentError("attention: width not divisible by heads");
  if (causal && lk < lq) throw ArgumentError("attention: causal mask needs lk >= lq");
  const std::size_t dh = d / heads;
  const T sc = T{1} / std::sqrt(T(dh));
  const std::size_t offset = lk - lq;
  auto probs = std::make_shared<std::vector<T>>(heads * lq * lk, T{0});
  Tensor<T> out({lq, d});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      const std::size_t visible = causal ? std::min(lk, i + offset + 1) : lk;
      T* p = probs->data() + (h * lq + i) * lk;
      T mx = -INFINITY;
      for (std::size_t j = 0; j < visible; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + c0 + c] * K[j * d + c0 + c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < visible; ++j) p[j] /= z;
      T* o = out.data().data() + i * d + c0;
      for (std::size_t j = 0; j < visible; ++j) {
        const T pj = p[j];
        for (std::size_t c = 0; c < dh; ++c) o[c] += pj * V[j * d + c0 + c];
      }
    }
  }
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return tape.push(std::move(out), rg, [q, k, v, probs, heads, lq, lk, d, dh, sc, causal, offset](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    const auto& Q = t.value(q.id);
    const auto& K = t.value(k.id);
    const auto& V = t.value(v.id);
    T* gq = t.requires_grad(q.id) ? t.grad(q.id).data() : nullptr;
    T* gk = t.requires_grad(k.id) ? t.grad(k.id).data() : nullptr;
    T* gv = t.requires_grad(v.id) ? t.grad(v.id).data() : nullptr;
    std::vector<T> dp(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t visible = causal ? std::min(lk, i + offset + 1) : lk;
        const T* p = probs->data() + (h * lq + i) * lk;
        const T* go = g.data() + i * d + c0;
        T dot = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += go[c] * V[j * d + c0 + c];
          dp[j] = s;
          dot += s * p[j];
          if (gv) {
            for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * go[c];
          }
        }
        for (std::size_t j = 0; j < visible; ++j) {
          const T ds = p[j] * (dp[j] - dot) * sc;
          if (gq) {
            for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds * K[j * d + c0 + c];
          }
          if (gk) {
            for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds * Q[i * d + c0 + c];
          }
        }
      }
    }
  });
}

// Sum of -log softmax(logits[t])[targets[t]] over positions with ignore[t]
// false, divided by `denominator` (the unmasked count when 0).
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets, std::span<const bool> ignore,
                     T denominator = T{0}) {
  auto& tape = detail::tape_of(logits);
  const auto& X = logits.value();
  detail::require_rank2(X, "cross_entropy");
  const std::size_t len = X.rows(), n = X.cols();
  if (targets.size() != len || ignore.size() != len) {
    throw ArgumentError("cross_entropy: targets/mask length must equal logits rows");
  }
  std::size_t count = 0;
  for (bool b : ignore) count += b ? 0 : 1;
  if (count == 0) throw ArgumentError("cross_entropy: every position is masked");
  const T denom = denominator > T{0} ? denominator : T(count);
  auto probs = std::make_shared<std::vector<T>>(len * n, T{0});
  T total = 0;
  for (std::size_t r = 0; r < len; ++r) {
    if (ignore[r]) continue;
    if (targets[r] >= n) throw ArgumentError("cross_entropy: target out of range");
    auto lp = log_softmax<T>(X.data().subspan(r * n, n));
    total -= lp[targets[r]];
    for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] = std::exp(lp[j]);
  }
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  std::vector<bool> iv(ignore.begin(), ignore.end());
  return tape.push(Tensor<T>::scalar(total / denom), logits.requires_grad(),
                   [logits, probs, tv, iv, len, n, denom](Tape<T>& t, std::size_t self) {
                     const T g = t.grad(self)[0] / denom;
                     auto gx = t.grad(logits.id);
                     for (std::size_t r = 0; r < len; ++r) {
                       if (iv[r]) continue;
                       for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g * (*probs)[r * n + j];
                       gx[r * n + tv[r]] -= g;
                     }
                   });
}

// Zeroes coordinates where mask[i] != 0; gradient is blocked there.
template <class T>
Var<T> mask_fill(Var<T> x, std::span<const std::uint8_t> mask) {
  auto& tape = detail::tape_of(x);
  if (mask.size() != x.value().size()) throw ArgumentError("mask_fill: mask size mismatch");
  Tensor<T> out = x.value();
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = T{0};
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return tape.push(std::move(out), x.requires_grad(), [x, mv](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mv[i]) gx[i] += g[i];
  });
}

// Affine map x W (+ b) with parameters looked up in `params` under `prefix`.
template <class T>
Var<T> linear(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x) {
  auto y = matmul(x, tape.param(params, prefix + "/w"));
  if (params.contains(prefix + "/b")) y = add_row(y, tape.param(params, prefix + "/b"));
  return y;
}

template <class T>
Var<T> layer_norm(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x) {
  return layer_norm(x, tape.param(params, prefix + "/g"), tape.param(params, prefix + "/b"));
}

}  // namespace llmfuse
