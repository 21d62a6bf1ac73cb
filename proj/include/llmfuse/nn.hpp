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

// Parameter initializers and the pre-norm transformer block shared by the
// language model and the speech encoder.

#pragma once

#include <cmath>
#include <string>

#include "llmfuse/numcore.hpp"

namespace llmfuse::nn {

// Adds `path` with N(0, stddev) entries unless it already exists.
template <class T>
void ensure_normal(ParamStore<T>& params, const std::string& path, Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  if (!params.contains(path)) params.add(path, std::move(t));
}

template <class T>
void ensure_constant(ParamStore<T>& params, const std::string& path, Shape shape, T value) {
  if (!params.contains(path)) params.add(path, Tensor<T>(std::move(shape), value));
}

template <class T>
void init_linear(ParamStore<T>& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 bool bias = true, double gain = 1.0) {
  ensure_normal(params, prefix + "/w", {in, out}, rng, gain / std::sqrt(static_cast<double>(in)));
  if (bias) ensure_constant(params, prefix + "/b", {out}, T{0});
}

template <class T>
void init_norm(ParamStore<T>& params, const std::string& prefix, std::size_t dim) {
  ensure_constant(params, prefix + "/g", {dim}, T{1});
  ensure_constant(params, prefix + "/b", {dim}, T{0});
}

// Sinusoidal table: row r encodes position (r - origin) * rate.
template <class T>
void ensure_sinusoidal(ParamStore<T>& params, const std::string& path, std::size_t rows, std::size_t dim,
                       double origin, double rate) {
  if (params.contains(path)) return;
  Tensor<T> t({rows, dim});
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = (static_cast<double>(r) - origin) * rate;
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      t(r, i) = static_cast<T>(i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
  }
  params.add(path, std::move(t));
}

struct BlockShape {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
};

template <class T>
void init_transformer_block(ParamStore<T>& params, const std::string& prefix, const BlockShape& shape, Rng& rng,
                            double residual_gain) {
  init_norm(params, prefix + "/ln1", shape.dim);
  init_linear(params, prefix + "/attn/wq", shape.dim, shape.dim, rng, false);
  init_linear(params, prefix + "/attn/wk", shape.dim, shape.dim, rng, false);
  init_linear(params, prefix + "/attn/wv", shape.dim, shape.dim, rng, false);
  init_linear(params, prefix + "/attn/wo", shape.dim, shape.dim, rng, false, residual_gain);
  init_norm(params, prefix + "/ln2", shape.dim);
  init_linear(params, prefix + "/ffn/w1", shape.dim, shape.ffn_dim, rng);
  init_linear(params, prefix + "/ffn/w2", shape.ffn_dim, shape.dim, rng, true, residual_gain);
}

// h + Attn(LN1(h)), then + FFN(LN2(.)) with a SiLU hidden layer.
template <class T>
Var<T> transformer_block(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, std::size_t heads,
                         bool causal, Var<T> h) {
  auto a = layer_norm(tape, params, prefix + "/ln1", h);
  auto q = linear(tape, params, prefix + "/attn/wq", a);
  auto k = linear(tape, params, prefix + "/attn/wk", a);
  auto v = linear(tape, params, prefix + "/attn/wv", a);
  auto att = linear(tape, params, prefix + "/attn/wo", attention(q, k, v, heads, causal));
  h = add(h, att);
  auto b = layer_norm(tape, params, prefix + "/ln2", h);
  auto f = linear(tape, params, prefix + "/ffn/w2", silu(linear(tape, params, prefix + "/ffn/w1", b)));
  return add(h, f);
}

}  // namespace llmfuse::nn
