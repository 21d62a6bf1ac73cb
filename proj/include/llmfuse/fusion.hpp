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

// Gated cross-attention fusion of acoustic states into the frozen LM.
//
// Each gated block computes
//     Y  = tanh(w1) * MHA(K, V, Q) + Q
//     Y' = tanh(w2) * FFN(Y) + Y
// with scalar gates w1, w2 initialized to zero, so a fresh fused model is
// exactly the LM. MHA and FFN run in a bottleneck width smaller than the LM
// width; each normalizes its input first. A block sits immediately before
// its host LM layer, only in the top `fused_layers` layers, and only the
// rows from <sos> onwards pass through it (prompt rows bypass it).

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "llmfuse/nn.hpp"
#include "llmfuse/numcore.hpp"
#include "llmfuse/speech_encoder.hpp"
#include "llmfuse/toklm.hpp"

namespace llmfuse {

struct FusionConfig {
  std::size_t fused_layers = 2;
  std::size_t bottleneck_dim = 16;
  std::size_t heads = 1;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  DecoderConfig lm;
  EncoderConfig enc;
  FusionConfig fusion;

  void validate() const {
    lm.validate();
    enc.validate();
    if (vocab_size <= special::kCount) throw ArgumentError("vocab_size must exceed the special token count");
    if (fusion.fused_layers > lm.layers) throw ArgumentError("fused_layers exceeds LM layers");
    if (fusion.bottleneck_dim == 0 || fusion.bottleneck_dim >= lm.model_dim) {
      throw ArgumentError("bottleneck_dim must be positive and below the LM width");
    }
    if (fusion.heads == 0 || fusion.bottleneck_dim % fusion.heads) throw ArgumentError("bottleneck_dim must be divisible by fusion heads");
    if (enc.subsample_out_dim != lm.model_dim) throw ArgumentError("subsampler output width must equal the LM width");
  }

  bool is_fused(std::size_t layer) const { return layer + fusion.fused_layers >= lm.layers; }
};

inline std::string gated_block_prefix(std::size_t host_layer) { return "fusion/block" + std::to_string(host_layer); }

template <class T>
void init_gated_block(ParamStore<T>& params, const std::string& prefix, std::size_t dim, std::size_t bottleneck, Rng& rng) {
  nn::ensure_constant(params, prefix + "/w1", {1}, T{0});
  nn::ensure_constant(params, prefix + "/w2", {1}, T{0});
  nn::init_norm(params, prefix + "/attn/ln", dim);
  nn::init_linear(params, prefix + "/attn/wq", dim, bottleneck, rng, false);
  nn::init_linear(params, prefix + "/attn/wk", dim, bottleneck, rng, false);
  nn::init_linear(params, prefix + "/attn/wv", dim, bottleneck, rng, false);
  nn::init_linear(params, prefix + "/attn/wo", bottleneck, dim, rng, false);
  nn::init_norm(params, prefix + "/ffn/ln", dim);
  nn::init_linear(params, prefix + "/ffn/w1", dim, bottleneck, rng);
  nn::init_linear(params, prefix + "/ffn/w2", bottleneck, dim, rng);
}

// Adds every missing parameter of the full model. Existing entries (e.g. a
// pretrained LM) are kept; random draws do not depend on which exist.
template <class T>
void init_model_params(ParamStore<T>& params, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng lm_rng = Rng(seed).fork(1), enc_rng = Rng(seed).fork(2), sub_rng = Rng(seed).fork(3), fus_rng = Rng(seed).fork(4);
  init_lm_params(params, cfg.lm, cfg.vocab_size, lm_rng);
  init_encoder_params(params, cfg.enc, enc_rng);
  init_subsampler_params(params, cfg.enc, sub_rng);
  for (std::size_t l = 0; l < cfg.lm.layers; ++l) {
    if (cfg.is_fused(l)) init_gated_block(params, gated_block_prefix(l), cfg.lm.model_dim, cfg.fusion.bottleneck_dim, fus_rng);
  }
}

template <class T>
Var<T> gated_xatt_ffn(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, std::size_t heads, Var<T> query,
                      Var<T> keys, Var<T> values) {
  const auto& q = query.value();
  if (q.rank() != 2 || keys.value().rank() != 2 || keys.shape() != values.shape() || keys.value().cols() != q.cols()) {
    throw ArgumentError("gated_xatt_ffn: shape mismatch between queries " + shape_string(query.shape()) + ", keys " +
                        shape_string(keys.shape()) + " and values " + shape_string(values.shape()));
  }
  auto a = layer_norm(tape, params, prefix + "/attn/ln", query);
  auto mha = attention(linear(tape, params, prefix + "/attn/wq", a), linear(tape, params, prefix + "/attn/wk", keys),
                       linear(tape, params, prefix + "/attn/wv", values), heads, /*causal=*/false);
  mha = linear(tape, params, prefix + "/attn/wo", mha);
  auto y = add(mul_scalar(mha, tanh(tape.param(params, prefix + "/w1"))), query);
  auto b = layer_norm(tape, params, prefix + "/ffn/ln", y);
  auto ffn = linear(tape, params, prefix + "/ffn/w2", silu(linear(tape, params, prefix + "/ffn/w1", b)));
  return add(mul_scalar(ffn, tanh(tape.param(params, prefix + "/w2"))), y);
}

// Called with (host layer, hidden states right after the gated block).
template <class T>
using GateObserver = std::function<void(std::size_t, const Tensor<T>&)>;

// Logits [L x V] of the fused decoder for one input and its acoustic
// states [T' x D].
template <class T>
Var<T> fused_logits(Tape<T>& tape, ParamStore<T>& params, const ModelConfig& cfg, const DecoderInput& in, Var<T> acoustic,
                    const GateObserver<T>& observer = {}) {
  if (in.separator >= in.ids.size() || in.ids[in.separator] != special::kSos) {
    throw ContractError("fused decoder input has no <sos> separator at the prompt boundary");
  }
  const std::size_t len = in.ids.size(), s = in.separator;
  auto h = lm_embed(tape, params, in);
  for (std::size_t l = 0; l < cfg.lm.layers; ++l) {
    if (cfg.is_fused(l)) {
      const std::string prefix = gated_block_prefix(l);
      if (s == 0) {
        h = gated_xatt_ffn(tape, params, prefix, cfg.fusion.heads, h, acoustic, acoustic);
      } else {
        auto tail = gated_xatt_ffn(tape, params, prefix, cfg.fusion.heads, slice_rows(h, s, len), acoustic, acoustic);
        h = concat_rows(slice_rows(h, 0, s), tail);
      }
      if (observer) observer(l, h.value());
    }
    h = lm_layer(tape, params, cfg.lm, l, h);
  }
  return lm_output(tape, params, h);
}

// Acoustic keys/values for the decoder: encoder then subsampler.
template <class T>
Var<T> acoustic_states(Tape<T>& tape, ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& features,
                       bool train_mode = false, const SpecMaskConfig* mask = nullptr, Rng* rng = nullptr) {
  return conv_subsample(tape, params, encode(tape, params, cfg.enc, features, train_mode, mask, rng));
}

template <class T>
Tensor<T> compute_acoustic(ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& features) {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  return acoustic_states(tape, params, cfg, features).value();
}

// Log-probabilities [L x V] for every position of [prompt][<sos>][prefix].
template <class T>
Tensor<T> fused_forward(const TokenSeq& prompt, const TokenSeq& prefix, const Tensor<T>& acoustic, ParamStore<T>& params,
                        const ModelConfig& cfg) {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  auto in = make_decoder_input(prompt, prefix, cfg.lm);
  return log_softmax(fused_logits(tape, params, cfg, in, tape.constant(acoustic))).value();
}

struct GateEntry {
  std::size_t layer = 0;
  double abs_tanh_w1 = 0.0;
  double abs_tanh_w2 = 0.0;
};

// One entry per gated block, bottom layer first.
template <class T>
std::vector<GateEntry> gate_report(const ParamStore<T>& params) {
  std::map<std::size_t, GateEntry> by_layer;
  const std::string head = "fusion/block";
  for (const auto& [path, t] : params) {
    if (path.rfind(head, 0) != 0) continue;
    const auto slash = path.find('/', head.size());
    if (slash == std::string::npos) continue;
    const std::string leaf = path.substr(slash + 1);
    if (leaf != "w1" && leaf != "w2") continue;
    const std::size_t layer = std::stoul(path.substr(head.size(), slash - head.size()));
    auto& e = by_layer[layer];
    e.layer = layer;
    (leaf == "w1" ? e.abs_tanh_w1 : e.abs_tanh_w2) = std::abs(std::tanh(static_cast<double>(t[0])));
  }
  std::vector<GateEntry> out;
  for (const auto& [_, e] : by_layer) out.push_back(e);
  return out;
}

inline std::string format_gate_report(const std::vector<GateEntry>& entries) {
  std::string out;
  char buf[96];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\n", e.layer, e.abs_tanh_w1, e.abs_tanh_w2);
    out += buf;
  }
  return out;
}

}  // namespace llmfuse
