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

// Toy acoustic encoder over precomputed 50 Hz feature frames, the two-layer
// strided convolution subsampler (4x, to 12.5 Hz), and SpecAugment-style
// zero masking of encoder states.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "llmfuse/nn.hpp"
#include "llmfuse/numcore.hpp"

namespace llmfuse {

struct EncoderConfig {
  std::size_t feat_dim = 16;
  std::size_t layers = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_frames = 512;
  std::size_t subsample_out_dim = 64;

  void validate() const {
    if (!feat_dim || !model_dim || !heads || !ffn_dim || !max_frames || !subsample_out_dim) {
      throw ArgumentError("encoder config values must be positive");
    }
    if (model_dim % heads) throw ArgumentError("encoder model_dim must be divisible by heads");
  }
};

inline constexpr std::size_t kMinFrames = 4;
inline constexpr std::size_t kSubsampleKernel = 3;
inline constexpr std::size_t kSubsampleStride = 2;
inline constexpr std::size_t kSubsamplePadding = 1;

// T frames x D features, nominal 50 Hz.
struct FeatureMatrix {
  Tensor<float> frames;

  std::size_t length() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }

  void validate() const {
    if (frames.rank() != 2) throw ArgumentError("feature matrix must be rank 2");
    if (frames.rows() < kMinFrames) {
      throw ArgumentError("feature matrix needs at least " + std::to_string(kMinFrames) + " frames, got " +
                          std::to_string(frames.rows()));
    }
    if (!frames.all_finite()) throw ArgumentError("feature matrix contains non-finite values");
  }
};

inline constexpr char kFeatureMagic[4] = {'G', 'F', 'A', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

// "GFAF", u32 version, u32 T, u32 D, T*D little-endian f32 row-major.
inline void write_features(const std::filesystem::path& file, const FeatureMatrix& f) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw DataError("cannot write features: " + file.string());
  os.write(kFeatureMagic, 4);
  detail::put_u32(os, kFeatureVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(f.length()));
  detail::put_u32(os, static_cast<std::uint32_t>(f.dim()));
  for (float v : f.frames.data()) detail::put_f32(os, v);
  if (!os) throw DataError("write failed: " + file.string());
}

inline FeatureMatrix read_features(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open features: " + file.string());
  const std::string where = file.string();
  detail::expect_magic(is, kFeatureMagic, where);
  std::uint32_t version, t, d;
  detail::get_u32(is, version, where);
  if (version != kFeatureVersion) throw ParseError(where, 0, "unsupported feature file version");
  detail::get_u32(is, t, where);
  detail::get_u32(is, d, where);
  if (t == 0 || d == 0) throw ParseError(where, 0, "empty feature matrix");
  std::vector<float> data(static_cast<std::size_t>(t) * d);
  for (auto& v : data) v = detail::get_f32(is, where);
  return FeatureMatrix{Tensor<float>({t, d}, std::move(data))};
}

inline std::size_t subsample_step_length(std::size_t length) {
  return conv1d_output_length(length, kSubsampleKernel, kSubsampleStride, kSubsamplePadding);
}

// Output length of the two-conv subsampler: f(f(T)) with f(T) = floor((T-1)/2) + 1.
inline std::size_t subsampled_length(std::size_t length) {
  if (length < kMinFrames) throw ArgumentError("subsampler needs at least 4 frames");
  return subsample_step_length(subsample_step_length(length));
}

struct SpecMaskConfig {
  std::size_t time_masks = 0;
  std::size_t time_width = 0;
  std::size_t feat_masks = 0;
  std::size_t feat_width = 0;
};

// 1 marks a masked coordinate of a [frames x dim] matrix. Each mask is a
// contiguous span of exactly the configured width at a uniform start.
inline std::vector<std::uint8_t> make_spec_mask(std::size_t frames, std::size_t dim, const SpecMaskConfig& cfg, Rng& rng) {
  if (cfg.time_masks && cfg.time_width > frames) throw ArgumentError("spec_mask: time width exceeds frame count");
  if (cfg.feat_masks && cfg.feat_width > dim) throw ArgumentError("spec_mask: feature width exceeds dimension");
  std::vector<std::uint8_t> mask(frames * dim, 0);
  for (std::size_t m = 0; m < cfg.time_masks; ++m) {
    if (cfg.time_width == 0) break;
    const std::size_t start = rng.uniform_int(frames - cfg.time_width + 1);
    for (std::size_t t = start; t < start + cfg.time_width; ++t)
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(t * dim), dim, std::uint8_t{1});
  }
  for (std::size_t m = 0; m < cfg.feat_masks; ++m) {
    if (cfg.feat_width == 0) break;
    const std::size_t start = rng.uniform_int(dim - cfg.feat_width + 1);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t c = start; c < start + cfg.feat_width; ++c) mask[t * dim + c] = 1;
  }
  return mask;
}

template <class T>
Tensor<T> spec_mask(const Tensor<T>& states, const SpecMaskConfig& cfg, std::uint64_t seed) {
  if (states.rank() != 2) throw ArgumentError("spec_mask: expected a matrix");
  Rng rng(seed);
  auto mask = make_spec_mask(states.rows(), states.cols(), cfg, rng);
  Tensor<T> out = states;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = T{0};
  return out;
}

template <class T>
void init_encoder_params(ParamStore<T>& params, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  nn::init_linear(params, "enc/in_proj", cfg.feat_dim, cfg.model_dim, rng);
  // Position p at 50 Hz shares the phase of decoder position p/4.
  nn::ensure_sinusoidal(params, "enc/pos", cfg.max_frames, cfg.model_dim, 0.0, 0.25);
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.layers, 1)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    nn::init_transformer_block(params, "enc/layer" + std::to_string(l), {cfg.model_dim, cfg.heads, cfg.ffn_dim}, rng,
                               residual_gain);
  }
}

template <class T>
void init_subsampler_params(ParamStore<T>& params, const EncoderConfig& cfg, Rng& rng) {
  const std::size_t d_in = cfg.model_dim, d_out = cfg.subsample_out_dim;
  nn::ensure_normal(params, "sub/conv1/w", {kSubsampleKernel, d_in, d_out}, rng,
                    1.0 / std::sqrt(static_cast<double>(kSubsampleKernel * d_in)));
  nn::ensure_constant(params, "sub/conv1/b", {d_out}, T{0});
  nn::ensure_normal(params, "sub/conv2/w", {kSubsampleKernel, d_out, d_out}, rng,
                    1.0 / std::sqrt(static_cast<double>(kSubsampleKernel * d_out)));
  nn::ensure_constant(params, "sub/conv2/b", {d_out}, T{0});
}

// Input projection plus position embedding, then bidirectional transformer
// layers. In train mode with a mask config, the output states are
// SpecAugment-masked using `rng`.
template <class T>
Var<T> encode(Tape<T>& tape, ParamStore<T>& params, const EncoderConfig& cfg, const Tensor<T>& features, bool train_mode,
              const SpecMaskConfig* mask = nullptr, Rng* rng = nullptr) {
  if (features.rank() != 2 || features.cols() != cfg.feat_dim) {
    throw ArgumentError("encode: features " + shape_string(features.shape()) + " do not match feat_dim " +
                        std::to_string(cfg.feat_dim));
  }
  const std::size_t frames = features.rows();
  if (frames < kMinFrames) throw ArgumentError("encode: fewer than 4 frames");
  if (frames > cfg.max_frames) throw ArgumentError("encode: more than max_frames frames");
  auto h = linear(tape, params, "enc/in_proj", tape.constant(features));
  std::vector<std::size_t> pos(frames);
  for (std::size_t i = 0; i < frames; ++i) pos[i] = i;
  h = add(h, embedding(tape.param(params, "enc/pos"), std::span<const std::size_t>(pos)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = nn::transformer_block(tape, params, "enc/layer" + std::to_string(l), cfg.heads, /*causal=*/false, h);
  }
  if (train_mode && mask && rng) {
    auto m = make_spec_mask(frames, cfg.model_dim, *mask, *rng);
    h = mask_fill(h, std::span<const std::uint8_t>(m));
  }
  return h;
}

// conv(K=3, stride 2, pad 1) -> GELU -> conv(K=3, stride 2, pad 1).
template <class T>
Var<T> conv_subsample(Tape<T>& tape, ParamStore<T>& params, Var<T> states) {
  if (states.value().rows() < kMinFrames) throw ArgumentError("conv_subsample: fewer than 4 frames");
  auto h = add_row(conv1d(states, tape.param(params, "sub/conv1/w"), kSubsampleStride, kSubsamplePadding),
                   tape.param(params, "sub/conv1/b"));
  h = gelu(h);
  return add_row(conv1d(h, tape.param(params, "sub/conv2/w"), kSubsampleStride, kSubsamplePadding),
                 tape.param(params, "sub/conv2/b"));
}

}  // namespace llmfuse
