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

// Training: LM pretraining, then the three fusion phases
//   1  subsampler + gated blocks, no prompts
//   2  + encoder, no prompts
//   3  + optional top LM block, previous-utterance prompts
// with an inverse-sqrt schedule, AdamW and gradient accumulation.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "llmfuse/fusion.hpp"
#include "llmfuse/numcore.hpp"
#include "llmfuse/rerank.hpp"
#include "llmfuse/speech_encoder.hpp"
#include "llmfuse/synthdata.hpp"
#include "llmfuse/toklm.hpp"

namespace llmfuse {

// Linear warmup to `peak` at `warmup`, then peak * sqrt(warmup / step).
inline double lr_at(std::size_t step, double peak, std::size_t warmup) {
  if (step < 1 || warmup < 1 || !(peak > 0)) throw ArgumentError("lr_at: step, warmup and peak must be positive");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return step <= warmup ? peak * s / w : peak * std::sqrt(w / s);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay on matrices only (rank >= 2).
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Updates every non-frozen parameter from its accumulated gradient.
  void step(ParamStore<T>& params, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& [path, t] : params) {
      if (params.is_frozen(path) || !t.has_grad()) continue;
      auto& [m, v] = moments_[path];
      if (m.empty()) {
        m.assign(t.size(), 0.0);
        v.assign(t.size(), 0.0);
      }
      const auto g = t.grad();
      auto x = t.data();
      const double decay = t.rank() >= 2 ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        x[i] = static_cast<T>(static_cast<double>(x[i]) * (1.0 - decay) - lr * update);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  bool has_moments(const std::string& path) const { return moments_.count(path) != 0; }
  std::size_t moment_count() const { return moments_.size(); }

 private:
  AdamWConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Rescales non-frozen gradients to a global L2 norm of at most `max_norm`
// (no-op when max_norm <= 0). Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  double sq = 0;
  for (auto& [path, t] : params) {
    if (params.is_frozen(path) || !t.has_grad()) continue;
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [path, t] : params) {
      if (params.is_frozen(path) || !t.has_grad()) continue;
      for (T& g : t.grad()) g *= s;
    }
  }
  return norm;
}

struct PhaseSpec {
  int phase = 1;
  std::size_t steps = 0;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 0;  // 0: 10% of steps
  std::vector<std::string> trainable;
  double prompt_probability = 0.0;
  bool unfreeze_last_lm_layer = false;

  std::size_t warmup() const {
    return warmup_steps ? warmup_steps : std::max<std::size_t>(1, (steps + 5) / 10);
  }
};

// Trainable prefixes of a phase.
inline std::vector<std::string> phase_trainable(int phase, const DecoderConfig& lm, bool unfreeze_last_lm_layer) {
  std::vector<std::string> t{"sub", "fusion"};
  if (phase >= 2) t.push_back("enc");
  if (phase == 3 && unfreeze_last_lm_layer) t.push_back(lm_layer_prefix(lm.layers - 1));
  return t;
}

inline void validate_phase(const PhaseSpec& p, const DecoderConfig& lm) {
  if (p.phase < 1 || p.phase > 3) throw ArgumentError("phase must be 1, 2 or 3");
  if (!(p.peak_lr > 0)) throw ArgumentError("peak_lr must be positive");
  if (!(p.prompt_probability >= 0 && p.prompt_probability <= 1)) throw ArgumentError("prompt_probability must be in [0,1]");
  if (p.phase != 3 && p.prompt_probability != 0) throw ContractError("only phase 3 trains with prompts");
  if (p.phase != 3 && p.unfreeze_last_lm_layer) throw ContractError("only phase 3 may unfreeze the top LM layer");
  auto expect = phase_trainable(p.phase, lm, p.unfreeze_last_lm_layer);
  auto have = p.trainable;
  std::sort(expect.begin(), expect.end());
  std::sort(have.begin(), have.end());
  if (expect != have) throw ContractError("phase " + std::to_string(p.phase) + " trainable set does not match its freeze policy");
}

inline PhaseSpec make_phase(int phase, const DecoderConfig& lm, std::size_t steps, double peak_lr, bool unfreeze_last_lm_layer = false,
                            double prompt_probability = -1) {
  PhaseSpec p;
  p.phase = phase;
  p.steps = steps;
  p.peak_lr = peak_lr;
  p.unfreeze_last_lm_layer = phase == 3 && unfreeze_last_lm_layer;
  p.prompt_probability = phase == 3 ? (prompt_probability < 0 ? 0.8 : prompt_probability) : 0.0;
  p.trainable = phase_trainable(phase, lm, p.unfreeze_last_lm_layer);
  return p;
}

struct LmPretrainSpec {
  std::size_t steps = 1500;
  double peak_lr = 3e-3;
  std::size_t warmup_steps = 0;
  double description_probability = 0.3;  // prompt = the domain description
  double history_probability = 0.4;      // prompt = the previous utterance
};

struct TrainConfig {
  ModelConfig model;
  LmPretrainSpec lm;
  std::array<PhaseSpec, 3> phases;
  std::size_t accumulation = 8;
  std::size_t micro_batch = 1;
  AdamWConfig adamw;
  double clip_norm = 1.0;
  SpecMaskConfig specaug{1, 2, 1, 8};
  std::size_t beam = 4;

  TrainConfig() {
    model.vocab_size = special::kCount + 50;
    phases[0] = make_phase(1, model.lm, 8000, 5e-3);
    phases[1] = make_phase(2, model.lm, 16000, 3e-3);
    phases[2] = make_phase(3, model.lm, 10000, 1e-3);
  }
};

// key=value lines; '#' starts a comment. Unknown keys are errors.
inline void apply_config(TrainConfig& cfg, const std::string& text, const std::string& where = "<config>") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  bool unfreeze = cfg.phases[2].unfreeze_last_lm_layer;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where, lineno, "expected key=value");
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    auto num = [&] {
      double v;
      if (!detail::parse_double(val, v)) throw ParseError(where, lineno, "bad number for " + key);
      return v;
    };
    auto count = [&] {
      std::size_t v;
      if (!detail::parse_size(val, v)) throw ParseError(where, lineno, "bad count for " + key);
      return v;
    };
    auto flag = [&] {
      if (val == "true" || val == "1") return true;
      if (val == "false" || val == "0") return false;
      throw ParseError(where, lineno, "bad boolean for " + key);
    };
    auto& m = cfg.model;
    std::map<std::string, std::function<void()>> setters = {
        {"vocab_size", [&] { m.vocab_size = count(); }},
        {"lm.layers", [&] { m.lm.layers = count(); }},
        {"lm.model_dim", [&] { m.lm.model_dim = count(); }},
        {"lm.heads", [&] { m.lm.heads = count(); }},
        {"lm.ffn_dim", [&] { m.lm.ffn_dim = count(); }},
        {"lm.max_len", [&] { m.lm.max_len = count(); }},
        {"lm.prompt_capacity", [&] { m.lm.prompt_capacity = count(); }},
        {"enc.feat_dim", [&] { m.enc.feat_dim = count(); }},
        {"enc.layers", [&] { m.enc.layers = count(); }},
        {"enc.model_dim", [&] { m.enc.model_dim = count(); }},
        {"enc.heads", [&] { m.enc.heads = count(); }},
        {"enc.ffn_dim", [&] { m.enc.ffn_dim = count(); }},
        {"enc.max_frames", [&] { m.enc.max_frames = count(); }},
        {"enc.subsample_out_dim", [&] { m.enc.subsample_out_dim = count(); }},
        {"fusion.fused_layers", [&] { m.fusion.fused_layers = count(); }},
        {"fusion.bottleneck_dim", [&] { m.fusion.bottleneck_dim = count(); }},
        {"fusion.heads", [&] { m.fusion.heads = count(); }},
        {"lmpre.steps", [&] { cfg.lm.steps = count(); }},
        {"lmpre.peak_lr", [&] { cfg.lm.peak_lr = num(); }},
        {"lmpre.warmup_steps", [&] { cfg.lm.warmup_steps = count(); }},
        {"lmpre.description_probability", [&] { cfg.lm.description_probability = num(); }},
        {"lmpre.history_probability", [&] { cfg.lm.history_probability = num(); }},
        {"phase3.prompt_probability", [&] { cfg.phases[2].prompt_probability = num(); }},
        {"phase3.unfreeze_last_lm_layer", [&] { unfreeze = flag(); }},
        {"train.accumulation", [&] { cfg.accumulation = count(); }},
        {"train.micro_batch", [&] { cfg.micro_batch = count(); }},
        {"train.clip_norm", [&] { cfg.clip_norm = num(); }},
        {"adamw.beta1", [&] { cfg.adamw.beta1 = num(); }},
        {"adamw.beta2", [&] { cfg.adamw.beta2 = num(); }},
        {"adamw.eps", [&] { cfg.adamw.eps = num(); }},
        {"adamw.weight_decay", [&] { cfg.adamw.weight_decay = num(); }},
        {"specaug.time_masks", [&] { cfg.specaug.time_masks = count(); }},
        {"specaug.time_width", [&] { cfg.specaug.time_width = count(); }},
        {"specaug.feat_masks", [&] { cfg.specaug.feat_masks = count(); }},
        {"specaug.feat_width", [&] { cfg.specaug.feat_width = count(); }},
        {"decode.beam", [&] { cfg.beam = count(); }},
    };
    for (int ph = 1; ph <= 3; ++ph) {
      auto& p = cfg.phases[ph - 1];
      const std::string k = "phase" + std::to_string(ph) + ".";
      setters[k + "steps"] = [&] { p.steps = count(); };
      setters[k + "peak_lr"] = [&] { p.peak_lr = num(); };
      setters[k + "warmup_steps"] = [&] { p.warmup_steps = count(); };
    }
    auto it = setters.find(key);
    if (it == setters.end()) throw ParseError(where, lineno, "unknown key '" + key + "'");
    it->second();
  }
  cfg.phases[2].unfreeze_last_lm_layer = unfreeze;
  for (int ph = 1; ph <= 3; ++ph) cfg.phases[ph - 1].trainable = phase_trainable(ph, cfg.model.lm, cfg.phases[ph - 1].unfreeze_last_lm_layer);
  if (cfg.accumulation < 1 || cfg.micro_batch < 1) throw ArgumentError("accumulation and micro_batch must be >= 1");
  cfg.model.validate();
}

inline TrainConfig load_config(const std::filesystem::path& file) {
  TrainConfig cfg;
  apply_config(cfg, read_text_file(file), file.string());
  return cfg;
}

// Lookup of the previous utterance within a recording.
class RecordIndex {
 public:
  explicit RecordIndex(const std::vector<UtteranceRecord>& records) : records_(records) {
    for (std::size_t i = 0; i < records.size(); ++i) pos_[{records[i].recording_id, records[i].utterance_index}] = i;
  }

  const UtteranceRecord* previous(const UtteranceRecord& r) const {
    if (r.utterance_index == 0) return nullptr;
    auto it = pos_.find({r.recording_id, r.utterance_index - 1});
    return it == pos_.end() ? nullptr : &records_[it->second];
  }

 private:
  const std::vector<UtteranceRecord>& records_;
  std::map<std::pair<std::string, std::size_t>, std::size_t> pos_;
};

// With probability p (and a previous utterance): the previous ground-truth
// transcript, truncated to `capacity`; otherwise an empty prompt. One
// Bernoulli draw per call.
inline TokenSeq sample_prompt(const UtteranceRecord& record, const RecordIndex& index, double p, Rng& rng, const Vocab& vocab,
                              std::size_t capacity) {
  const bool take = rng.bernoulli(p);
  const auto* prev = index.previous(record);
  if (!take || !prev) return TokenSeq{{}, SeqRole::prompt};
  return truncate_prompt(tokenize(normalize_prompt(prev->transcript), vocab, SeqRole::prompt), capacity);
}

struct TrainExample {
  UtteranceRecord record;
  Tensor<float> features;
  std::vector<TokenId> tokens;
};

inline std::vector<TrainExample> load_examples(const std::vector<UtteranceRecord>& records, const Vocab& vocab) {
  std::vector<TrainExample> out;
  for (const auto& r : records) {
    if (r.feature_path == "-") throw DataError("utterance " + r.utterance_id() + " has no features");
    auto f = read_features(r.feature_path);
    f.validate();
    out.push_back({r, std::move(f.frames), tokenize(r.transcript, vocab).ids});
  }
  return out;
}

// Targets for [prompt][<sos>][tokens]: row separator + i predicts tokens[i],
// the last row predicts <eos>; prompt rows are ignored.
struct Targets {
  std::vector<std::size_t> ids;
  std::unique_ptr<bool[]> ignore;
  std::size_t scored = 0;

  std::span<const bool> ignore_span() const { return {ignore.get(), ids.size()}; }
};

inline Targets teacher_forcing_targets(const DecoderInput& in, const std::vector<TokenId>& tokens) {
  Targets t;
  const std::size_t len = in.ids.size();
  t.ids.assign(len, special::kPad);
  t.ignore = std::make_unique<bool[]>(len);
  for (std::size_t r = 0; r < len; ++r) {
    t.ignore[r] = r < in.separator;
    if (r >= in.separator) {
      const std::size_t i = r - in.separator;
      t.ids[r] = i < tokens.size() ? tokens[i] : special::kEos;
      ++t.scored;
    }
  }
  return t;
}

// Summed token cross-entropy of one fused example divided by `denominator`.
template <class T>
Var<T> fused_example_loss(Tape<T>& tape, ParamStore<T>& params, const ModelConfig& cfg, const Tensor<T>& features,
                          const TokenSeq& prompt, const std::vector<TokenId>& tokens, T denominator,
                          const SpecMaskConfig* mask = nullptr, Rng* rng = nullptr) {
  const auto in = make_decoder_input(prompt, TokenSeq{tokens, SeqRole::transcription}, cfg.lm);
  const auto targets = teacher_forcing_targets(in, tokens);
  auto acoustic = acoustic_states(tape, params, cfg, features, mask != nullptr, mask, rng);
  auto logits = fused_logits(tape, params, cfg, in, acoustic);
  return cross_entropy(logits, std::span<const std::size_t>(targets.ids), targets.ignore_span(), denominator);
}

template <class T>
Var<T> lm_example_loss(Tape<T>& tape, ParamStore<T>& params, const DecoderConfig& cfg, const TokenSeq& prompt,
                       const std::vector<TokenId>& tokens, T denominator) {
  const auto in = make_decoder_input(prompt, TokenSeq{tokens, SeqRole::transcription}, cfg);
  const auto targets = teacher_forcing_targets(in, tokens);
  return cross_entropy(lm_logits(tape, params, cfg, in), std::span<const std::size_t>(targets.ids), targets.ignore_span(),
                       denominator);
}

struct TrainLogEntry {
  std::size_t step = 0;
  int phase = 0;  // 0 is LM pretraining
  double lr = 0;
  double loss = 0;

  friend bool operator==(const TrainLogEntry&, const TrainLogEntry&) = default;
};

inline void write_log_header(std::ostream& os) { os << "step,phase,lr,loss\n"; }

inline void write_log_entry(std::ostream& os, const TrainLogEntry& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%d,%.9g,%.9g\n", e.step, e.phase, e.lr, e.loss);
  os << buf;
}

// Epoch-wise shuffled order over [0, n).
class Sampler {
 public:
  Sampler(std::size_t n, Rng rng) : n_(n), rng_(rng) {
    if (n == 0) throw ArgumentError("sampler: no training data");
  }

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i-- > 1;) std::swap(order_[i], order_[rng_.uniform_int(i + 1)]);
    pos_ = 0;
  }

  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct PhaseResult {
  std::vector<TrainLogEntry> log;
  std::size_t trainable_parameters = 0;
};

namespace detail {

// Throws if any parameter frozen at snapshot time has changed.
template <class T>
class FreezeGuard {
 public:
  explicit FreezeGuard(const ParamStore<T>& params) {
    for (const auto& [p, t] : params)
      if (params.is_frozen(p)) frozen_.emplace(p, std::vector<T>(t.data().begin(), t.data().end()));
  }

  void verify(const ParamStore<T>& params) const {
    for (const auto& [p, v] : frozen_) {
      const auto d = params.at(p).data();
      if (!std::equal(d.begin(), d.end(), v.begin(), v.end())) throw ContractError("frozen parameter modified: " + p);
    }
  }

 private:
  std::map<std::string, std::vector<T>> frozen_;
};

// One optimizer step: accumulation x micro_batch examples, loss normalized by
// the total number of scored tokens across all of them.
template <class T, class MakeLoss, class Scored>
double accumulate_step(ParamStore<T>& params, const std::vector<std::size_t>& picks, std::size_t micro_batch, MakeLoss make_loss,
                       Scored scored) {
  std::size_t total = 0;
  for (std::size_t i : picks) total += scored(i);
  const T denom = static_cast<T>(total);
  params.zero_grad();
  double loss = 0;
  for (std::size_t b = 0; b < picks.size(); b += micro_batch) {
    Tape<T> tape;
    std::optional<Var<T>> acc;
    for (std::size_t j = b; j < std::min(b + micro_batch, picks.size()); ++j) {
      auto l = make_loss(tape, picks[j], denom);
      acc = acc ? add(*acc, l) : l;
    }
    loss += static_cast<double>(acc->value()[0]);
    tape.backward(*acc);
  }
  return loss;
}

}  // namespace detail

struct PhaseHooks {
  std::function<void(const TrainLogEntry&)> on_step;
};

// Runs one fusion phase in place on `params`. Parameters outside the phase's
// trainable set are verified bit-identical afterwards.
template <class T>
PhaseResult train_phase(const PhaseSpec& spec, const TrainConfig& cfg, const std::vector<TrainExample>& data, ParamStore<T>& params,
                        const Vocab& vocab, std::uint64_t seed, std::ostream* log_csv = nullptr, const PhaseHooks& hooks = {}) {
  validate_phase(spec, cfg.model.lm);
  params.set_trainable(spec.trainable);
  PhaseResult result;
  result.trainable_parameters = params.parameter_count(true);
  if (spec.steps == 0) return result;
  detail::FreezeGuard<T> guard(params);

  std::vector<UtteranceRecord> records;
  for (const auto& ex : data) records.push_back(ex.record);
  const RecordIndex index(records);
  std::vector<Tensor<T>> features;
  if constexpr (!std::is_same_v<T, float>) {
    for (const auto& ex : data) features.push_back(ex.features.template cast<T>());
  }
  auto feats = [&](std::size_t i) -> const Tensor<T>& {
    if constexpr (std::is_same_v<T, float>) {
      return data[i].features;
    } else {
      return features[i];
    }
  };

  const Rng root(seed);
  Sampler sampler(data.size(), root.fork(100 + spec.phase));
  Rng prompt_rng = root.fork(200 + spec.phase), mask_rng = root.fork(300 + spec.phase);
  AdamW<T> opt(cfg.adamw);
  const std::size_t per_step = cfg.accumulation * cfg.micro_batch;
  const SpecMaskConfig* mask = (cfg.specaug.time_masks || cfg.specaug.feat_masks) ? &cfg.specaug : nullptr;

  for (std::size_t step = 1; step <= spec.steps; ++step) {
    const double lr = lr_at(step, spec.peak_lr, spec.warmup());
    std::vector<std::size_t> picks;
    std::vector<TokenSeq> prompts;
    for (std::size_t k = 0; k < per_step; ++k) {
      picks.push_back(sampler.next());
      prompts.push_back(sample_prompt(data[picks.back()].record, index, spec.prompt_probability, prompt_rng, vocab,
                                      cfg.model.lm.prompt_capacity));
    }
    std::size_t cursor = 0;
    auto make_loss = [&](Tape<T>& tape, std::size_t i, T denom) {
      const std::size_t k = cursor++;
      return fused_example_loss(tape, params, cfg.model, feats(i), prompts[k], data[i].tokens, denom, mask, &mask_rng);
    };
    auto scored = [&](std::size_t i) { return data[i].tokens.size() + 1; };
    const double loss = detail::accumulate_step<T>(params, picks, cfg.micro_batch, make_loss, scored);
    clip_grad_norm(params, cfg.clip_norm);
    opt.step(params, lr);
    TrainLogEntry e{step, spec.phase, lr, loss};
    result.log.push_back(e);
    if (log_csv) write_log_entry(*log_csv, e);
    if (hooks.on_step) hooks.on_step(e);
  }
  params.drop_grad();
  guard.verify(params);
  return result;
}

struct LmExample {
  std::vector<TokenId> tokens;
  std::vector<TokenId> previous;     // empty for the first utterance
  std::vector<TokenId> description;  // the domain prompt
};

inline std::vector<LmExample> make_lm_examples(const std::vector<UtteranceRecord>& records,
                                               const std::map<std::string, std::string>& domain_prompts, const Vocab& vocab,
                                               std::size_t capacity) {
  const RecordIndex index(records);
  std::vector<LmExample> out;
  for (const auto& r : records) {
    LmExample ex;
    ex.tokens = tokenize(r.transcript, vocab).ids;
    if (const auto* prev = index.previous(r)) ex.previous = truncate_prompt(tokenize(prev->transcript, vocab), capacity).ids;
    if (auto it = domain_prompts.find(r.domain); it != domain_prompts.end()) {
      ex.description = truncate_prompt(tokenize(normalize_prompt(it->second), vocab), capacity).ids;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// Pretrains every lm/ parameter on text. Each example is conditioned on its
// domain description, its previous utterance, or nothing.
template <class T>
PhaseResult pretrain_lm(const LmPretrainSpec& spec, const TrainConfig& cfg, const std::vector<LmExample>& data, ParamStore<T>& params,
                        std::uint64_t seed, std::ostream* log_csv = nullptr, const PhaseHooks& hooks = {}) {
  if (!(spec.peak_lr > 0)) throw ArgumentError("lm pretraining peak_lr must be positive");
  params.set_trainable({"lm"});
  PhaseResult result;
  result.trainable_parameters = params.parameter_count(true);
  if (spec.steps == 0) return result;
  detail::FreezeGuard<T> guard(params);
  const Rng root(seed);
  Sampler sampler(data.size(), root.fork(100));
  Rng prompt_rng = root.fork(200);
  AdamW<T> opt(cfg.adamw);
  const std::size_t warmup = spec.warmup_steps ? spec.warmup_steps : std::max<std::size_t>(1, (spec.steps + 5) / 10);
  const std::size_t per_step = cfg.accumulation * cfg.micro_batch;
  for (std::size_t step = 1; step <= spec.steps; ++step) {
    const double lr = lr_at(step, spec.peak_lr, warmup);
    std::vector<std::size_t> picks;
    std::vector<TokenSeq> prompts;
    for (std::size_t k = 0; k < per_step; ++k) {
      const auto& ex = data[picks.emplace_back(sampler.next())];
      const double u = prompt_rng.uniform();
      TokenSeq p{{}, SeqRole::prompt};
      if (u < spec.description_probability) {
        p.ids = ex.description;
      } else if (u < spec.description_probability + spec.history_probability) {
        p.ids = ex.previous;
      }
      prompts.push_back(std::move(p));
    }
    std::size_t cursor = 0;
    auto make_loss = [&](Tape<T>& tape, std::size_t i, T denom) {
      return lm_example_loss(tape, params, cfg.model.lm, prompts[cursor++], data[i].tokens, denom);
    };
    auto scored = [&](std::size_t i) { return data[i].tokens.size() + 1; };
    const double loss = detail::accumulate_step<T>(params, picks, cfg.micro_batch, make_loss, scored);
    clip_grad_norm(params, cfg.clip_norm);
    opt.step(params, lr);
    TrainLogEntry e{step, 0, lr, loss};
    result.log.push_back(e);
    if (log_csv) write_log_entry(*log_csv, e);
    if (hooks.on_step) hooks.on_step(e);
  }
  params.drop_grad();
  guard.verify(params);
  return result;
}

// Gradient check of the phase-3 loss (with the top LM block trainable) in
// double precision on a random example. Gates are set to random nonzero
// values so every gated-block parameter has a nonzero gradient.
inline GradCheckReport full_model_grad_check(const ModelConfig& base, std::uint64_t seed, std::size_t samples = 500,
                                             double epsilon = 1e-5) {
  ModelConfig cfg = base;
  if (cfg.vocab_size == 0) cfg.vocab_size = special::kCount + 16;
  ParamStore<double> params;
  init_model_params(params, cfg, seed);
  Rng rng = Rng(seed).fork(7);
  std::vector<std::string> gates;
  for (const auto& e : gate_report(params)) {
    for (const char* g : {"/w1", "/w2"}) {
      const std::string path = gated_block_prefix(e.layer) + g;
      params.at(path)[0] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.3, 1.0);
      gates.push_back(path);
    }
  }
  params.set_trainable(phase_trainable(3, cfg.lm, true));
  const std::size_t frames = 24;
  Tensor<double> features({frames, cfg.enc.feat_dim});
  for (auto& v : features.data()) v = rng.normal();
  auto draw = [&](std::size_t n) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(special::kCount + rng.uniform_int(cfg.vocab_size - special::kCount));
    return ids;
  };
  const TokenSeq prompt{draw(4), SeqRole::prompt};
  const auto tokens = draw(5);
  auto f = [&](Tape<double>& tape, ParamStore<double>& p) {
    return fused_example_loss(tape, p, cfg, features, prompt, tokens, 0.0);
  };
  GradCheckOptions opts;
  opts.samples = samples;
  opts.seed = seed;
  opts.always_include = gates;
  return grad_check(f, params, epsilon, opts);
}

}  // namespace llmfuse
