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

// Toy causal decoder LM: word vocabulary, tokenization, a pre-norm
// transformer stack, next-token log-probabilities and the sequence LM score
// sum_i log P(w_i | w_<i, prompt).
//
// Every decoder input has the layout  [prompt tokens] [<sos>] [prefix tokens].
// Learned position embeddings are indexed relative to the <sos> separator:
// row `prompt_capacity` of lm/pos always belongs to <sos>, so transcription
// positions do not shift when a prompt is prepended.

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "llmfuse/nn.hpp"
#include "llmfuse/numcore.hpp"

namespace llmfuse {

using TokenId = std::size_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kCount = 4;
}  // namespace special

class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  // Specials first, then `words` in order.
  explicit Vocab(const std::vector<std::string>& words) {
    for (const char* s : {"<pad>", "<sos>", "<eos>", "<unk>"}) push(s);
    for (const auto& w : words) push(w);
  }

  static Vocab load(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open vocab: " + file.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    const char* expect[] = {"<pad>", "<sos>", "<eos>", "<unk>"};
    for (std::size_t i = 0; i < special::kCount; ++i) {
      if (i >= lines.size() || lines[i] != expect[i]) {
        throw ParseError(file.string(), i + 1, std::string("expected ") + expect[i]);
      }
    }
    Vocab v;
    for (std::size_t i = special::kCount; i < lines.size(); ++i) {
      if (lines[i].empty()) throw ParseError(file.string(), i + 1, "empty token");
      if (v.index_.count(lines[i])) throw ParseError(file.string(), i + 1, "duplicate token " + lines[i]);
      v.push(lines[i]);
    }
    return v;
  }

  void save(const std::filesystem::path& file) const {
    std::ofstream os(file);
    if (!os) throw DataError("cannot write vocab: " + file.string());
    for (const auto& t : tokens_) os << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& word(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(std::string_view w) const { return index_.count(std::string(w)) != 0; }

  TokenId id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    return it == index_.end() ? special::kUnk : it->second;
  }

 private:
  void push(const std::string& w) {
    if (!index_.emplace(w, tokens_.size()).second) throw ArgumentError("duplicate vocab token: " + w);
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class SeqRole { prompt, transcription };

struct TokenSeq {
  std::vector<TokenId> ids;
  SeqRole role = SeqRole::transcription;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

// Whitespace split; unknown words map to <unk>.
inline TokenSeq tokenize(std::string_view text, const Vocab& vocab, SeqRole role = SeqRole::transcription) {
  TokenSeq seq{{}, role};
  for (const auto& w : split_words(text)) seq.ids.push_back(vocab.id(w));
  return seq;
}

// Space-joined words; a trailing <eos> is dropped.
inline std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == special::kEos && i + 1 == ids.size()) break;
    if (!out.empty()) out += ' ';
    out += vocab.word(ids[i]);
  }
  return out;
}

struct DecoderConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 64;          // prompt + <sos> + prefix
  std::size_t prompt_capacity = 32;  // longest prompt; the rest is for <sos> + prefix

  std::size_t max_prefix() const { return max_len - prompt_capacity - 1; }

  void validate() const {
    if (!layers || !model_dim || !heads || !ffn_dim || !max_len) throw ArgumentError("decoder config values must be positive");
    if (model_dim % heads) throw ArgumentError("decoder model_dim must be divisible by heads");
    if (prompt_capacity + 1 >= max_len) throw ArgumentError("decoder prompt_capacity must leave room for <sos> and a prefix");
  }
};

// One decoder input sequence in [prompt] [<sos>] [prefix] layout.
struct DecoderInput {
  std::vector<TokenId> ids;
  std::size_t separator = 0;  // index of <sos> == prompt length
  std::vector<std::size_t> positions;
};

inline DecoderInput make_decoder_input(const TokenSeq& prompt, const TokenSeq& prefix, const DecoderConfig& cfg) {
  if (prompt.size() > cfg.prompt_capacity) {
    throw ArgumentError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds capacity " +
                        std::to_string(cfg.prompt_capacity));
  }
  if (prefix.size() > cfg.max_prefix()) {
    throw ArgumentError("transcription prefix of " + std::to_string(prefix.size()) + " tokens exceeds " +
                        std::to_string(cfg.max_prefix()));
  }
  DecoderInput in;
  in.separator = prompt.size();
  for (TokenId t : prompt.ids) {
    if (t == special::kEos || t == special::kSos) throw ContractError("prompt must not contain <eos> or <sos>");
    in.ids.push_back(t);
  }
  in.ids.push_back(special::kSos);
  for (TokenId t : prefix.ids) {
    if (t == special::kSos) throw ContractError("<sos> may only appear as the separator");
    in.ids.push_back(t);
  }
  for (std::size_t i = 0; i < in.ids.size(); ++i) in.positions.push_back(cfg.prompt_capacity - in.separator + i);
  return in;
}

// Keeps the most recent `capacity` tokens of a prompt.
inline TokenSeq truncate_prompt(TokenSeq prompt, std::size_t capacity) {
  if (prompt.size() > capacity) prompt.ids.erase(prompt.ids.begin(), prompt.ids.end() - static_cast<std::ptrdiff_t>(capacity));
  prompt.role = SeqRole::prompt;
  return prompt;
}

inline std::string lm_layer_prefix(std::size_t layer) { return "lm/layer" + std::to_string(layer); }

template <class T>
void init_lm_params(ParamStore<T>& params, const DecoderConfig& cfg, std::size_t vocab_size, Rng& rng) {
  cfg.validate();
  nn::ensure_normal(params, "lm/embed", {vocab_size, cfg.model_dim}, rng, 1.0);
  nn::ensure_sinusoidal(params, "lm/pos", cfg.max_len, cfg.model_dim, static_cast<double>(cfg.prompt_capacity), 1.0);
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    nn::init_transformer_block(params, lm_layer_prefix(l), {cfg.model_dim, cfg.heads, cfg.ffn_dim}, rng, residual_gain);
  }
  nn::init_norm(params, "lm/ln_f", cfg.model_dim);
  nn::init_linear(params, "lm/head", cfg.model_dim, vocab_size, rng, false);
}

// Token + position embeddings for the whole input -> [L x D].
template <class T>
Var<T> lm_embed(Tape<T>& tape, ParamStore<T>& params, const DecoderInput& in) {
  auto tok = embedding(tape.param(params, "lm/embed"), std::span<const std::size_t>(in.ids));
  auto pos = embedding(tape.param(params, "lm/pos"), std::span<const std::size_t>(in.positions));
  return add(tok, pos);
}

template <class T>
Var<T> lm_layer(Tape<T>& tape, ParamStore<T>& params, const DecoderConfig& cfg, std::size_t layer, Var<T> h) {
  return nn::transformer_block(tape, params, lm_layer_prefix(layer), cfg.heads, /*causal=*/true, h);
}

// Final norm and vocabulary projection -> logits [L x V].
template <class T>
Var<T> lm_output(Tape<T>& tape, ParamStore<T>& params, Var<T> h) {
  return linear(tape, params, "lm/head", layer_norm(tape, params, "lm/ln_f", h));
}

template <class T>
Var<T> lm_logits(Tape<T>& tape, ParamStore<T>& params, const DecoderConfig& cfg, const DecoderInput& in) {
  auto h = lm_embed(tape, params, in);
  for (std::size_t l = 0; l < cfg.layers; ++l) h = lm_layer(tape, params, cfg, l, h);
  return lm_output(tape, params, h);
}

// Log-probabilities [L x V] for every input position.
template <class T>
Tensor<T> lm_log_probs(const TokenSeq& prompt, const TokenSeq& prefix, ParamStore<T>& params, const DecoderConfig& cfg) {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  auto in = make_decoder_input(prompt, prefix, cfg);
  return log_softmax(lm_logits(tape, params, cfg, in)).value();
}

// Next-token log-probabilities [V] after [prompt][<sos>][prefix].
template <class T>
Tensor<T> lm_forward(const TokenSeq& prompt, const TokenSeq& prefix, ParamStore<T>& params, const DecoderConfig& cfg) {
  Tensor<T> all = lm_log_probs(prompt, prefix, params, cfg);
  const std::size_t v = all.cols();
  std::vector<T> last(all.data().end() - static_cast<std::ptrdiff_t>(v), all.data().end());
  return Tensor<T>({v}, std::move(last));
}

// Sums log P over the hypothesis tokens and its terminating <eos>; prompt
// and separator positions are conditioning only.
template <class T>
T sequence_log_prob(const Tensor<T>& log_probs, std::size_t separator, const std::vector<TokenId>& hyp) {
  T score = 0;
  for (std::size_t i = 0; i <= hyp.size(); ++i) {
    const TokenId target = i < hyp.size() ? hyp[i] : special::kEos;
    score += log_probs(separator + i, target);
  }
  return score;
}

// A trailing <eos> on the hypothesis is accepted and scored once.
template <class T>
T lm_score(const TokenSeq& hypothesis, const TokenSeq& prompt, ParamStore<T>& params, const DecoderConfig& cfg) {
  TokenSeq body = hypothesis;
  if (!body.ids.empty() && body.ids.back() == special::kEos) body.ids.pop_back();
  for (TokenId t : body.ids) {
    if (t == special::kEos || t == special::kSos) throw ContractError("hypothesis tokens must not include <sos>/<eos>");
  }
  Tensor<T> lp = lm_log_probs(prompt, body, params, cfg);
  return sequence_log_prob(lp, prompt.size(), body.ids);
}

}  // namespace llmfuse
