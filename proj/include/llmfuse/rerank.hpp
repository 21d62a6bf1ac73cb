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

// Second-pass N-best reranking by prompt-conditioned LM score.

#pragma once

#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "llmfuse/decoding.hpp"
#include "llmfuse/synthdata.hpp"
#include "llmfuse/toklm.hpp"

namespace llmfuse {

enum class PromptKind { none, title, description, history_gt, history_hyp };

struct Prompt {
  std::string raw;
  std::string normalized;
  PromptKind kind = PromptKind::none;
};

// Lowercases, keeps letters, digits, spaces and apostrophes, collapses
// whitespace runs and trims.
inline std::string normalize_prompt(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : raw) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
    } else if (std::isalnum(c) || c == '\'') {
      if (pending_space) out += ' ';
      pending_space = false;
      out += static_cast<char>(std::tolower(c));
    }
  }
  return out;
}

inline Prompt make_prompt(std::string raw, PromptKind kind) {
  Prompt p{std::move(raw), {}, kind};
  p.normalized = normalize_prompt(p.raw);
  if (p.normalized.empty()) p.kind = PromptKind::none;
  return p;
}

// Tokenized prompt, keeping the most recent `capacity` tokens.
inline TokenSeq prompt_tokens(const Prompt& prompt, const Vocab& vocab, std::size_t capacity) {
  return truncate_prompt(tokenize(prompt.normalized, vocab, SeqRole::prompt), capacity);
}

struct RerankResult {
  std::size_t selected = 0;  // rank of the chosen hypothesis
  NBestList scored;          // input order, lm_score filled

  const Hypothesis& best() const { return scored.hypotheses[selected]; }
};

// Picks the highest lm_score; the lowest rank wins ties.
inline std::size_t select_best(const NBestList& list) {
  if (list.hypotheses.empty()) throw ArgumentError("rerank: empty N-best list for " + list.utterance_id);
  std::size_t best = 0;
  for (std::size_t r = 1; r < list.hypotheses.size(); ++r) {
    if (!list.hypotheses[r].lm_score || !list.hypotheses[best].lm_score) throw ContractError("select_best: missing lm_score");
    if (*list.hypotheses[r].lm_score > *list.hypotheses[best].lm_score) best = r;
  }
  return best;
}

// Scores every hypothesis as [prompt][<sos>][hypothesis] under the LM. The
// first-pass score plays no part in the selection.
template <class T>
RerankResult rerank(const NBestList& nbest, const TokenSeq& prompt, ParamStore<T>& lm_params, const DecoderConfig& cfg) {
  if (nbest.hypotheses.empty()) throw ArgumentError("rerank: empty N-best list for " + nbest.utterance_id);
  RerankResult out{0, nbest};
  for (auto& h : out.scored.hypotheses) {
    h.lm_score = static_cast<double>(lm_score(TokenSeq{h.ids, SeqRole::transcription}, prompt, lm_params, cfg));
  }
  out.selected = select_best(out.scored);
  return out;
}

enum class HistorySource { gt, hyp };

// Prompt from the previous utterance of the same recording: its reference
// transcript (gt) or this pipeline's final output for it (hyp), looked up by
// utterance id in `prior_outputs`. The first utterance gets no prompt.
inline Prompt resolve_history_prompt(const std::vector<UtteranceRecord>& records, const UtteranceRecord& current,
                                     HistorySource source, const std::map<std::string, std::string>& prior_outputs = {}) {
  if (current.utterance_index == 0) return make_prompt("", PromptKind::none);
  const UtteranceRecord* prev = nullptr;
  for (const auto& r : records) {
    if (r.recording_id == current.recording_id && r.utterance_index + 1 == current.utterance_index) {
      prev = &r;
      break;
    }
  }
  if (!prev) throw ContractError("no previous utterance for " + current.utterance_id());
  if (source == HistorySource::gt) {
    auto p = make_prompt(prev->transcript, PromptKind::history_gt);
    p.kind = PromptKind::history_gt;
    return p;
  }
  auto it = prior_outputs.find(prev->utterance_id());
  if (it == prior_outputs.end()) throw ContractError("history-hyp: no output yet for " + prev->utterance_id());
  auto p = make_prompt(it->second, PromptKind::history_hyp);
  p.kind = PromptKind::history_hyp;
  return p;
}

}  // namespace llmfuse
