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

// Corpus-level decode, rerank and evaluation.

#pragma once

#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "llmfuse/decoding.hpp"
#include "llmfuse/fusion.hpp"
#include "llmfuse/metrics.hpp"
#include "llmfuse/rerank.hpp"
#include "llmfuse/synthdata.hpp"

namespace llmfuse {

enum class PromptMode { none, file, history_gt, history_hyp };

inline PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "none") return PromptMode::none;
  if (s == "file") return PromptMode::file;
  if (s == "history-gt") return PromptMode::history_gt;
  if (s == "history-hyp") return PromptMode::history_hyp;
  throw ArgumentError("unknown prompt mode '" + s + "'");
}

// Runs task(i) for i in [0, n) on up to `jobs` threads; rethrows the first
// failure. Tasks must write only to their own outputs.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Positions of `records` grouped by recording, each group in index order.
inline std::vector<std::vector<std::size_t>> group_by_recording(const std::vector<UtteranceRecord>& records) {
  std::map<std::string, std::map<std::size_t, std::size_t>> by;
  for (std::size_t i = 0; i < records.size(); ++i) by[records[i].recording_id][records[i].utterance_index] = i;
  std::vector<std::vector<std::size_t>> out;
  for (const auto& [_, m] : by) {
    out.emplace_back();
    for (const auto& [__, i] : m) out.back().push_back(i);
  }
  return out;
}

// The text an N-best list finally yields: the argmax lm_score when every
// hypothesis has one, otherwise rank 0.
inline std::string final_output(const NBestList& list, const Vocab& vocab) {
  if (list.hypotheses.empty()) return "";
  bool scored = true;
  for (const auto& h : list.hypotheses) scored = scored && h.lm_score.has_value();
  return detokenize(list.hypotheses[scored ? select_best(list) : 0].ids, vocab);
}

struct DecodeOptions {
  PromptMode mode = PromptMode::none;
  std::string prompt_text;  // PromptMode::file
  std::size_t beam = 4;
  std::size_t max_len = 0;  // 0: the decoder's prefix capacity
  std::size_t jobs = 1;
};

// N-best lists in `records` order. History modes run each recording in
// index order; recordings and (otherwise) utterances run in parallel.
template <class T>
std::vector<NBestList> decode_corpus(const std::vector<UtteranceRecord>& records, const Vocab& vocab, ParamStore<T>& params,
                                     const ModelConfig& cfg, const DecodeOptions& opts) {
  const std::size_t max_len = opts.max_len ? opts.max_len : cfg.lm.max_prefix();
  const std::size_t cap = cfg.lm.prompt_capacity;
  const TokenSeq file_prompt = prompt_tokens(make_prompt(opts.prompt_text, PromptKind::description), vocab, cap);
  std::vector<NBestList> out(records.size());
  auto decode_one = [&](std::size_t i, const TokenSeq& prompt) {
    const auto& r = records[i];
    if (r.feature_path == "-") throw DataError("utterance " + r.utterance_id() + " has no features");
    auto f = read_features(r.feature_path);
    f.validate();
    const Tensor<T> acoustic = compute_acoustic(params, cfg, f.frames.template cast<T>());
    out[i] = beam_search(prompt, acoustic, params, cfg, opts.beam, max_len, r.utterance_id());
  };
  if (opts.mode == PromptMode::none || opts.mode == PromptMode::file) {
    const TokenSeq prompt = opts.mode == PromptMode::file ? file_prompt : TokenSeq{{}, SeqRole::prompt};
    parallel_for(records.size(), opts.jobs, [&](std::size_t i) { decode_one(i, prompt); });
    return out;
  }
  const auto groups = group_by_recording(records);
  parallel_for(groups.size(), opts.jobs, [&](std::size_t g) {
    std::map<std::string, std::string> prior;
    for (std::size_t i : groups[g]) {
      const auto source = opts.mode == PromptMode::history_gt ? HistorySource::gt : HistorySource::hyp;
      const Prompt p = resolve_history_prompt(records, records[i], source, prior);
      decode_one(i, prompt_tokens(p, vocab, cap));
      prior[records[i].utterance_id()] = final_output(out[i], vocab);
    }
  });
  return out;
}

struct RerankOptions {
  PromptMode mode = PromptMode::none;
  std::string prompt_text;
  std::size_t jobs = 1;
};

// Scores every list; order and ranks are kept and lm_score is filled. History
// modes need `records` covering every utterance id.
template <class T>
std::vector<RerankResult> rerank_corpus(const std::vector<NBestList>& lists, const std::vector<UtteranceRecord>& records,
                                        const Vocab& vocab, ParamStore<T>& lm_params, const DecoderConfig& cfg,
                                        const RerankOptions& opts) {
  std::vector<RerankResult> out(lists.size());
  const std::size_t cap = cfg.prompt_capacity;
  if (opts.mode == PromptMode::none || opts.mode == PromptMode::file) {
    const Prompt p = make_prompt(opts.mode == PromptMode::file ? opts.prompt_text : "", PromptKind::description);
    const TokenSeq prompt = prompt_tokens(p, vocab, cap);
    parallel_for(lists.size(), opts.jobs, [&](std::size_t i) { out[i] = rerank(lists[i], prompt, lm_params, cfg); });
    return out;
  }
  std::map<std::string, std::size_t> record_of, list_of;
  for (std::size_t i = 0; i < records.size(); ++i) record_of[records[i].utterance_id()] = i;
  for (std::size_t i = 0; i < lists.size(); ++i) list_of[lists[i].utterance_id] = i;
  std::vector<UtteranceRecord> covered;
  for (const auto& l : lists) {
    auto it = record_of.find(l.utterance_id);
    if (it == record_of.end()) throw DataError("no manifest record for utterance " + l.utterance_id);
    covered.push_back(records[it->second]);
  }
  const auto groups = group_by_recording(covered);
  parallel_for(groups.size(), opts.jobs, [&](std::size_t g) {
    std::map<std::string, std::string> prior;
    for (std::size_t k : groups[g]) {
      const auto& rec = covered[k];
      const auto source = opts.mode == PromptMode::history_gt ? HistorySource::gt : HistorySource::hyp;
      const Prompt p = resolve_history_prompt(records, rec, source, prior);
      const std::size_t i = list_of.at(rec.utterance_id());
      out[i] = rerank(lists[i], prompt_tokens(p, vocab, cap), lm_params, cfg);
      prior[rec.utterance_id()] = detokenize(out[i].best().ids, vocab);
    }
  });
  return out;
}

// References and hypotheses aligned on the reference records.
inline EvalReport evaluate_outputs(const std::vector<UtteranceRecord>& refs, const std::map<std::string, std::string>& hyps,
                                   const WordSet* gazetteer, const WordSet* source_vocab) {
  std::vector<Words> r, h;
  for (const auto& rec : refs) {
    auto it = hyps.find(rec.utterance_id());
    if (it == hyps.end()) throw DataError("no hypothesis for utterance " + rec.utterance_id());
    r.push_back(split_words(rec.transcript));
    h.push_back(split_words(it->second));
  }
  return evaluate(r, h, gazetteer, source_vocab);
}

inline std::map<std::string, std::string> outputs_of(const std::vector<NBestList>& lists, const Vocab& vocab) {
  std::map<std::string, std::string> out;
  for (const auto& l : lists) out[l.utterance_id] = final_output(l, vocab);
  return out;
}

inline std::map<std::string, std::string> outputs_of(const std::vector<UtteranceRecord>& records) {
  std::map<std::string, std::string> out;
  for (const auto& r : records) out[r.utterance_id()] = r.transcript;
  return out;
}

inline std::vector<NBestList> scored_lists(const std::vector<RerankResult>& results) {
  std::vector<NBestList> out;
  for (const auto& r : results) out.push_back(r.scored);
  return out;
}

}  // namespace llmfuse
