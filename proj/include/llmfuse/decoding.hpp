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

#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "llmfuse/fusion.hpp"
#include "llmfuse/toklm.hpp"

namespace llmfuse {

struct Hypothesis {
  std::vector<TokenId> ids;  // <eos>-terminated when complete
  double first_pass_score = 0.0;
  std::optional<double> lm_score;

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

struct NBestList {
  std::string utterance_id;
  std::vector<Hypothesis> hypotheses;  // rank order

  friend bool operator==(const NBestList&, const NBestList&) = default;
};

// Output tokens the decoder may emit: everything except <pad>, <sos>, <unk>.
inline std::vector<TokenId> emittable_tokens(std::size_t vocab_size) {
  std::vector<TokenId> out;
  for (TokenId t = 0; t < vocab_size; ++t) {
    if (t != special::kPad && t != special::kSos && t != special::kUnk) out.push_back(t);
  }
  return out;
}

// Length-synchronous beam search over the fused decoder. Scores are raw sums
// of log-probabilities. Each step ranks every (hypothesis, token) extension
// by score, then token id, then the parent's position; the best `beam`
// survive. Extensions ending in <eos> are set aside as complete. The search
// stops once `beam` hypotheses are complete or after `max_len` tokens, when
// survivors are closed with <eos> and its log-probability.
template <class T>
NBestList beam_search(const TokenSeq& prompt, const Tensor<T>& acoustic, ParamStore<T>& params, const ModelConfig& cfg,
                      std::size_t beam, std::size_t max_len, std::string utterance_id = {}) {
  if (beam < 1) throw ArgumentError("beam_search: beam must be >= 1");
  if (max_len < 1) throw ArgumentError("beam_search: max_len must be >= 1");
  if (max_len > cfg.lm.max_prefix()) {
    throw ArgumentError("beam_search: max_len " + std::to_string(max_len) + " exceeds decoder capacity " +
                        std::to_string(cfg.lm.max_prefix()));
  }
  const auto tokens = emittable_tokens(cfg.vocab_size);
  struct Live {
    std::vector<TokenId> ids;
    double score;
  };
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double score;
  };
  auto next_log_probs = [&](const std::vector<TokenId>& ids) {
    Tensor<T> lp = fused_forward(prompt, TokenSeq{ids, SeqRole::transcription}, acoustic, params, cfg);
    const std::size_t v = lp.cols();
    return std::vector<T>(lp.data().end() - static_cast<std::ptrdiff_t>(v), lp.data().end());
  };

  std::vector<Live> live{{{}, 0.0}};
  std::vector<Hypothesis> done;
  bool stopped_early = false;
  for (std::size_t step = 0; step < max_len; ++step) {
    std::vector<Candidate> cands;
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto lp = next_log_probs(live[p].ids);
      for (TokenId t : tokens) cands.push_back({p, t, live[p].score + static_cast<double>(lp[t])});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.token < b.token;
    });
    std::vector<Live> next;
    for (std::size_t i = 0; i < std::min(beam, cands.size()); ++i) {
      const auto& c = cands[i];
      auto ids = live[c.parent].ids;
      ids.push_back(c.token);
      if (c.token == special::kEos) {
        done.push_back({std::move(ids), c.score, std::nullopt});
      } else {
        next.push_back({std::move(ids), c.score});
      }
    }
    live = std::move(next);
    if (done.size() >= beam || live.empty()) {
      stopped_early = true;
      break;
    }
  }
  if (!stopped_early) {
    for (auto& h : live) {
      const auto lp = next_log_probs(h.ids);
      h.ids.push_back(special::kEos);
      done.push_back({std::move(h.ids), h.score + static_cast<double>(lp[special::kEos]), std::nullopt});
    }
  }
  std::stable_sort(done.begin(), done.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.first_pass_score > b.first_pass_score; });
  if (done.size() > beam) done.resize(beam);
  return NBestList{std::move(utterance_id), std::move(done)};
}

// Tab-separated N-best text:
//   utterance_id <TAB> rank <TAB> first_pass_score <TAB> tokens [<TAB> lm_score]
// Scores use 17 significant digits; lines starting with '#' are comments.
inline void write_nbest(std::ostream& os, const std::vector<NBestList>& lists, const Vocab& vocab) {
  char buf[64];
  for (const auto& list : lists) {
    for (std::size_t r = 0; r < list.hypotheses.size(); ++r) {
      const auto& h = list.hypotheses[r];
      std::snprintf(buf, sizeof buf, "%.17g", h.first_pass_score);
      os << list.utterance_id << '\t' << r << '\t' << buf << '\t' << detokenize(h.ids, vocab);
      if (h.lm_score) {
        std::snprintf(buf, sizeof buf, "%.17g", *h.lm_score);
        os << '\t' << buf;
      }
      os << '\n';
    }
  }
}

inline void write_nbest(const std::filesystem::path& file, const std::vector<NBestList>& lists, const Vocab& vocab) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write N-best file: " + file.string());
  write_nbest(os, lists, vocab);
  if (!os) throw DataError("write failed: " + file.string());
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream is(s);
  is.imbue(std::locale::classic());
  is >> out;
  return !is.fail() && is.eof();
}

inline bool parse_size(const std::string& s, std::size_t& out) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 18) return false;
  out = std::stoull(s);
  return true;
}

}  // namespace detail

// Lists appear in order of first occurrence; hypotheses are ordered by rank,
// which must run 0..n-1 without duplicates.
inline std::vector<NBestList> read_nbest(std::istream& is, const Vocab& vocab, const std::string& where = "<nbest>") {
  std::vector<NBestList> lists;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::map<std::size_t, Hypothesis>> ranked;
  std::map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 4 && f.size() != 5) throw ParseError(where, lineno, "expected 4 or 5 tab-separated fields");
    if (f[0].empty()) throw ParseError(where, lineno, "empty utterance id");
    std::size_t rank;
    if (!detail::parse_size(f[1], rank)) throw ParseError(where, lineno, "bad rank '" + f[1] + "'");
    Hypothesis h;
    if (!detail::parse_double(f[2], h.first_pass_score)) throw ParseError(where, lineno, "bad score '" + f[2] + "'");
    h.ids = tokenize(f[3], vocab).ids;
    h.ids.push_back(special::kEos);
    if (f.size() == 5) {
      double lm;
      if (!detail::parse_double(f[4], lm)) throw ParseError(where, lineno, "bad lm score '" + f[4] + "'");
      h.lm_score = lm;
    }
    if (!index.count(f[0])) {
      index[f[0]] = lists.size();
      lists.push_back({f[0], {}});
      first_line[f[0]] = lineno;
    }
    if (!ranked[f[0]].emplace(rank, std::move(h)).second) {
      throw ParseError(where, lineno, "duplicate rank " + f[1] + " for utterance " + f[0]);
    }
  }
  for (auto& list : lists) {
    std::size_t expect = 0;
    for (auto& [rank, h] : ranked[list.utterance_id]) {
      if (rank != expect++) throw ParseError(where, first_line[list.utterance_id], "ranks of " + list.utterance_id + " are not contiguous from 0");
      list.hypotheses.push_back(std::move(h));
    }
  }
  return lists;
}

inline std::vector<NBestList> read_nbest(const std::filesystem::path& file, const Vocab& vocab) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open N-best file: " + file.string());
  return read_nbest(is, vocab, file.string());
}

}  // namespace llmfuse
