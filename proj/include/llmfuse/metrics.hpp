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

// Word error rate and word-recall metrics.

#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "llmfuse/errors.hpp"

namespace llmfuse {

using Words = std::vector<std::string>;
using WordSet = std::set<std::string>;

struct WerResult {
  double wer = 0.0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t reference_words = 0;

  std::size_t edits() const { return substitutions + insertions + deletions; }
};

// Unit-cost word edit distance. Among minimal alignments the traceback takes
// a substitution/match first, then a deletion, then an insertion.
inline WerResult wer(const Words& ref, const Words& hyp) {
  if (ref.empty()) throw ArgumentError("wer: empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  WerResult r;
  r.reference_words = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++r.deletions;
      --i;
    } else {
      ++r.insertions;
      --j;
    }
  }
  r.wer = static_cast<double>(r.edits()) / static_cast<double>(n);
  return r;
}

struct RecallCounts {
  std::size_t hits = 0;
  std::size_t total = 0;

  std::optional<double> value() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(hits) / static_cast<double>(total);
  }
};

namespace detail {

// Per utterance: total += occurrences in the reference of words picked by
// `pick`; hits += min(reference count, hypothesis count) per such word.
template <class Pick>
RecallCounts count_recall(const std::vector<Words>& refs, const std::vector<Words>& hyps, Pick pick) {
  if (refs.size() != hyps.size()) throw ArgumentError("recall: reference/hypothesis count mismatch");
  RecallCounts c;
  for (std::size_t u = 0; u < refs.size(); ++u) {
    std::map<std::string, std::size_t> in_ref, in_hyp;
    for (const auto& w : refs[u])
      if (pick(w)) ++in_ref[w];
    for (const auto& w : hyps[u]) ++in_hyp[w];
    for (const auto& [w, n] : in_ref) {
      c.total += n;
      auto it = in_hyp.find(w);
      c.hits += std::min(n, it == in_hyp.end() ? std::size_t{0} : it->second);
    }
  }
  return c;
}

}  // namespace detail

inline RecallCounts entity_recall_counts(const std::vector<Words>& refs, const std::vector<Words>& hyps, const WordSet& gazetteer) {
  return detail::count_recall(refs, hyps, [&](const std::string& w) { return gazetteer.count(w) != 0; });
}

// Undefined (nullopt) when the references contain no gazetteer words.
inline std::optional<double> entity_recall(const std::vector<Words>& refs, const std::vector<Words>& hyps, const WordSet& gazetteer) {
  return entity_recall_counts(refs, hyps, gazetteer).value();
}

inline RecallCounts oov_recall_counts(const std::vector<Words>& refs, const std::vector<Words>& hyps, const WordSet& source_vocab) {
  return detail::count_recall(refs, hyps, [&](const std::string& w) { return source_vocab.count(w) == 0; });
}

// Undefined when every reference word is in the source vocabulary.
inline std::optional<double> oov_recall(const std::vector<Words>& refs, const std::vector<Words>& hyps, const WordSet& source_vocab) {
  return oov_recall_counts(refs, hyps, source_vocab).value();
}

struct EvalReport {
  double wer = 0.0;
  std::optional<double> entity_recall;
  std::optional<double> oov_recall;
  std::size_t substitutions = 0, insertions = 0, deletions = 0, reference_words = 0;
  RecallCounts entity;
  RecallCounts oov;
  std::size_t utterances = 0;
};

// Corpus WER is total edits over total reference words.
inline EvalReport evaluate(const std::vector<Words>& refs, const std::vector<Words>& hyps, const WordSet* gazetteer = nullptr,
                           const WordSet* source_vocab = nullptr) {
  if (refs.size() != hyps.size()) throw ArgumentError("evaluate: reference/hypothesis count mismatch");
  EvalReport r;
  r.utterances = refs.size();
  for (std::size_t u = 0; u < refs.size(); ++u) {
    const auto w = wer(refs[u], hyps[u]);
    r.substitutions += w.substitutions;
    r.insertions += w.insertions;
    r.deletions += w.deletions;
    r.reference_words += w.reference_words;
  }
  if (r.reference_words == 0) throw ArgumentError("evaluate: no reference words");
  r.wer = static_cast<double>(r.substitutions + r.insertions + r.deletions) / static_cast<double>(r.reference_words);
  if (gazetteer) {
    r.entity = entity_recall_counts(refs, hyps, *gazetteer);
    r.entity_recall = gazetteer->empty() ? std::nullopt : r.entity.value();
  }
  if (source_vocab) {
    r.oov = oov_recall_counts(refs, hyps, *source_vocab);
    r.oov_recall = r.oov.value();
  }
  return r;
}

// key=value lines; undefined recalls print as "undefined".
inline std::string format_report(const EvalReport& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("undefined");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  std::string out;
  out += "wer=" + num(r.wer) + "\n";
  out += "entity_recall=" + num(r.entity_recall) + "\n";
  out += "oov_recall=" + num(r.oov_recall) + "\n";
  out += "utterances=" + std::to_string(r.utterances) + "\n";
  out += "reference_words=" + std::to_string(r.reference_words) + "\n";
  out += "substitutions=" + std::to_string(r.substitutions) + "\n";
  out += "insertions=" + std::to_string(r.insertions) + "\n";
  out += "deletions=" + std::to_string(r.deletions) + "\n";
  out += "entity_hits=" + std::to_string(r.entity.hits) + "\n";
  out += "entity_total=" + std::to_string(r.entity.total) + "\n";
  out += "oov_hits=" + std::to_string(r.oov.hits) + "\n";
  out += "oov_total=" + std::to_string(r.oov.total) + "\n";
  return out;
}

}  // namespace llmfuse
