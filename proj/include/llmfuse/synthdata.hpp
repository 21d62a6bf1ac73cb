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

// Synthetic two-domain long-form corpus.
//
// Word types fall into four groups:
//   homophone pairs (a_k, b_k)  one shared codebook vector; a_k realizes the
//                               pair's slot in the source domain, b_k in the
//                               target domain. Each recording keeps its domain's
//                               member with probability `homophone_bias` and
//                               otherwise uses the other member throughout.
//   oov words o_j               realize slot c_j in the target domain only
//   their source twins c_j
//   shared words                identical in both domains
// Each recording is one bigram chain over slots, cut into utterances, so the
// previous utterance predicts the next one. Every token contributes
// `frames_per_token` frames of its codebook vector plus Gaussian noise.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "llmfuse/decoding.hpp"
#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/rng.hpp"
#include "llmfuse/speech_encoder.hpp"
#include "llmfuse/toklm.hpp"

namespace llmfuse {

struct UtteranceRecord {
  std::string recording_id;
  std::size_t utterance_index = 0;
  std::string feature_path;  // "-" for text-only records
  std::string domain;
  std::string transcript;

  std::string utterance_id() const { return recording_id + "-" + std::to_string(utterance_index); }
  friend bool operator==(const UtteranceRecord&, const UtteranceRecord&) = default;
};

// Rejects duplicate (recording, index) pairs and gaps in the index sequence.
inline void validate_records(const std::vector<UtteranceRecord>& records, const std::string& where = "<manifest>") {
  std::map<std::string, std::set<std::size_t>> seen;
  for (const auto& r : records) {
    if (!seen[r.recording_id].insert(r.utterance_index).second) {
      throw DataError(where + ": duplicate utterance " + r.utterance_id());
    }
  }
  for (const auto& [rec, idx] : seen) {
    if (*idx.rbegin() + 1 != idx.size()) throw DataError(where + ": utterance indices of " + rec + " are not contiguous from 0");
  }
}

inline void sort_records(std::vector<UtteranceRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const UtteranceRecord& a, const UtteranceRecord& b) {
    if (a.recording_id != b.recording_id) return a.recording_id < b.recording_id;
    return a.utterance_index < b.utterance_index;
  });
}

// recording_id TAB utterance_index TAB feature_path TAB domain TAB transcript
inline void write_manifest(const std::filesystem::path& file, const std::vector<UtteranceRecord>& records) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write manifest: " + file.string());
  for (const auto& r : records) {
    os << r.recording_id << '\t' << r.utterance_index << '\t' << r.feature_path << '\t' << r.domain << '\t' << r.transcript
       << '\n';
  }
  if (!os) throw DataError("write failed: " + file.string());
}

// Relative feature paths are resolved against the manifest's directory.
inline std::vector<UtteranceRecord> read_manifest(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open manifest: " + file.string());
  const auto base = file.parent_path();
  std::vector<UtteranceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 5) throw ParseError(file.string(), lineno, "expected 5 tab-separated fields");
    UtteranceRecord r;
    r.recording_id = f[0];
    if (r.recording_id.empty()) throw ParseError(file.string(), lineno, "empty recording id");
    if (!detail::parse_size(f[1], r.utterance_index)) throw ParseError(file.string(), lineno, "bad utterance index '" + f[1] + "'");
    r.feature_path = f[2];
    if (r.feature_path != "-" && std::filesystem::path(r.feature_path).is_relative()) r.feature_path = (base / r.feature_path).string();
    r.domain = f[3];
    r.transcript = f[4];
    out.push_back(std::move(r));
  }
  validate_records(out, file.string());
  return out;
}

inline std::vector<std::string> read_word_list(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open word list: " + file.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

inline void write_word_list(const std::filesystem::path& file, const std::vector<std::string>& words) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write word list: " + file.string());
  for (const auto& w : words) os << w << '\n';
}

inline std::string read_text_file(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open file: " + file.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

struct SplitSpec {
  std::size_t recordings = 0;
  std::size_t utterances = 0;  // per recording
};

struct CorpusSpec {
  std::size_t vocab_size = 50;  // word types, specials excluded
  std::size_t homophone_pairs = 6;
  std::size_t oov_words = 5;
  std::size_t feat_dim = 16;
  std::size_t frames_per_token = 4;
  double noise_std = 0.5;
  double homophone_bias = 0.8;
  std::size_t min_words = 4;
  std::size_t max_words = 10;
  std::size_t successors = 5;   // bigram out-degree per slot
  double domain_skew = 0.5;     // log-normal perturbation of domain transitions
  SplitSpec train{200, 10};     // source domain, with features
  SplitSpec eval_source{20, 10};
  SplitSpec eval_target{20, 10};
  SplitSpec lm_text{200, 10};   // per domain, text only
  double entity_fraction = 0.2;
  std::uint64_t seed = 0;       // vocabulary, codebook, bigrams, train + LM text
  std::uint64_t eval_seed = 0;  // evaluation splits only

  void validate() const {
    if (vocab_size < 2 * homophone_pairs + 2 * oov_words + 2) throw ArgumentError("corpus: vocab_size too small for the word groups");
    if (!feat_dim || !frames_per_token) throw ArgumentError("corpus: feat_dim and frames_per_token must be positive");
    if (!(noise_std >= 0)) throw ArgumentError("corpus: noise_std must be non-negative");
    if (!(homophone_bias >= 0 && homophone_bias <= 1)) throw ArgumentError("corpus: homophone_bias must be in [0,1]");
    if (min_words < 1 || min_words > max_words) throw ArgumentError("corpus: bad utterance length range");
    if (min_words * frames_per_token < kMinFrames) throw ArgumentError("corpus: utterances shorter than 4 frames");
    if (!(entity_fraction >= 0 && entity_fraction <= 1)) throw ArgumentError("corpus: entity_fraction must be in [0,1]");
    if (successors < 1) throw ArgumentError("corpus: successors must be >= 1");
  }
};

inline const std::string kSourceDomain = "source";
inline const std::string kTargetDomain = "target";

// The fixed structure derived from CorpusSpec::seed.
struct CorpusStructure {
  std::vector<std::string> words;  // all word types
  std::vector<std::pair<std::string, std::string>> homophones;  // (source member, target member)
  std::vector<std::pair<std::string, std::string>> oov;         // (source twin, target-only word)
  std::vector<std::string> shared;
  // Slots: homophone pairs, then oov twins, then shared words.
  std::size_t slot_count() const { return homophones.size() + oov.size() + shared.size(); }
  std::map<std::string, std::vector<double>> codebook;
  // transitions[domain][slot] = cumulative distribution over next slots
  std::map<std::string, std::vector<std::vector<std::pair<std::size_t, double>>>> transitions;

  std::vector<std::string> gazetteer(double fraction) const {
    std::vector<std::string> order;
    for (const auto& [a, b] : homophones) order.push_back(b);
    for (const auto& [c, o] : oov) order.push_back(o);
    for (const auto& [a, b] : homophones) order.push_back(a);
    for (const auto& [c, o] : oov) order.push_back(c);
    const auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(words.size())));
    order.resize(std::min(n, order.size()));
    return order;
  }

  // `home`: the recording uses its domain's member of each homophone pair.
  std::string realize(std::size_t slot, const std::string& domain, bool home) const {
    if (slot < homophones.size()) {
      const bool target = domain == kTargetDomain;
      return (home != target) ? homophones[slot].first : homophones[slot].second;
    }
    slot -= homophones.size();
    if (slot < oov.size()) return domain == kTargetDomain ? oov[slot].second : oov[slot].first;
    return shared[slot - oov.size()];
  }
};

namespace detail {

// Pronounceable consonant-vowel words of two or three syllables.
inline std::string make_word(Rng& rng) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  const std::size_t syllables = 2 + rng.uniform_int(2);
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += consonants[rng.uniform_int(14)];
    w += vowels[rng.uniform_int(5)];
  }
  return w;
}

inline std::size_t draw_cdf(const std::vector<std::pair<std::size_t, double>>& cdf, Rng& rng) {
  const double u = rng.uniform();
  for (const auto& [slot, c] : cdf)
    if (u < c) return slot;
  return cdf.back().first;
}

}  // namespace detail

inline CorpusStructure build_structure(const CorpusSpec& spec) {
  spec.validate();
  CorpusStructure s;
  Rng word_rng = Rng(spec.seed).fork(1), code_rng = Rng(spec.seed).fork(2), gram_rng = Rng(spec.seed).fork(3);
  std::set<std::string> used;
  while (s.words.size() < spec.vocab_size) {
    auto w = detail::make_word(word_rng);
    if (used.insert(w).second) s.words.push_back(w);
  }
  std::size_t next = 0;
  for (std::size_t k = 0; k < spec.homophone_pairs; ++k, next += 2) s.homophones.emplace_back(s.words[next], s.words[next + 1]);
  for (std::size_t j = 0; j < spec.oov_words; ++j, next += 2) s.oov.emplace_back(s.words[next], s.words[next + 1]);
  for (; next < s.words.size(); ++next) s.shared.push_back(s.words[next]);

  auto draw_code = [&] {
    std::vector<double> v(spec.feat_dim);
    for (auto& x : v) x = code_rng.normal();
    return v;
  };
  for (const auto& [a, b] : s.homophones) s.codebook[a] = s.codebook[b] = draw_code();
  for (const auto& [c, o] : s.oov) {
    s.codebook[c] = draw_code();
    s.codebook[o] = draw_code();
  }
  for (const auto& w : s.shared) s.codebook[w] = draw_code();

  const std::size_t slots = s.slot_count();
  const std::size_t degree = std::min(spec.successors, slots);
  std::vector<std::vector<std::pair<std::size_t, double>>> base(slots);
  for (std::size_t i = 0; i < slots; ++i) {
    std::set<std::size_t> picked;
    while (picked.size() < degree) picked.insert(gram_rng.uniform_int(slots));
    for (std::size_t j : picked) base[i].emplace_back(j, 0.2 + gram_rng.uniform());
  }
  for (const auto& domain : {kSourceDomain, kTargetDomain}) {
    auto& table = s.transitions[domain];
    table.resize(slots);
    for (std::size_t i = 0; i < slots; ++i) {
      double total = 0;
      std::vector<std::pair<std::size_t, double>> row;
      for (auto [j, w] : base[i]) {
        w *= std::exp(spec.domain_skew * gram_rng.normal());
        row.emplace_back(j, w);
        total += w;
      }
      double acc = 0;
      for (auto& [j, w] : row) {
        acc += w / total;
        w = acc;
      }
      table[i] = std::move(row);
    }
  }
  return s;
}

// Words of one recording, cut into utterances of uniform random length.
inline std::vector<std::vector<std::string>> sample_recording(const CorpusStructure& s, const CorpusSpec& spec,
                                                              const std::string& domain, std::size_t utterances, Rng& rng) {
  const auto& table = s.transitions.at(domain);
  std::size_t slot = rng.uniform_int(s.slot_count());
  const bool home = rng.bernoulli(spec.homophone_bias);
  std::vector<std::vector<std::string>> out;
  for (std::size_t u = 0; u < utterances; ++u) {
    const std::size_t n = spec.min_words + rng.uniform_int(spec.max_words - spec.min_words + 1);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < n; ++i) {
      words.push_back(s.realize(slot, domain, home));
      slot = detail::draw_cdf(table[slot], rng);
    }
    out.push_back(std::move(words));
  }
  return out;
}

inline FeatureMatrix synthesize_features(const CorpusStructure& s, const CorpusSpec& spec, const std::vector<std::string>& words,
                                         Rng& rng) {
  Tensor<float> frames({words.size() * spec.frames_per_token, spec.feat_dim});
  std::size_t row = 0;
  for (const auto& w : words) {
    const auto& code = s.codebook.at(w);
    for (std::size_t f = 0; f < spec.frames_per_token; ++f, ++row) {
      for (std::size_t d = 0; d < spec.feat_dim; ++d) {
        frames(row, d) = static_cast<float>(code[d] + (spec.noise_std > 0 ? spec.noise_std * rng.normal() : 0.0));
      }
    }
  }
  return FeatureMatrix{std::move(frames)};
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Descriptive sentence for a domain, built from its distinctive words.
inline std::string domain_prompt(const CorpusStructure& s, const std::string& domain) {
  std::vector<std::string> marks;
  for (const auto& [a, b] : s.homophones) marks.push_back(domain == kTargetDomain ? b : a);
  for (const auto& [c, o] : s.oov) marks.push_back(domain == kTargetDomain ? o : c);
  std::string text = domain == kTargetDomain ? "Talks on " : "Stories of ";
  for (std::size_t i = 0; i < marks.size(); ++i) {
    if (i) text += i + 1 == marks.size() ? " and " : ", ";
    text += marks[i];
  }
  text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
  return text + ".";
}

struct GeneratedCorpus {
  std::filesystem::path dir;
  CorpusStructure structure;
  std::vector<UtteranceRecord> train, eval_source, eval_target, lm_text;
};

namespace detail {

inline std::vector<UtteranceRecord> write_split(const std::filesystem::path& dir, const std::string& name,
                                                const CorpusStructure& s, const CorpusSpec& spec, const std::string& domain,
                                                const SplitSpec& split, std::uint64_t seed, bool with_features) {
  Rng rng(seed);
  std::vector<UtteranceRecord> records;
  if (with_features) std::filesystem::create_directories(dir / "feats" / name);
  char rec_id[64];
  for (std::size_t r = 0; r < split.recordings; ++r) {
    std::snprintf(rec_id, sizeof rec_id, "%s%04zu", name.c_str(), r);
    const auto utts = sample_recording(s, spec, domain, split.utterances, rng);
    for (std::size_t u = 0; u < utts.size(); ++u) {
      UtteranceRecord rec{rec_id, u, "-", domain, join_words(utts[u])};
      if (with_features) {
        const std::string rel = "feats/" + name + "/" + rec.utterance_id() + ".gfaf";
        write_features(dir / rel, synthesize_features(s, spec, utts[u], rng));
        rec.feature_path = rel;
      }
      records.push_back(std::move(rec));
    }
  }
  write_manifest(dir / (name + ".manifest"), records);
  return records;
}

}  // namespace detail

// Writes the corpus tree:
//   train.manifest eval_source.manifest eval_target.manifest lm_text.manifest
//   feats/<split>/<utt>.gfaf vocab.txt gazetteer.txt source_vocab.txt
//   homophones.txt prompt_source.txt prompt_target.txt
// Returned records carry manifest-relative feature paths.
inline GeneratedCorpus generate(const CorpusSpec& spec, const std::filesystem::path& out_dir, bool force = false) {
  namespace fs = std::filesystem;
  spec.validate();
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir)) throw DataError("output path exists and is not a directory: " + out_dir.string());
    if (!fs::is_empty(out_dir)) {
      if (!force) throw DataError("output directory is not empty: " + out_dir.string());
      fs::remove_all(out_dir);
    }
  }
  fs::create_directories(out_dir);
  GeneratedCorpus g{out_dir, build_structure(spec), {}, {}, {}, {}};
  const auto& s = g.structure;
  const Rng root(spec.seed), eval_root(spec.eval_seed);
  g.train = detail::write_split(out_dir, "train", s, spec, kSourceDomain, spec.train, root.fork(10).next(), true);
  g.eval_source = detail::write_split(out_dir, "eval_source", s, spec, kSourceDomain, spec.eval_source, eval_root.fork(11).next(), true);
  g.eval_target = detail::write_split(out_dir, "eval_target", s, spec, kTargetDomain, spec.eval_target, eval_root.fork(12).next(), true);

  // Text-only LM data: source text plus target text from separate recordings.
  {
    Rng rng = root.fork(13);
    char rec_id[64];
    for (const auto& domain : {kSourceDomain, kTargetDomain}) {
      for (std::size_t r = 0; r < spec.lm_text.recordings; ++r) {
        std::snprintf(rec_id, sizeof rec_id, "lm_%s%04zu", domain.c_str(), r);
        const auto utts = sample_recording(s, spec, domain, spec.lm_text.utterances, rng);
        for (std::size_t u = 0; u < utts.size(); ++u) g.lm_text.push_back({rec_id, u, "-", domain, join_words(utts[u])});
      }
    }
    write_manifest(out_dir / "lm_text.manifest", g.lm_text);
  }

  Vocab(s.words).save(out_dir / "vocab.txt");
  write_word_list(out_dir / "gazetteer.txt", s.gazetteer(spec.entity_fraction));
  std::set<std::string> source_vocab;
  for (const auto& r : g.train)
    for (const auto& w : split_words(r.transcript)) source_vocab.insert(w);
  write_word_list(out_dir / "source_vocab.txt", {source_vocab.begin(), source_vocab.end()});
  {
    std::ofstream os(out_dir / "homophones.txt");
    for (const auto& [a, b] : s.homophones) os << a << '\t' << b << '\n';
    if (!os) throw DataError("write failed: homophones.txt");
  }
  for (const auto& domain : {kSourceDomain, kTargetDomain}) {
    std::ofstream os(out_dir / ("prompt_" + domain + ".txt"));
    os << domain_prompt(s, domain) << '\n';
    if (!os) throw DataError("write failed: prompt file");
  }
  return g;
}

// Reads homophones.txt: "source_member TAB target_member" per line.
inline std::vector<std::pair<std::string, std::string>> read_homophones(const std::filesystem::path& file) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t lineno = 0;
  for (const auto& line : read_word_list(file)) {
    ++lineno;
    const auto f = detail::split_tabs(line);
    if (f.size() != 2) throw ParseError(file.string(), lineno, "expected two tab-separated words");
    out.emplace_back(f[0], f[1]);
  }
  return out;
}

struct CorruptionSpec {
  std::size_t n = 8;
  double substitution_rate = 0.15;
  double deletion_rate = 0.0;
  double insertion_rate = 0.0;
  double rank_growth = 0.25;       // rates at rank r scale by (1 + rank_growth * r)
  double homophone_preference = 0.8;
  int reference_rank = -1;         // rank holding the reference; -1 draws one in [1, n)

  void validate() const {
    if (n < 1) throw ArgumentError("corrupt_nbest: N must be >= 1");
    for (double r : {substitution_rate, deletion_rate, insertion_rate, homophone_preference}) {
      if (!(r >= 0 && r <= 1)) throw ArgumentError("corrupt_nbest: rates must be in [0,1]");
    }
    if (!(rank_growth >= 0)) throw ArgumentError("corrupt_nbest: rank_growth must be non-negative");
    if (reference_rank >= static_cast<int>(n)) throw ArgumentError("corrupt_nbest: reference_rank out of range");
  }
};

struct CorruptionCounters {
  std::size_t rank0_reference_words = 0;
  std::size_t rank0_substitutions = 0;
  std::size_t rank0_deletions = 0;
  std::size_t rank0_insertions = 0;
};

// One corrupted copy of `words`: each word is substituted (a homophone swap
// when available and chosen), deleted, or kept, then followed by an inserted
// random word at the insertion rate. Rates are clamped to 1.
inline std::vector<std::string> corrupt_words(const std::vector<std::string>& words, double sub, double del, double ins,
                                              double homophone_preference, const std::map<std::string, std::string>& twin,
                                              const std::vector<std::string>& vocabulary, Rng& rng, CorruptionCounters* counts = nullptr) {
  sub = std::min(sub, 1.0);
  del = std::min(del, 1.0 - sub);
  ins = std::min(ins, 1.0);
  auto other_word = [&](const std::string& w) {
    if (vocabulary.size() < 2) return w;
    std::string o;
    do o = vocabulary[rng.uniform_int(vocabulary.size())];
    while (o == w);
    return o;
  };
  std::vector<std::string> out;
  for (const auto& w : words) {
    const double u = rng.uniform();
    if (u < sub) {
      auto it = twin.find(w);
      out.push_back(it != twin.end() && rng.bernoulli(homophone_preference) ? it->second : other_word(w));
      if (counts) ++counts->rank0_substitutions;
    } else if (u < sub + del) {
      if (counts) ++counts->rank0_deletions;
    } else {
      out.push_back(w);
    }
    if (rng.bernoulli(ins)) {
      out.push_back(vocabulary.empty() ? w : vocabulary[rng.uniform_int(vocabulary.size())]);
      if (counts) ++counts->rank0_insertions;
    }
  }
  return out;
}

// N-best lists from corrupted references; scores are -0.5 * (rank + 1).
inline std::vector<NBestList> corrupt_nbest(const std::vector<UtteranceRecord>& records, const CorruptionSpec& spec,
                                            const std::vector<std::pair<std::string, std::string>>& homophones,
                                            const std::vector<std::string>& vocabulary, const Vocab& vocab, std::uint64_t seed,
                                            CorruptionCounters* counters = nullptr) {
  spec.validate();
  std::map<std::string, std::string> twin;
  for (const auto& [a, b] : homophones) {
    twin[a] = b;
    twin[b] = a;
  }
  Rng rng(seed);
  std::vector<NBestList> out;
  for (const auto& rec : records) {
    const auto ref = split_words(rec.transcript);
    NBestList list{rec.utterance_id(), {}};
    const std::size_t ref_rank = spec.reference_rank >= 0 ? static_cast<std::size_t>(spec.reference_rank)
                                 : spec.n > 1                ? 1 + rng.uniform_int(spec.n - 1)
                                                             : 0;
    for (std::size_t r = 0; r < spec.n; ++r) {
      const double f = 1.0 + spec.rank_growth * static_cast<double>(r);
      CorruptionCounters local;
      auto words = corrupt_words(ref, spec.substitution_rate * f, spec.deletion_rate * f, spec.insertion_rate * f,
                                 spec.homophone_preference, twin, vocabulary, rng, &local);
      if (r == ref_rank) words = ref;
      if (r == 0 && counters) {
        counters->rank0_reference_words += ref.size();
        if (r != ref_rank) {
          counters->rank0_substitutions += local.rank0_substitutions;
          counters->rank0_deletions += local.rank0_deletions;
          counters->rank0_insertions += local.rank0_insertions;
        }
      }
      Hypothesis h;
      h.ids = tokenize(join_words(words), vocab).ids;
      h.ids.push_back(special::kEos);
      h.first_pass_score = -0.5 * static_cast<double>(r + 1);
      list.hypotheses.push_back(std::move(h));
    }
    out.push_back(std::move(list));
  }
  return out;
}

}  // namespace llmfuse
