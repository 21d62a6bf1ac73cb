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

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "llmfuse/decoding.hpp"
#include "test_util.hpp"

namespace llmfuse {
namespace {

using testing::random_tensor;

// vocab_size 7 leaves four emittable tokens: <eos>, 4, 5, 6.
ModelConfig tiny_model(std::size_t vocab_size = 7) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.lm.layers = 2;
  c.lm.model_dim = 8;
  c.lm.heads = 2;
  c.lm.ffn_dim = 16;
  c.lm.max_len = 16;
  c.lm.prompt_capacity = 4;
  c.enc.feat_dim = 4;
  c.enc.layers = 1;
  c.enc.model_dim = 8;
  c.enc.heads = 2;
  c.enc.ffn_dim = 16;
  c.enc.max_frames = 32;
  c.enc.subsample_out_dim = 8;
  c.fusion = {1, 4, 1};
  return c;
}

struct Toy {
  ModelConfig cfg;
  ParamStore<double> params;
  Tensor<double> acoustic;
  TokenSeq prompt{{}, SeqRole::prompt};
};

// Random parameters with a sharpened output layer and live gates so scores
// spread out and depend on the acoustics.
Toy random_toy(std::uint64_t seed, std::size_t vocab_size = 7) {
  Toy t{tiny_model(vocab_size), {}, {}, {}};
  init_model_params(t.params, t.cfg, seed);
  Rng rng(seed ^ 0x5eed);
  for (auto& v : t.params.at("lm/head/w").data()) v *= 3.0;
  t.params.at("fusion/block1/w1")[0] = rng.uniform(-1.0, 1.0);
  t.params.at("fusion/block1/w2")[0] = rng.uniform(-1.0, 1.0);
  t.acoustic = random_tensor<double>({3, 8}, rng);
  if (seed % 2) t.prompt.ids = {4, 5};
  return t;
}

std::vector<double> step_log_probs(Toy& t, const std::vector<TokenId>& prefix) {
  auto lp = fused_forward(t.prompt, TokenSeq{prefix, SeqRole::transcription}, t.acoustic, t.params, t.cfg);
  return {lp.row(lp.rows() - 1).begin(), lp.row(lp.rows() - 1).end()};
}

// Every <eos>-terminated sequence of at most max_len body tokens (bodies of
// exactly max_len are force-closed), with its exact score.
std::vector<Hypothesis> enumerate_all(Toy& t, std::size_t max_len) {
  std::vector<Hypothesis> out;
  std::vector<std::pair<std::vector<TokenId>, double>> frontier{{{}, 0.0}};
  for (std::size_t len = 0; len <= max_len; ++len) {
    std::vector<std::pair<std::vector<TokenId>, double>> next;
    for (const auto& [ids, score] : frontier) {
      const auto lp = step_log_probs(t, ids);
      auto done = ids;
      done.push_back(special::kEos);
      out.push_back({done, score + lp[special::kEos], std::nullopt});
      if (len == max_len) continue;
      for (TokenId tok = special::kCount; tok < t.cfg.vocab_size; ++tok) {
        auto ext = ids;
        ext.push_back(tok);
        next.emplace_back(ext, score + lp[tok]);
      }
    }
    frontier = std::move(next);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.first_pass_score > b.first_pass_score; });
  return out;
}

TEST(BeamSearch, ExhaustiveOracleOnRandomModels) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto t = random_toy(seed);
    const std::size_t max_len = 4;
    const auto all = enumerate_all(t, max_len);
    const auto got = beam_search(t.prompt, t.acoustic, t.params, t.cfg, 81, max_len);
    ASSERT_FALSE(got.hypotheses.empty());
    EXPECT_EQ(got.hypotheses[0].ids, all[0].ids) << "seed " << seed;
    EXPECT_NEAR(got.hypotheses[0].first_pass_score, all[0].first_pass_score, 1e-9);
    // With beam >= 4^max_len nothing is pruned: the list is the exhaustive ranking.
    const auto wide = beam_search(t.prompt, t.acoustic, t.params, t.cfg, 256, max_len);
    ASSERT_EQ(wide.hypotheses.size(), all.size());
    for (std::size_t r = 0; r < all.size(); ++r) {
      EXPECT_EQ(wide.hypotheses[r].ids, all[r].ids) << "seed " << seed << " rank " << r;
      EXPECT_NEAR(wide.hypotheses[r].first_pass_score, all[r].first_pass_score, 1e-9);
    }
  }
}

TEST(BeamSearch, BeamOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto t = random_toy(100 + seed, 10);
    const std::size_t max_len = 6;
    std::vector<TokenId> ids;
    double score = 0;
    const auto tokens = emittable_tokens(t.cfg.vocab_size);
    while (true) {
      const auto lp = step_log_probs(t, ids);
      if (ids.size() == max_len) {
        score += lp[special::kEos];
        ids.push_back(special::kEos);
        break;
      }
      TokenId best = tokens[0];
      for (TokenId tok : tokens)
        if (lp[tok] > lp[best]) best = tok;
      score += lp[best];
      ids.push_back(best);
      if (best == special::kEos) break;
    }
    const auto got = beam_search(t.prompt, t.acoustic, t.params, t.cfg, 1, max_len);
    ASSERT_EQ(got.hypotheses.size(), 1u);
    EXPECT_EQ(got.hypotheses[0].ids, ids);
    EXPECT_NEAR(got.hypotheses[0].first_pass_score, score, 1e-12);
  }
}

TEST(BeamSearch, ListInvariants) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto t = random_toy(200 + seed, 11);
    for (std::size_t beam : {1u, 3u, 8u}) {
      const auto got = beam_search(t.prompt, t.acoustic, t.params, t.cfg, beam, 7, "u");
      EXPECT_EQ(got.utterance_id, "u");
      ASSERT_GE(got.hypotheses.size(), 1u);
      ASSERT_LE(got.hypotheses.size(), beam);
      for (std::size_t r = 0; r < got.hypotheses.size(); ++r) {
        const auto& h = got.hypotheses[r];
        EXPECT_LE(h.first_pass_score, 0.0);
        ASSERT_FALSE(h.ids.empty());
        EXPECT_EQ(h.ids.back(), special::kEos);
        EXPECT_EQ(std::count(h.ids.begin(), h.ids.end(), special::kEos), 1);
        EXPECT_LE(h.ids.size(), 8u);
        for (TokenId id : h.ids) EXPECT_TRUE(id != special::kPad && id != special::kSos && id != special::kUnk);
        if (r) {
          EXPECT_LE(h.first_pass_score, got.hypotheses[r - 1].first_pass_score);
        }
        // Prefix-score consistency.
        double s = 0;
        std::vector<TokenId> prefix;
        for (TokenId id : h.ids) {
          s += step_log_probs(t, prefix)[id];
          prefix.push_back(id);
        }
        EXPECT_NEAR(h.first_pass_score, s, 1e-6);
      }
    }
  }
}

TEST(BeamSearch, Deterministic) {
  auto t = random_toy(7, 12);
  EXPECT_EQ(beam_search(t.prompt, t.acoustic, t.params, t.cfg, 4, 8),
            beam_search(t.prompt, t.acoustic, t.params, t.cfg, 4, 8));
}

TEST(BeamSearch, RejectsBadArguments) {
  auto t = random_toy(1);
  EXPECT_THROW(beam_search(t.prompt, t.acoustic, t.params, t.cfg, 0, 3), ArgumentError);
  EXPECT_THROW(beam_search(t.prompt, t.acoustic, t.params, t.cfg, 2, 0), ArgumentError);
  EXPECT_THROW(beam_search(t.prompt, t.acoustic, t.params, t.cfg, 2, t.cfg.lm.max_prefix() + 1), ArgumentError);
}

TEST(BeamSearch, EmittableTokensExcludeSpecials) {
  EXPECT_EQ(emittable_tokens(7), (std::vector<TokenId>{special::kEos, 4, 5, 6}));
}

// ---- N-best files ----

Vocab word_vocab() { return Vocab({"alpha", "beta", "gamma"}); }

TEST(NBestFile, RoundTripIsLossless) {
  const auto v = word_vocab();
  std::vector<NBestList> lists{
      {"rec-0", {{{4, 5, special::kEos}, -0.1234567890123456789, std::nullopt}, {{6, special::kEos}, -3.0e-17, std::nullopt}}},
      {"rec-1", {{{special::kEos}, -12.5, -7.25}}},
  };
  std::stringstream ss;
  write_nbest(ss, lists, v);
  EXPECT_EQ(read_nbest(ss, v), lists);
}

TEST(NBestFile, FormatAndComments) {
  const auto v = word_vocab();
  std::stringstream ss;
  write_nbest(ss, {{"u", {{{4, 6, special::kEos}, -1.5, std::nullopt}}}}, v);
  EXPECT_EQ(ss.str(), "u\t0\t-1.5\talpha gamma\n");
  std::stringstream in("# header\n\nu\t1\t-2\tbeta\nu\t0\t-1\talpha\n");
  const auto lists = read_nbest(in, v);
  ASSERT_EQ(lists.size(), 1u);
  ASSERT_EQ(lists[0].hypotheses.size(), 2u);
  EXPECT_EQ(lists[0].hypotheses[0].ids, (std::vector<TokenId>{4, special::kEos}));
}

TEST(NBestFile, EmptyFileGivesNoLists) {
  std::stringstream ss("");
  EXPECT_TRUE(read_nbest(ss, word_vocab()).empty());
}

TEST(NBestFile, MalformedInputNamesLine) {
  const auto v = word_vocab();
  auto expect_line = [&](const std::string& text, std::size_t line) {
    std::stringstream ss(text);
    try {
      read_nbest(ss, v);
      FAIL() << "no error for: " << text;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), line) << e.what();
    }
  };
  expect_line("u\t0\t-1\talpha\nu\t0\t-2\tbeta\n", 2);  // duplicate (utterance, rank)
  expect_line("u\t0\t-1\n", 1);
  expect_line("# c\nu\tx\t-1\talpha\n", 2);
  expect_line("u\t0\tnan?\talpha\n", 1);
  expect_line("u\t0\t-1\talpha\tlm\n", 1);
  expect_line("u\t1\t-1\talpha\n", 1);  // ranks must start at 0
}

}  // namespace
}  // namespace llmfuse
