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

#include <cmath>
#include <numeric>
#include <sstream>

#include "llmfuse/trainer.hpp"
#include "test_util.hpp"

namespace llmfuse {
namespace {

using testing::TempDir;

// One small generated corpus shared by every test in this file.
class TrainerData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    CorpusSpec spec;
    spec.vocab_size = 24;
    spec.homophone_pairs = 2;
    spec.oov_words = 2;
    spec.feat_dim = 6;
    spec.frames_per_token = 2;
    spec.min_words = 2;
    spec.max_words = 5;
    spec.noise_std = 0.2;
    spec.train = {10, 6};
    spec.eval_source = {1, 2};
    spec.eval_target = {1, 2};
    spec.lm_text = {10, 6};
    spec.seed = 3;
    corpus_ = new GeneratedCorpus(generate(spec, dir_->path(), true));
    vocab_ = new Vocab(Vocab::load(dir_->path() / "vocab.txt"));
    examples_ = new std::vector<TrainExample>(load_examples(read_manifest(dir_->path() / "train.manifest"), *vocab_));
  }
  static void TearDownTestSuite() {
    delete examples_;
    delete vocab_;
    delete corpus_;
    delete dir_;
  }

  static TrainConfig config() {
    TrainConfig c;
    auto& m = c.model;
    m.vocab_size = vocab_->size();
    m.lm.layers = 2;
    m.lm.model_dim = 16;
    m.lm.heads = 2;
    m.lm.ffn_dim = 32;
    m.lm.max_len = 20;
    m.lm.prompt_capacity = 8;
    m.enc.feat_dim = 6;
    m.enc.layers = 1;
    m.enc.model_dim = 16;
    m.enc.heads = 2;
    m.enc.ffn_dim = 32;
    m.enc.max_frames = 16;
    m.enc.subsample_out_dim = 16;
    m.fusion = {2, 8, 1};
    c.accumulation = 2;
    c.phases[0] = make_phase(1, m.lm, 0, 3e-3);
    c.phases[1] = make_phase(2, m.lm, 0, 1e-3);
    c.phases[2] = make_phase(3, m.lm, 0, 1e-3, true);
    return c;
  }

  template <class T>
  static ParamStore<T> fresh(const TrainConfig& c, std::uint64_t seed = 1) {
    ParamStore<T> ps;
    init_model_params(ps, c.model, seed);
    return ps;
  }

  static TempDir* dir_;
  static GeneratedCorpus* corpus_;
  static Vocab* vocab_;
  static std::vector<TrainExample>* examples_;
};

TempDir* TrainerData::dir_ = nullptr;
GeneratedCorpus* TrainerData::corpus_ = nullptr;
Vocab* TrainerData::vocab_ = nullptr;
std::vector<TrainExample>* TrainerData::examples_ = nullptr;

template <class T>
std::map<std::string, std::vector<T>> snapshot(const ParamStore<T>& ps) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& [p, t] : ps) out[p].assign(t.data().begin(), t.data().end());
  return out;
}

bool has_prefix(const std::string& path, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (path == p || path.rfind(p + "/", 0) == 0) return true;
  return false;
}

TEST(LrSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lr_at(100, 1e-3, 100), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(400, 1e-3, 100), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(1, 2e-4, 1000), 2e-7);
  EXPECT_THROW(lr_at(0, 1e-3, 10), ArgumentError);
  EXPECT_THROW(lr_at(1, 1e-3, 0), ArgumentError);
  EXPECT_THROW(lr_at(1, 0.0, 10), ArgumentError);
}

TEST(LrSchedule, PeaksAtWarmupAndDecays) {
  for (std::size_t s = 1; s < 300; ++s) {
    const double a = lr_at(s, 1.0, 30), b = lr_at(s + 1, 1.0, 30);
    if (s < 30) {
      EXPECT_LT(a, b);
    } else {
      EXPECT_GT(a, b);
    }
    EXPECT_LE(a, 1.0);
  }
}

TEST(Phases, FreezePolicies) {
  DecoderConfig lm;
  lm.layers = 4;
  EXPECT_EQ(phase_trainable(1, lm, false), (std::vector<std::string>{"sub", "fusion"}));
  EXPECT_EQ(phase_trainable(2, lm, false), (std::vector<std::string>{"sub", "fusion", "enc"}));
  EXPECT_EQ(phase_trainable(3, lm, true), (std::vector<std::string>{"sub", "fusion", "enc", "lm/layer3"}));
  EXPECT_EQ(make_phase(1, lm, 10, 1e-3).prompt_probability, 0.0);
  EXPECT_EQ(make_phase(2, lm, 10, 1e-3).prompt_probability, 0.0);
  EXPECT_EQ(make_phase(3, lm, 10, 1e-3).prompt_probability, 0.8);
  EXPECT_FALSE(make_phase(2, lm, 10, 1e-3, true).unfreeze_last_lm_layer);
  EXPECT_EQ(make_phase(1, lm, 50, 1e-3).warmup(), 5u);

  auto p = make_phase(1, lm, 10, 1e-3);
  p.prompt_probability = 0.5;
  EXPECT_THROW(validate_phase(p, lm), ContractError);
  p = make_phase(1, lm, 10, 1e-3);
  p.trainable.push_back("lm");
  EXPECT_THROW(validate_phase(p, lm), ContractError);
  p = make_phase(3, lm, 10, 1e-3);
  p.prompt_probability = 1.5;
  EXPECT_THROW(validate_phase(p, lm), ArgumentError);
}

TEST(Config, ParsesKeysAndRejectsUnknown) {
  TrainConfig c;
  apply_config(c,
               "# toy\n"
               "phase1.steps = 12\n"
               "phase3.peak_lr=2e-4   # inline\n"
               "phase3.unfreeze_last_lm_layer = true\n"
               "train.accumulation = 4\n"
               "fusion.heads = 2\n"
               "\n");
  EXPECT_EQ(c.phases[0].steps, 12u);
  EXPECT_EQ(c.phases[2].peak_lr, 2e-4);
  EXPECT_TRUE(c.phases[2].unfreeze_last_lm_layer);
  EXPECT_EQ(c.phases[2].trainable.back(), lm_layer_prefix(c.model.lm.layers - 1));
  EXPECT_EQ(c.accumulation, 4u);
  EXPECT_EQ(c.model.fusion.heads, 2u);

  auto line_of = [](const std::string& text) -> std::size_t {
    TrainConfig t;
    try {
      apply_config(t, text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("phase1.steps=3\nbogus=1\n"), 2u);
  EXPECT_EQ(line_of("phase1.steps=x\n"), 1u);
  EXPECT_EQ(line_of("\n\nno equals sign\n"), 3u);
  EXPECT_EQ(line_of("phase3.unfreeze_last_lm_layer=maybe\n"), 1u);
  TrainConfig t;
  EXPECT_THROW(apply_config(t, "fusion.bottleneck_dim=64\n"), ArgumentError);
}

TEST(Config, DefaultsAreValid) {
  TrainConfig c;
  EXPECT_NO_THROW(c.model.validate());
  for (const auto& p : c.phases) EXPECT_NO_THROW(validate_phase(p, c.model.lm));
}

TEST(Optimizer, ClipRescalesToMaxNorm) {
  ParamStore<double> ps;
  ps.add("a", Tensor<double>({2}, 0.0));
  ps.add("b", Tensor<double>({1}, 0.0));
  ps.at("a").grad()[0] = 3.0;
  ps.at("b").grad()[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.at("a").grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(ps.at("b").grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(ps, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(ps.at("b").grad()[0], 0.8, 1e-15);
}

TEST(Optimizer, FirstAdamWStepMovesByLearningRate) {
  ParamStore<double> ps;
  ps.add("v", Tensor<double>({3}, std::vector<double>{1.0, 1.0, 1.0}));
  ps.add("m", Tensor<double>({1, 1}, 2.0));
  ps.add("frozen", Tensor<double>({1}, 5.0));
  ps.freeze("frozen");
  ps.at("v").grad()[0] = 0.5;
  ps.at("v").grad()[1] = -2.0;
  ps.at("m").grad()[0] = 1.0;
  ps.at("frozen").grad()[0] = 1.0;
  AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-12, 0.1});
  opt.step(ps, 0.01);
  EXPECT_NEAR(ps.at("v")[0], 0.99, 1e-10);  // bias-corrected update is sign(g)
  EXPECT_NEAR(ps.at("v")[1], 1.01, 1e-10);
  EXPECT_EQ(ps.at("v")[2], 1.0);            // zero gradient: no vector decay
  EXPECT_NEAR(ps.at("m")[0], 2.0 * (1 - 0.001) - 0.01, 1e-10);
  EXPECT_EQ(ps.at("frozen")[0], 5.0);
  EXPECT_FALSE(opt.has_moments("frozen"));
  EXPECT_EQ(opt.moment_count(), 2u);
}

TEST_F(TrainerData, SamplePromptStatistics) {
  std::vector<UtteranceRecord> records;
  for (const auto& ex : *examples_) records.push_back(ex.record);
  const RecordIndex index(records);
  Rng rng(4);
  std::size_t nonempty = 0, draws = 0;
  while (draws < 10000) {
    for (const auto& r : records) {
      if (r.utterance_index == 0) continue;
      nonempty += !sample_prompt(r, index, 0.8, rng, *vocab_, 8).empty();
      if (++draws == 10000) break;
    }
  }
  EXPECT_GE(nonempty / 10000.0, 0.78);
  EXPECT_LE(nonempty / 10000.0, 0.82);
  for (const auto& r : records) {
    EXPECT_TRUE(sample_prompt(r, index, 0.0, rng, *vocab_, 8).empty());
    if (r.utterance_index == 0) {
      EXPECT_TRUE(sample_prompt(r, index, 1.0, rng, *vocab_, 8).empty());
    } else {
      const auto* prev = index.previous(r);
      ASSERT_NE(prev, nullptr);
      EXPECT_EQ(sample_prompt(r, index, 1.0, rng, *vocab_, 100).ids, tokenize(prev->transcript, *vocab_).ids);
    }
  }
}

TEST_F(TrainerData, PromptPositionsCarryNoLoss) {
  const auto c = config();
  auto ps = fresh<double>(c);
  const auto& ex = (*examples_)[1];
  const TokenSeq prompt{{4, 5, 6}, SeqRole::prompt};
  const auto in = make_decoder_input(prompt, TokenSeq{ex.tokens, SeqRole::transcription}, c.model.lm);
  auto targets = teacher_forcing_targets(in, ex.tokens);
  EXPECT_EQ(targets.scored, ex.tokens.size() + 1);
  const auto feats = ex.features.cast<double>();
  auto loss_with = [&](const Targets& t) {
    Tape<double> tape;
    auto logits = fused_logits(tape, ps, c.model, in, acoustic_states(tape, ps, c.model, feats, false));
    return cross_entropy(logits, std::span<const std::size_t>(t.ids), t.ignore_span(), 1.0).value()[0];
  };
  const double base = loss_with(targets);
  Rng rng(5);
  for (std::size_t r = 0; r < in.separator; ++r) {
    ASSERT_TRUE(targets.ignore[r]);
    targets.ids[r] = special::kCount + rng.uniform_int(c.model.vocab_size - special::kCount);
    EXPECT_EQ(loss_with(targets), base);
  }
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(fused_example_loss(tape, ps, c.model, feats, prompt, ex.tokens, 1.0).value()[0], base);
}

TEST_F(TrainerData, AccumulationMatchesOneBatch) {
  auto c = config();
  std::vector<std::size_t> picks{0, 3, 7, 11};
  auto grads = [&](std::size_t micro_batch) {
    auto ps = fresh<double>(c);
    ps.set_trainable(phase_trainable(2, c.model.lm, false));
    // Live gates so every block parameter gets gradient.
    ps.at("fusion/block1/w1")[0] = 0.4;
    ps.at("fusion/block1/w2")[0] = -0.3;
    std::vector<Tensor<double>> feats;
    for (const auto& ex : *examples_) feats.push_back(ex.features.cast<double>());
    auto make_loss = [&](Tape<double>& tape, std::size_t i, double denom) {
      return fused_example_loss(tape, ps, c.model, feats[i], TokenSeq{{}, SeqRole::prompt}, (*examples_)[i].tokens, denom);
    };
    auto scored = [&](std::size_t i) { return (*examples_)[i].tokens.size() + 1; };
    const double loss = detail::accumulate_step<double>(ps, picks, micro_batch, make_loss, scored);
    std::map<std::string, std::vector<double>> g;
    for (auto& [p, t] : ps)
      if (!ps.is_frozen(p) && t.has_grad()) g[p].assign(t.grad().begin(), t.grad().end());
    return std::make_pair(loss, g);
  };
  const auto [loss1, g1] = grads(1);
  const auto [loss4, g4] = grads(4);
  EXPECT_NEAR(loss1, loss4, 1e-12 * std::abs(loss4));
  ASSERT_EQ(g1.size(), g4.size());
  double worst = 0;
  for (const auto& [p, v] : g4) {
    const auto& u = g1.at(p);
    for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(u[i] - v[i]) / std::max(1e-8, std::abs(v[i])));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST_F(TrainerData, ZeroStepsLeaveParamsIdentical) {
  auto c = config();
  auto ps = fresh<float>(c);
  const auto before = snapshot(ps);
  const auto r = train_phase(c.phases[0], c, *examples_, ps, *vocab_, 1);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(snapshot(ps), before);
  EXPECT_GT(r.trainable_parameters, 0u);
}

TEST_F(TrainerData, PhasesRespectFreezeDiscipline) {
  auto c = config();
  auto ps = fresh<float>(c);
  for (int ph = 1; ph <= 3; ++ph) {
    auto spec = c.phases[ph - 1];
    spec.steps = 3;
    const auto before = snapshot(ps);
    train_phase(spec, c, *examples_, ps, *vocab_, 10 + ph);
    std::size_t changed = 0;
    for (const auto& [p, v] : before) {
      if (!has_prefix(p, spec.trainable)) {
        EXPECT_EQ(snapshot(ps).at(p), v) << "phase " << ph << " changed " << p;
      } else {
        changed += snapshot(ps).at(p) != v;
      }
    }
    EXPECT_GT(changed, 0u);
    if (ph == 1) {
      EXPECT_EQ(snapshot(ps).at("enc/in_proj/w"), before.at("enc/in_proj/w"));
    }
  }
}

TEST_F(TrainerData, LogFollowsScheduleAndIsDeterministic) {
  auto c = config();
  auto spec = c.phases[0];
  spec.steps = 100;
  auto run = [&] {
    auto ps = fresh<float>(c);
    std::ostringstream csv;
    write_log_header(csv);
    auto r = train_phase(spec, c, *examples_, ps, *vocab_, 42, &csv);
    return std::make_pair(r.log, csv.str());
  };
  const auto [a, csv_a] = run();
  const auto [b, csv_b] = run();
  ASSERT_EQ(a.size(), 100u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(csv_a, csv_b);
  EXPECT_EQ(csv_a.substr(0, 19), "step,phase,lr,loss\n");
  for (const auto& e : a) {
    EXPECT_EQ(e.phase, 1);
    EXPECT_DOUBLE_EQ(e.lr, lr_at(e.step, spec.peak_lr, spec.warmup()));
    EXPECT_TRUE(std::isfinite(e.loss));
  }
}

TEST_F(TrainerData, PhaseOneLossDecreases) {
  auto c = config();
  auto spec = c.phases[0];
  spec.steps = 200;
  auto ps = fresh<float>(c);
  const auto log = train_phase(spec, c, *examples_, ps, *vocab_, 7).log;
  auto mean = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += log[i].loss;
    return s / 20;
  };
  EXPECT_LT(mean(180), mean(0));
}

TEST_F(TrainerData, LmPretrainingTouchesOnlyTheLm) {
  auto c = config();
  c.lm.steps = 60;
  c.lm.peak_lr = 3e-3;
  auto ps = fresh<float>(c);
  const auto before = snapshot(ps);
  const std::map<std::string, std::string> prompts{{kSourceDomain, read_text_file(dir_->path() / "prompt_source.txt")},
                                                   {kTargetDomain, read_text_file(dir_->path() / "prompt_target.txt")}};
  const auto data = make_lm_examples(corpus_->lm_text, prompts, *vocab_, c.model.lm.prompt_capacity);
  ASSERT_EQ(data.size(), corpus_->lm_text.size());
  EXPECT_TRUE(data[0].previous.empty());
  EXPECT_FALSE(data[1].previous.empty());
  EXPECT_FALSE(data[0].description.empty());
  const auto log = pretrain_lm(c.lm, c, data, ps, 3).log;
  ASSERT_EQ(log.size(), 60u);
  for (const auto& [p, v] : before) {
    if (p.rfind("lm/", 0) == 0) continue;
    EXPECT_EQ(snapshot(ps).at(p), v) << p;
  }
  EXPECT_NE(snapshot(ps).at("lm/head/w"), before.at("lm/head/w"));
  EXPECT_LT(log.back().loss + log[log.size() - 2].loss, log[0].loss + log[1].loss);
}

TEST_F(TrainerData, SamplerCoversEveryExamplePerEpoch) {
  Sampler s(7, Rng(1));
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<std::size_t> seen;
    for (int i = 0; i < 7; ++i) seen.push_back(s.next());
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(7);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(seen, all);
  }
  EXPECT_THROW(Sampler(0, Rng(1)), ArgumentError);
}

}  // namespace
}  // namespace llmfuse
