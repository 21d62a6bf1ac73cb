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

// llmfuse: synth-gen, train, decode, rerank, eval, gate-report, gradcheck.
//
// Exit codes: 0 success, 1 usage, 2 data or parse error, 3 contract violation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "llmfuse/llmfuse.hpp"

namespace fs = std::filesystem;
using namespace llmfuse;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitContract = 3;

TrainConfig model_config(const std::string& config_path, const Vocab& vocab) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();
  return cfg;
}

// Every parameter a fresh model would have under `prefix` must be present
// with the same shape.
void check_compatible(const ParamStore<float>& params, const ModelConfig& cfg, const std::string& where, const std::string& prefix = "") {
  ParamStore<float> ref;
  init_model_params(ref, cfg, 0);
  for (const auto& [path, t] : ref) {
    if (!prefix.empty() && !path_has_prefix(path, prefix)) continue;
    if (!params.contains(path)) throw DataError(where + ": missing parameter " + path);
    if (params.at(path).shape() != t.shape()) {
      throw DataError(where + ": parameter " + path + " has shape " + shape_string(params.at(path).shape()) + ", expected " +
                      shape_string(t.shape()));
    }
  }
}

ParamStore<float> load_model(const std::string& file, const ModelConfig& cfg, const std::string& prefix = "") {
  auto params = load_checkpoint<float>(file);
  check_compatible(params, cfg, file, prefix);
  return params;
}

std::ofstream open_out(const std::string& file) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file);
  return os;
}

void print_report(const EvalReport& r, std::ostream& os) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "WER %.2f%% (S=%zu I=%zu D=%zu N=%zu)\n", 100.0 * r.wer, r.substitutions, r.insertions,
                r.deletions, r.reference_words);
  os << buf;
  os << format_report(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-conditioned ASR with gated cross-attention LM fusion and N-best LM reranking"};
  app.require_subcommand(1);
  std::string config_path;

  // synth-gen
  auto* synth = app.add_subcommand("synth-gen", "Generate the synthetic two-domain corpus");
  CorpusSpec cs;
  std::string synth_out;
  bool force = false;
  std::string nbest_out, nbest_split = "eval_target";
  CorruptionSpec corr;
  std::uint64_t synth_seed = 0, eval_seed = 0, nbest_seed = 0;
  bool eval_seed_set = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_flag("--force", force, "Overwrite a non-empty output directory");
  synth->add_option("--seed", synth_seed, "Structure and training-data seed")->capture_default_str();
  synth->add_option("--eval-seed", eval_seed, "Evaluation-split seed (defaults to --seed)");
  synth->add_option("--vocab-size", cs.vocab_size, "Word types")->capture_default_str();
  synth->add_option("--homophone-pairs", cs.homophone_pairs)->capture_default_str();
  synth->add_option("--oov-words", cs.oov_words)->capture_default_str();
  synth->add_option("--feat-dim", cs.feat_dim)->capture_default_str();
  synth->add_option("--frames-per-token", cs.frames_per_token)->capture_default_str();
  synth->add_option("--noise-std", cs.noise_std)->capture_default_str();
  synth->add_option("--homophone-bias", cs.homophone_bias)->capture_default_str();
  synth->add_option("--entity-fraction", cs.entity_fraction)->capture_default_str();
  synth->add_option("--train-recordings", cs.train.recordings)->capture_default_str();
  synth->add_option("--eval-recordings", cs.eval_source.recordings, "Recordings per evaluation split")->capture_default_str();
  synth->add_option("--utterances", cs.train.utterances, "Utterances per recording")->capture_default_str();
  synth->add_option("--lm-recordings", cs.lm_text.recordings, "Text-only recordings per domain")->capture_default_str();
  synth->add_option("--nbest", nbest_out, "Also write corrupted N-best lists for --nbest-split");
  synth->add_option("--nbest-split", nbest_split)->capture_default_str()->check(CLI::IsMember({"train", "eval_source", "eval_target"}));
  synth->add_option("--nbest-n", corr.n)->capture_default_str();
  synth->add_option("--sub-rate", corr.substitution_rate)->capture_default_str();
  synth->add_option("--del-rate", corr.deletion_rate)->capture_default_str();
  synth->add_option("--ins-rate", corr.insertion_rate)->capture_default_str();
  synth->add_option("--reference-rank", corr.reference_rank, "Rank holding the reference (-1: random in [1,N))")->capture_default_str();
  synth->add_option("--nbest-seed", nbest_seed)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Pretrain the LM or run fusion training phases");
  std::string corpus_dir, resume, train_out, log_path, phase = "all";
  std::uint64_t train_seed = 0;
  int unfreeze = -1;
  train->add_option("--corpus", corpus_dir, "Corpus directory from synth-gen")->required();
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--phase", phase, "lm, 1, 2, 3 or all")->capture_default_str()->check(CLI::IsMember({"lm", "1", "2", "3", "all"}));
  train->add_option("--resume", resume, "Start from this checkpoint");
  train->add_option("--out", train_out, "Output checkpoint")->required();
  train->add_option("--log", log_path, "Loss log CSV");
  train->add_option("--seed", train_seed)->capture_default_str();
  train->add_option("--unfreeze-last-lm-layer", unfreeze, "Override the phase-3 setting (0 or 1)")->check(CLI::Range(0, 1));

  // decode
  auto* decode = app.add_subcommand("decode", "Beam-search a manifest into N-best lists");
  std::string manifest, vocab_path, model_path, prompt_mode = "none", prompt_file, decode_out;
  std::size_t beam = 0, max_len = 0, jobs = 1;
  decode->add_option("--manifest", manifest)->required();
  decode->add_option("--vocab", vocab_path)->required();
  decode->add_option("--model", model_path, "Fused model checkpoint")->required();
  decode->add_option("--config", config_path);
  decode->add_option("--prompt-mode", prompt_mode)->capture_default_str()->check(CLI::IsMember({"none", "file", "history-gt", "history-hyp"}));
  decode->add_option("--prompt-file", prompt_file, "Prompt text for --prompt-mode file");
  decode->add_option("--beam", beam, "Beam size (default from config)");
  decode->add_option("--max-len", max_len, "Maximum hypothesis length (default: decoder capacity)");
  decode->add_option("--jobs", jobs)->capture_default_str()->check(CLI::PositiveNumber);
  decode->add_option("--out", decode_out, "N-best output file")->required();

  // rerank
  auto* rr = app.add_subcommand("rerank", "Rescore N-best lists with the prompt-conditioned LM");
  std::string nbest_in, lm_path, rerank_out, rerank_mode = "none", rerank_prompt;
  rr->add_option("--nbest", nbest_in)->required();
  rr->add_option("--vocab", vocab_path)->required();
  rr->add_option("--lm", lm_path, "Checkpoint holding the LM parameters")->required();
  rr->add_option("--config", config_path);
  auto* rr_pf = rr->add_option("--prompt-file", rerank_prompt, "Whole file is one prompt");
  rr->add_option("--prompt-mode", rerank_mode)->capture_default_str()->check(CLI::IsMember({"none", "history-gt", "history-hyp"}))->excludes(rr_pf);
  rr->add_option("--manifest", manifest, "Manifest for history prompts");
  rr->add_option("--jobs", jobs)->capture_default_str()->check(CLI::PositiveNumber);
  rr->add_option("--out", rerank_out)->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Score hypotheses against a reference manifest");
  std::string ref_path, hyp_path, gazetteer_path, source_vocab_path, eval_out;
  ev->add_option("--ref", ref_path, "Reference manifest")->required();
  ev->add_option("--hyp", hyp_path, "N-best file or manifest (*.manifest)")->required();
  ev->add_option("--vocab", vocab_path, "Vocabulary (needed for N-best input)");
  ev->add_option("--gazetteer", gazetteer_path);
  ev->add_option("--source-vocab", source_vocab_path);
  ev->add_option("--out", eval_out, "Also write the key=value report here");

  // gate-report
  auto* gr = app.add_subcommand("gate-report", "Print |tanh(w1)| and |tanh(w2)| per fused layer");
  gr->add_option("--model", model_path)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full fused-model loss");
  std::uint64_t gc_seed = 0;
  std::size_t samples = 500;
  double epsilon = 1e-5, tolerance = 1e-4;
  gc->add_option("--config", config_path);
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--samples", samples)->capture_default_str();
  gc->add_option("--epsilon", epsilon)->capture_default_str();
  gc->add_option("--tolerance", tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  eval_seed_set = synth->count("--eval-seed") > 0;

  try {
    if (*synth) {
      cs.seed = synth_seed;
      cs.eval_seed = eval_seed_set ? eval_seed : synth_seed;
      cs.eval_target = cs.eval_source;
      cs.eval_target.utterances = cs.eval_source.utterances = cs.lm_text.utterances = cs.train.utterances;
      auto g = generate(cs, synth_out, force);
      std::cout << "wrote " << g.train.size() << " train, " << g.eval_source.size() << " eval_source, " << g.eval_target.size()
                << " eval_target utterances to " << synth_out << "\n";
      if (!nbest_out.empty()) {
        const auto vocab = Vocab::load(fs::path(synth_out) / "vocab.txt");
        const auto records = read_manifest(fs::path(synth_out) / (nbest_split + ".manifest"));
        CorruptionCounters counters;
        auto lists = corrupt_nbest(records, corr, read_homophones(fs::path(synth_out) / "homophones.txt"), g.structure.words, vocab,
                                   nbest_seed, &counters);
        write_nbest(nbest_out, lists, vocab);
        std::cout << "wrote " << lists.size() << " N-best lists to " << nbest_out << "\n";
      }
    } else if (*train) {
      const fs::path dir(corpus_dir);
      const auto vocab = Vocab::load(dir / "vocab.txt");
      auto cfg = model_config(config_path, vocab);
      if (unfreeze >= 0) {
        cfg.phases[2].unfreeze_last_lm_layer = unfreeze == 1;
        cfg.phases[2].trainable = phase_trainable(3, cfg.model.lm, unfreeze == 1);
      }
      ParamStore<float> params;
      if (!resume.empty()) params = load_checkpoint<float>(resume);
      init_model_params(params, cfg.model, train_seed);
      check_compatible(params, cfg.model, resume.empty() ? "<init>" : resume);
      std::ofstream log;
      if (!log_path.empty()) {
        log = open_out(log_path);
        write_log_header(log);
      }
      std::ostream* log_os = log_path.empty() ? nullptr : &log;
      const bool all = phase == "all";
      if (all || phase == "lm") {
        std::map<std::string, std::string> prompts;
        for (const auto& d : {kSourceDomain, kTargetDomain}) {
          const auto f = dir / ("prompt_" + d + ".txt");
          if (fs::exists(f)) prompts[d] = read_text_file(f);
        }
        const auto data = make_lm_examples(read_manifest(dir / "lm_text.manifest"), prompts, vocab, cfg.model.lm.prompt_capacity);
        const auto r = pretrain_lm(cfg.lm, cfg, data, params, train_seed, log_os);
        std::cout << "phase lm: " << r.log.size() << " steps, trainable parameters " << r.trainable_parameters << "\n";
      }
      if (all || phase != "lm") {
        const auto data = load_examples(read_manifest(dir / "train.manifest"), vocab);
        for (int ph = 1; ph <= 3; ++ph) {
          if (!all && phase != std::to_string(ph)) continue;
          const auto r = train_phase(cfg.phases[ph - 1], cfg, data, params, vocab, train_seed, log_os);
          std::cout << "phase " << ph << ": " << r.log.size() << " steps, trainable parameters " << r.trainable_parameters << "\n";
        }
      }
      params.unfreeze_all();
      save_checkpoint(train_out, params);
    } else if (*decode) {
      const auto vocab = Vocab::load(vocab_path);
      const auto cfg = model_config(config_path, vocab);
      auto params = load_model(model_path, cfg.model);
      DecodeOptions opts;
      opts.mode = parse_prompt_mode(prompt_mode);
      if (opts.mode == PromptMode::file) {
        if (prompt_file.empty()) throw ArgumentError("--prompt-mode file needs --prompt-file");
        opts.prompt_text = read_text_file(prompt_file);
      }
      opts.beam = beam ? beam : cfg.beam;
      opts.max_len = max_len;
      opts.jobs = jobs;
      const auto lists = decode_corpus(read_manifest(manifest), vocab, params, cfg.model, opts);
      write_nbest(decode_out, lists, vocab);
    } else if (*rr) {
      const auto vocab = Vocab::load(vocab_path);
      const auto cfg = model_config(config_path, vocab);
      auto params = load_model(lm_path, cfg.model, "lm");
      RerankOptions opts;
      opts.jobs = jobs;
      std::vector<UtteranceRecord> records;
      if (!rerank_prompt.empty()) {
        opts.mode = PromptMode::file;
        opts.prompt_text = read_text_file(rerank_prompt);
      } else {
        opts.mode = parse_prompt_mode(rerank_mode);
        if (opts.mode != PromptMode::none) {
          if (manifest.empty()) throw ArgumentError("history prompt modes need --manifest");
          records = read_manifest(manifest);
        }
      }
      const auto lists = read_nbest(fs::path(nbest_in), vocab);
      const auto results = rerank_corpus(lists, records, vocab, params, cfg.model.lm, opts);
      write_nbest(rerank_out, scored_lists(results), vocab);
    } else if (*ev) {
      const auto refs = read_manifest(ref_path);
      std::map<std::string, std::string> hyps;
      if (fs::path(hyp_path).extension() == ".manifest") {
        hyps = outputs_of(read_manifest(hyp_path));
      } else {
        if (vocab_path.empty()) throw ArgumentError("eval of an N-best file needs --vocab");
        hyps = outputs_of(read_nbest(fs::path(hyp_path), Vocab::load(vocab_path)), Vocab::load(vocab_path));
      }
      std::optional<WordSet> gaz, src;
      if (!gazetteer_path.empty()) {
        const auto w = read_word_list(gazetteer_path);
        gaz.emplace(w.begin(), w.end());
      }
      if (!source_vocab_path.empty()) {
        const auto w = read_word_list(source_vocab_path);
        src.emplace(w.begin(), w.end());
      }
      const auto report = evaluate_outputs(refs, hyps, gaz ? &*gaz : nullptr, src ? &*src : nullptr);
      print_report(report, std::cout);
      if (!eval_out.empty()) {
        auto os = open_out(eval_out);
        os << format_report(report);
      }
    } else if (*gr) {
      const auto params = load_checkpoint<float>(model_path);
      std::cout << format_gate_report(gate_report(params));
    } else if (*gc) {
      TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
      const auto report = full_model_grad_check(cfg.model, gc_seed, samples, epsilon);
      std::printf("max_rel_error=%.3e\ncoordinates=%zu\nworst=%s[%zu] analytic=%.9e numeric=%.9e\n", report.max_rel_error,
                  report.coordinates, report.worst_path.c_str(), report.worst_index, report.worst_analytic, report.worst_numeric);
      if (!(report.max_rel_error < tolerance)) {
        std::fprintf(stderr, "gradcheck: max relative error %.3e exceeds %.1e\n", report.max_rel_error, tolerance);
        return kExitContract;
      }
    }
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
