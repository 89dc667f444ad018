#pragma once

// Training loops, evaluation and the ablation harnesses behind the command
// line tool. Runs write their resolved configuration, metrics (JSON lines),
// checkpoints and reports into an output directory.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "avd2v/checkpoint.hpp"
#include "avd2v/config.hpp"
#include "avd2v/finetune.hpp"
#include "avd2v/probe.hpp"

namespace avd2v {

namespace fs = std::filesystem;

struct RunContext {
  ResolvedConfig cfg;
  std::string resolved_text;  // RunConfig::dump() of the effective settings
  std::ostream* log = nullptr;

  static RunContext from(const RunConfig& rc, std::ostream* log = nullptr) {
    return {ResolvedConfig::from(rc), rc.dump(), log};
  }
};

struct Split {
  std::vector<std::size_t> train;  // unlabeled pre-training pool
  std::vector<std::size_t> test;
  std::vector<std::size_t> labeled;  // fine-tuning subset of train
  std::vector<std::size_t> probe_train;
};

inline Split make_split(std::size_t n, const ResolvedConfig& cfg) {
  Split s;
  std::size_t n_test = static_cast<std::size_t>(std::llround(double(n) * cfg.test_fraction));
  n_test = std::clamp<std::size_t>(n_test, 1, n > 1 ? n - 1 : 1);
  const std::size_t n_train = n > n_test ? n - n_test : n;
  for (std::size_t i = 0; i < n_train; ++i) s.train.push_back(i);
  for (std::size_t i = n_train; i < n; ++i) s.test.push_back(i);
  if (s.test.empty()) s.test = s.train;
  const std::size_t n_lab = std::max<std::size_t>(1, std::llround(double(n_train) * cfg.label_fraction));
  s.labeled.assign(s.train.begin(), s.train.begin() + std::min(n_lab, n_train));
  s.probe_train.assign(s.train.begin(), s.train.begin() + std::min(cfg.probe_train_utterances, n_train));
  return s;
}

/// Epoch-wise shuffled batch plan. The plan for a step depends only on the
/// seed and the step, so resumed runs see the same batches.
class BatchSchedule {
 public:
  BatchSchedule(const Corpus& corpus, std::vector<std::size_t> pool, std::size_t limit, std::uint64_t seed)
      : corpus_(corpus), pool_(std::move(pool)), limit_(limit), seed_(seed) {
    if (pool_.empty()) throw ConfigError("no utterances available for training");
  }

  const std::vector<std::size_t>& at(std::size_t step) {
    std::size_t epoch = 0;
    while (true) {
      while (epochs_.size() <= epoch) {
        Rng rng(derive_seed(seed_, 0xE90C0000ULL + epochs_.size()));
        epochs_.push_back(plan_batches(corpus_, pool_, limit_, rng));
      }
      if (step < epochs_[epoch].size()) return epochs_[epoch][step];
      step -= epochs_[epoch].size();
      ++epoch;
    }
  }

  ModalityBatch batch(std::size_t step) { return load_batch(corpus_, at(step), limit_); }

 private:
  const Corpus& corpus_;
  std::vector<std::size_t> pool_;
  std::size_t limit_;
  std::uint64_t seed_;
  std::vector<std::vector<std::vector<std::size_t>>> epochs_;
};

inline void prepare_out_dir(const std::string& dir, const std::string& resolved_text) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  binio::write_file_atomic((fs::path(dir) / "config.resolved").string(), resolved_text);
  binio::write_file_atomic((fs::path(dir) / "VERSION").string(), std::string(kToolVersion) + "\n");
}

class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::string& dir, bool append) {
    if (dir.empty()) return;
    const auto path = (fs::path(dir) / "metrics.jsonl").string();
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
  }
  void write(const nlohmann::json& j) {
    if (!out_.is_open()) return;
    out_ << j.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("failed to write metrics");
  }

 private:
  std::ofstream out_;
};

inline nlohmann::json to_json(const PretrainMetrics& m) {
  return {{"step", m.step},
          {"loss", m.loss},
          {"loss_sum", m.loss_sum},
          {"lr", m.lr},
          {"tau", m.tau},
          {"grad_norm", m.grad_norm},
          {"modality",
           {{"av", m.student_modality[0]}, {"a", m.student_modality[1]}, {"v", m.student_modality[2]}}},
          {"teacher_modality",
           {{"av", m.teacher_modality[0]}, {"a", m.teacher_modality[1]}, {"v", m.teacher_modality[2]}}},
          {"wall_ms", m.wall_ms}};
}

inline nlohmann::json to_json(const FinetuneMetrics& m) {
  return {{"step", m.step},
          {"loss", m.loss},
          {"lr", m.lr},
          {"grad_norm", m.grad_norm},
          {"token_accuracy", m.token_accuracy},
          {"encoder_frozen", m.encoder_frozen},
          {"wall_ms", m.wall_ms}};
}

struct PretrainOptions {
  std::string out_dir;                        // empty: no files written
  std::optional<ModelState<float>> resume;    // continue from this state
  std::optional<std::size_t> stop_at;         // stop early (simulated interruption)
  std::vector<PretrainMetrics>* metrics = nullptr;
};

inline ModelState<float> run_pretrain(const RunContext& ctx, const PretrainConfig& pc, const Corpus& corpus,
                                      const std::vector<std::size_t>& pool, std::uint64_t seed,
                                      PretrainOptions opt = {}) {
  pc.validate();
  const bool resuming = opt.resume.has_value();
  ModelState<float> state = resuming ? std::move(*opt.resume) : init_pretrain_state<float>(pc, seed);
  if (resuming && !state.teacher.same_structure(state.student))
    throw ConfigError("resume checkpoint is not a pre-training checkpoint");
  prepare_out_dir(opt.out_dir, ctx.resolved_text);
  MetricsLog log(opt.out_dir, resuming);
  BatchSchedule schedule(corpus, pool, ctx.cfg.batch_frames, derive_seed(seed, 0xBA7C4ULL));
  const std::size_t end = std::min(pc.updates, opt.stop_at.value_or(pc.updates));
  while (state.step < end) {
    const auto m = pretrain_step(schedule.batch(state.step), state, pc);
    log.write(to_json(m));
    if (opt.metrics) opt.metrics->push_back(m);
    if (ctx.log && (m.step % 100 == 0 || state.step == end))
      *ctx.log << "pretrain step " << m.step << " loss " << m.loss << " lr " << m.lr << " tau " << m.tau << "\n";
    const auto every = ctx.cfg.pretrain_checkpoint_every;
    if (!opt.out_dir.empty() && every > 0 && state.step % every == 0)
      save_checkpoint(state, (fs::path(opt.out_dir) / ("checkpoint_" + std::to_string(state.step) + ".bin")).string());
  }
  if (!opt.out_dir.empty()) save_checkpoint(state, (fs::path(opt.out_dir) / "checkpoint.bin").string());
  return state;
}

struct FinetuneOptions {
  std::string out_dir;
  const ParamStore<float>* pretrained = nullptr;  // null: from scratch
  std::vector<FinetuneMetrics>* metrics = nullptr;
};

inline ModelState<float> run_finetune(const RunContext& ctx, const FinetuneConfig& fc, const Corpus& corpus,
                                      const std::vector<std::size_t>& labeled, std::uint64_t seed,
                                      FinetuneOptions opt = {}) {
  auto state = init_finetune_state<float>(fc, seed, opt.pretrained);
  prepare_out_dir(opt.out_dir, ctx.resolved_text);
  MetricsLog log(opt.out_dir, false);
  BatchSchedule schedule(corpus, labeled, ctx.cfg.batch_frames, derive_seed(seed, 0xF7BA7CULL));
  while (state.step < fc.updates) {
    const auto m = finetune_step(schedule.batch(state.step), state, fc);
    log.write(to_json(m));
    if (opt.metrics) opt.metrics->push_back(m);
    if (ctx.log && (m.step % 100 == 0 || state.step == fc.updates))
      *ctx.log << "finetune step " << m.step << " loss " << m.loss << " acc " << m.token_accuracy << "\n";
    const auto every = ctx.cfg.finetune_checkpoint_every;
    if (!opt.out_dir.empty() && every > 0 && state.step % every == 0)
      save_checkpoint(state, (fs::path(opt.out_dir) / ("checkpoint_" + std::to_string(state.step) + ".bin")).string());
  }
  if (!opt.out_dir.empty()) save_checkpoint(state, (fs::path(opt.out_dir) / "checkpoint.bin").string());
  return state;
}

struct EvalReport {
  double ter = 0.0;
  std::vector<DecodeResult> results;
};

/// Decodes `indices` one utterance at a time; optionally writes
/// hypotheses (JSON lines) and a report to `out_dir`.
inline EvalReport evaluate(const RunContext& ctx, const FinetuneConfig& fc, const Corpus& corpus,
                           const std::vector<std::size_t>& indices, ParamStore<float>& params, std::size_t beam,
                           const std::string& out_dir = "", const std::string& tag = "") {
  EvalReport rep;
  const std::size_t limit = std::max(ctx.cfg.batch_frames, corpus.spec().max_frames);
  for (auto i : indices) {
    auto r = decode_batch(load_batch(corpus, {i}, limit), params, fc, beam, ctx.cfg.decode_max_len,
                          ctx.cfg.length_norm);
    rep.results.insert(rep.results.end(), r.begin(), r.end());
  }
  rep.ter = corpus_ter(rep.results);
  if (!out_dir.empty()) {
    std::string lines;
    for (const auto& r : rep.results)
      lines += nlohmann::json{{"utt_id", r.utt_id}, {"hyp_tokens", r.hyp}, {"score", r.score}}.dump() + "\n";
    const std::string suffix = tag.empty() ? "" : "_" + tag;
    binio::write_file_atomic((fs::path(out_dir) / ("hyps" + suffix + ".jsonl")).string(), lines);
    nlohmann::json report{{"task", task_name(fc.task)},
                          {"beam", beam},
                          {"utterances", rep.results.size()},
                          {"ter", rep.ter}};
    binio::write_file_atomic((fs::path(out_dir) / ("report" + suffix + ".json")).string(), report.dump(2) + "\n");
  }
  return rep;
}

inline ProbeResult probe_model(const RunContext& ctx, const Corpus& corpus, const Split& split,
                               ParamStore<float>& params, const ModelConfig& mc) {
  return run_probe(corpus, split.probe_train, split.test, params, mc, ctx.cfg.probe);
}

// ---------------------------------------------------------------------------
// Ablations

struct TopKRow {
  std::size_t k = 0;
  double probe_error = 0.0;
  double ter = std::nan("");
};

inline std::string topk_csv(const std::vector<TopKRow>& rows) {
  std::string s = "k,probe_error,ter\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", r.k, r.probe_error, r.ter);
    s += buf;
  }
  return s;
}

/// One pre-training run (fixed modality mix, audio-only teacher) and probe
/// per K. Trends are reported, not enforced.
inline std::vector<TopKRow> ablate_topk(const RunContext& ctx, const Corpus& corpus, const std::string& out_dir) {
  const auto& cfg = ctx.cfg;
  const auto split = make_split(corpus.size(), cfg);
  prepare_out_dir(out_dir, ctx.resolved_text);
  std::vector<TopKRow> rows;
  for (auto k : cfg.ablate_top_k) {
    auto pc = cfg.pretrain;
    pc.student = ModalityScheduleConfig::fixed(0.5, 0.25, 0.25);
    pc.teacher = ModalityScheduleConfig::audio_only();
    pc.top_k = k;
    const std::string sub = out_dir.empty() ? "" : (fs::path(out_dir) / ("k" + std::to_string(k))).string();
    auto state = run_pretrain(ctx, pc, corpus, split.train, cfg.seed, {sub, {}, {}, nullptr});
    TopKRow row{k, probe_model(ctx, corpus, split, state.student, pc.model).test_error, std::nan("")};
    if (cfg.ablate_finetune) {
      auto ft = run_finetune(ctx, cfg.finetune, corpus, split.labeled, cfg.seed, {"", &state.student, nullptr});
      row.ter = evaluate(ctx, cfg.finetune, corpus, split.test, ft.student, cfg.beam).ter;
    }
    if (ctx.log) *ctx.log << "top-k " << k << " probe " << row.probe_error << " ter " << row.ter << "\n";
    rows.push_back(row);
    if (!out_dir.empty()) binio::write_file_atomic((fs::path(out_dir) / "topk.csv").string(), topk_csv(rows));
  }
  return rows;
}

struct CompareRow {
  std::size_t seed = 0;
  double av_probe = 0.0;
  double a_probe = 0.0;
  double av_ter = std::nan("");
  double a_ter = std::nan("");
};

inline std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string s = "seed,av_probe_error,a_probe_error,av_ter,a_ter\n";
  char buf[192];
  CompareRow mean;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f\n", r.seed, r.av_probe, r.a_probe, r.av_ter, r.a_ter);
    s += buf;
    mean.av_probe += r.av_probe / double(rows.size());
    mean.a_probe += r.a_probe / double(rows.size());
  }
  double av_ter = 0, a_ter = 0;
  for (const auto& r : rows) {
    av_ter += r.av_ter / double(rows.size());
    a_ter += r.a_ter / double(rows.size());
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f,%.6f\n", mean.av_probe, mean.a_probe, av_ter, a_ter);
  s += buf;
  return s;
}

/// Audio-visual versus audio-only pre-training on the same corpus, per seed.
/// A pre-trained AV state may be supplied per seed to avoid recomputation.
inline std::vector<CompareRow> compare_av_a(const RunContext& ctx, const Corpus& corpus, const std::string& out_dir,
                                            const std::map<std::size_t, ParamStore<float>>* av_cache = nullptr) {
  const auto& cfg = ctx.cfg;
  const auto split = make_split(corpus.size(), cfg);
  prepare_out_dir(out_dir, ctx.resolved_text);
  std::vector<CompareRow> rows;
  for (auto seed : cfg.seeds) {
    CompareRow row;
    row.seed = seed;
    for (bool audio_only : {false, true}) {
      auto pc = cfg.pretrain;
      pc.audio_only = audio_only;
      const std::string tag = std::string(audio_only ? "a" : "av") + "_seed" + std::to_string(seed);
      const std::string sub = out_dir.empty() ? "" : (fs::path(out_dir) / tag).string();
      ParamStore<float> student;
      if (!audio_only && av_cache && av_cache->count(seed)) {
        student = av_cache->at(seed).clone();
      } else {
        student = run_pretrain(ctx, pc, corpus, split.train, seed, {sub, {}, {}, nullptr}).student;
      }
      const double probe = probe_model(ctx, corpus, split, student, pc.model).test_error;
      double ter = std::nan("");
      if (cfg.compare_finetune) {
        auto ft = run_finetune(ctx, cfg.finetune, corpus, split.labeled, seed, {"", &student, nullptr});
        ter = evaluate(ctx, cfg.finetune, corpus, split.test, ft.student, cfg.beam).ter;
      }
      (audio_only ? row.a_probe : row.av_probe) = probe;
      (audio_only ? row.a_ter : row.av_ter) = ter;
    }
    if (ctx.log)
      *ctx.log << "seed " << seed << " probe av " << row.av_probe << " a " << row.a_probe << " ter av " << row.av_ter
               << " a " << row.a_ter << "\n";
    rows.push_back(row);
    if (!out_dir.empty()) binio::write_file_atomic((fs::path(out_dir) / "compare.csv").string(), compare_csv(rows));
  }
  return rows;
}

}  // namespace avd2v
