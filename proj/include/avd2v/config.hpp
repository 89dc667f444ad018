#pragma once

// Flat `key = value` run configuration with dotted namespaces. Every key
// has a default; unknown keys and malformed values are collected and
// reported together before any run starts.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "avd2v/finetune.hpp"
#include "avd2v/probe.hpp"

namespace avd2v {

inline constexpr char kToolVersion[] = "avd2v 0.1.0";

/// Desk-scale defaults: a three-block, 64-wide model on the synthetic corpus.
inline const std::map<std::string, std::string>& default_config() {
  static const std::map<std::string, std::string> d{
      {"corpus.vocab_size", "16"},
      {"corpus.utterances", "500"},
      {"corpus.min_frames", "40"},
      {"corpus.max_frames", "120"},
      {"corpus.frames_per_token", "4"},
      {"corpus.audio_dim", "26"},
      {"corpus.audio_rate", "4"},
      {"corpus.audio_noise", "2.0"},
      {"corpus.video_side", "24"},
      {"corpus.video_noise", "0.5"},
      {"corpus.glyph_cells", "6"},
      {"corpus.video_informative", "true"},
      {"corpus.seed", "1"},

      {"data.dir", "corpus"},
      {"data.batch_frames", "240"},
      {"data.test_fraction", "0.2"},
      {"data.label_fraction", "0.1"},
      {"data.flip_prob", "0"},

      {"model.dim", "64"},
      {"model.n_blocks", "3"},
      {"model.ffn_dim", "128"},
      {"model.n_heads", "4"},
      {"model.dropout", "0.1"},
      {"model.max_positions", "256"},
      {"model.audio_stack", "4"},
      {"model.video_channels", "4,8,16,32"},
      {"model.video_blocks", "1"},
      {"model.stem_kernel", "5,7,7"},
      {"model.video_crop", "20"},

      {"mask.prob", "50"},
      {"mask.length", "10"},

      {"student.p_av.start", "1.0"},
      {"student.p_av.end", "0.25"},
      {"student.p_av.steps", "2000"},
      {"student.p_v_cond.start", "1.0"},
      {"student.p_v_cond.steps", "2000"},
      {"student.p_v_cond.end", "1.0"},
      {"student.p_a_cond.start", "0.0"},
      {"student.p_a_cond.steps", "2000"},
      {"student.p_a_cond.end", "0.0"},
      {"teacher.p_av.start", "0.0"},
      {"teacher.p_av.end", "0.0"},
      {"teacher.p_av.steps", "0"},
      {"teacher.p_v_cond.start", "0.0"},
      {"teacher.p_v_cond.steps", "0"},
      {"teacher.p_v_cond.end", "0.0"},
      {"teacher.p_a_cond.start", "1.0"},
      {"teacher.p_a_cond.steps", "0"},
      {"teacher.p_a_cond.end", "1.0"},

      {"ema.tau_start", "0.999"},
      {"ema.tau_end", "0.99999"},
      {"ema.anneal", "100000"},
      {"targets.top_k", "3"},

      {"optim.beta1", "0.9"},
      {"optim.beta2", "0.98"},
      {"optim.eps", "1e-6"},
      {"optim.weight_decay", "0.01"},
      {"optim.clip_norm", "1.0"},

      {"pretrain.lr", "5e-4"},
      {"pretrain.updates", "2000"},
      {"pretrain.warmup_fraction", "0.03"},
      {"pretrain.checkpoint_every", "0"},
      {"pretrain.audio_only", "false"},

      {"decoder.n_blocks", "2"},
      {"decoder.ffn_dim", "128"},
      {"decoder.n_heads", "4"},
      {"decoder.vocab_size", "32"},
      {"decoder.max_positions", "64"},
      {"decoder.dropout", "0.1"},

      {"finetune.task", "asr"},
      {"finetune.lr", "1e-3"},
      {"finetune.updates", "1000"},
      {"finetune.warmup", "100"},
      {"finetune.hold", "0"},
      {"finetune.init_scale", "0.01"},
      {"finetune.final_scale", "0.05"},
      {"finetune.freeze_steps", "0"},
      {"finetune.checkpoint_every", "0"},

      {"decode.beam", "1"},
      {"decode.max_len", "40"},
      {"decode.length_norm", "true"},

      {"probe.input", "a"},
      {"probe.masked_only", "true"},
      {"probe.ridge", "0.01"},
      {"probe.mask_seed", "7"},
      {"probe.train_utterances", "100"},

      {"run.seed", "1"},
      {"run.seeds", "1,2,3,4,5"},
      {"ablate.top_k", "1,2,3"},
      {"ablate.finetune", "true"},
      {"compare.finetune", "true"},
  };
  return d;
}

class RunConfig {
 public:
  RunConfig() : values_(default_config()) {}

  /// Parses `key = value` lines; `#` starts a comment.
  static RunConfig parse(const std::string& text, const std::string& origin = "config") {
    RunConfig c;
    std::vector<std::string> errors;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      if (eq == std::string::npos) {
        errors.push_back(where + ": expected 'key = value'");
        continue;
      }
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      if (!c.values_.count(key)) {
        errors.push_back(where + ": unknown key '" + key + "'");
        continue;
      }
      c.values_[key] = value;
    }
    if (!errors.empty()) throw ConfigError(join(errors));
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown key '" + key + "'");
    values_[key] = value;
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  /// Resolved configuration, one sorted `key = value` line per key.
  std::string dump() const {
    std::string s = "# " + std::string(kToolVersion) + "\n";
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
  }

  // Typed views. Each records its problems in `errors` instead of throwing,
  // so validation can report everything at once.
  struct Reader {
    const RunConfig& cfg;
    std::vector<std::string>& errors;

    std::size_t size(const std::string& key) const {
      const auto& v = cfg.raw(key);
      std::size_t out = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) errors.push_back(key + ": expected a non-negative integer, got '" + v + "'");
      return out;
    }
    double real(const std::string& key) const {
      const auto& v = cfg.raw(key);
      try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
      } catch (const std::exception&) {
        errors.push_back(key + ": expected a number, got '" + v + "'");
        return 0.0;
      }
    }
    bool flag(const std::string& key) const {
      const auto& v = cfg.raw(key);
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      errors.push_back(key + ": expected true or false, got '" + v + "'");
      return false;
    }
    std::vector<std::size_t> sizes(const std::string& key) const {
      std::vector<std::size_t> out;
      std::stringstream ss(cfg.raw(key));
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        std::size_t x = 0;
        auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
        if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
          errors.push_back(key + ": expected a comma-separated list of integers, got '" + cfg.raw(key) + "'");
          return {};
        }
        out.push_back(x);
      }
      if (out.empty()) errors.push_back(key + ": empty list");
      return out;
    }
    std::string str(const std::string& key) const { return cfg.raw(key); }
  };

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::string join(const std::vector<std::string>& errors) {
    std::string s = std::to_string(errors.size()) + " configuration error(s):";
    for (const auto& e : errors) s += "\n  " + e;
    return s;
  }

  friend struct ResolvedConfig;
  std::map<std::string, std::string> values_;
};

/// Every typed configuration a command may need, built and validated in one
/// pass.
struct ResolvedConfig {
  SyntheticCorpusSpec corpus;
  std::string data_dir;
  std::size_t batch_frames = 0;
  double test_fraction = 0.2;
  double label_fraction = 0.1;
  PretrainConfig pretrain;
  std::size_t pretrain_checkpoint_every = 0;
  FinetuneConfig finetune;
  std::size_t finetune_checkpoint_every = 0;
  std::size_t beam = 1;
  std::size_t decode_max_len = 40;
  bool length_norm = true;
  ProbeConfig probe;
  std::size_t probe_train_utterances = 100;
  std::uint64_t seed = 1;
  std::vector<std::size_t> seeds;
  std::vector<std::size_t> ablate_top_k;
  bool ablate_finetune = true;
  bool compare_finetune = true;

  static ResolvedConfig from(const RunConfig& rc) {
    std::vector<std::string> errors;
    RunConfig::Reader r{rc, errors};
    ResolvedConfig c;

    auto& cs = c.corpus;
    cs.vocab_size = r.size("corpus.vocab_size");
    cs.utterance_count = r.size("corpus.utterances");
    cs.min_frames = r.size("corpus.min_frames");
    cs.max_frames = r.size("corpus.max_frames");
    cs.frames_per_token = r.size("corpus.frames_per_token");
    cs.audio_dim = r.size("corpus.audio_dim");
    cs.audio_rate_factor = r.size("corpus.audio_rate");
    cs.audio_noise_sigma = r.real("corpus.audio_noise");
    cs.video_side = r.size("corpus.video_side");
    cs.video_noise_sigma = r.real("corpus.video_noise");
    cs.glyph_cells = r.size("corpus.glyph_cells");
    cs.video_informative = r.flag("corpus.video_informative");
    cs.seed = r.size("corpus.seed");

    c.data_dir = r.str("data.dir");
    c.batch_frames = r.size("data.batch_frames");
    c.test_fraction = r.real("data.test_fraction");
    c.label_fraction = r.real("data.label_fraction");

    ModelConfig m;
    m.encoder.dim = r.size("model.dim");
    m.encoder.n_blocks = r.size("model.n_blocks");
    m.encoder.ffn_dim = r.size("model.ffn_dim");
    m.encoder.n_heads = r.size("model.n_heads");
    m.encoder.dropout = r.real("model.dropout");
    m.encoder.max_positions = r.size("model.max_positions");
    m.frontend.dim = m.encoder.dim;
    m.frontend.audio_stack = r.size("model.audio_stack");
    m.frontend.audio_in_dim = cs.audio_dim * m.frontend.audio_stack;
    m.frontend.video_channels = r.sizes("model.video_channels");
    m.frontend.video_blocks_per_stage = r.size("model.video_blocks");
    const auto stem = r.sizes("model.stem_kernel");
    if (stem.size() == 3)
      m.frontend.stem_kernel = {stem[0], stem[1], stem[2]};
    else if (!stem.empty())
      errors.push_back("model.stem_kernel: expected three integers t,h,w");
    m.frontend.video_side = r.size("model.video_crop");
    m.mask_prob_percent = r.real("mask.prob");
    m.mask_length = r.size("mask.length");
    m.flip_prob = r.real("data.flip_prob");

    auto& p = c.pretrain;
    p.model = m;
    auto sched = [&](const std::string& role) {
      ModalityScheduleConfig s;
      for (auto [name, prob] : {std::pair{".p_av", &s.p_av}, {".p_v_cond", &s.p_v_cond}, {".p_a_cond", &s.p_a_cond}})
        *prob = {r.real(role + name + ".start"), r.real(role + name + ".end"), r.size(role + name + ".steps")};
      return s;
    };
    p.student = sched("student");
    p.teacher = sched("teacher");
    p.ema = {r.real("ema.tau_start"), r.real("ema.tau_end"), r.size("ema.anneal")};
    p.top_k = r.size("targets.top_k");
    p.adam = {r.real("optim.beta1"), r.real("optim.beta2"), r.real("optim.eps"), r.real("optim.weight_decay"),
              r.real("optim.clip_norm")};
    p.lr = r.real("pretrain.lr");
    p.updates = r.size("pretrain.updates");
    p.warmup_fraction = r.real("pretrain.warmup_fraction");
    p.audio_only = r.flag("pretrain.audio_only");
    c.pretrain_checkpoint_every = r.size("pretrain.checkpoint_every");

    auto& f = c.finetune;
    f.model = m;
    f.decoder.n_blocks = r.size("decoder.n_blocks");
    f.decoder.dim = m.encoder.dim;
    f.decoder.ffn_dim = r.size("decoder.ffn_dim");
    f.decoder.n_heads = r.size("decoder.n_heads");
    f.decoder.vocab_size = r.size("decoder.vocab_size");
    f.decoder.max_positions = r.size("decoder.max_positions");
    f.decoder.dropout = r.real("decoder.dropout");
    try {
      f.task = parse_task(r.str("finetune.task"));
    } catch (const ConfigError& e) {
      errors.push_back(std::string("finetune.task: ") + e.what());
    }
    f.lr = r.real("finetune.lr");
    f.updates = r.size("finetune.updates");
    f.warmup = r.size("finetune.warmup");
    f.hold = r.size("finetune.hold");
    f.init_scale = r.real("finetune.init_scale");
    f.final_scale = r.real("finetune.final_scale");
    f.freeze_steps = r.size("finetune.freeze_steps");
    f.adam = p.adam;
    c.finetune_checkpoint_every = r.size("finetune.checkpoint_every");

    c.beam = r.size("decode.beam");
    c.decode_max_len = r.size("decode.max_len");
    c.length_norm = r.flag("decode.length_norm");

    const auto pin = r.str("probe.input");
    if (pin == "a")
      c.probe.input = Modality::A;
    else if (pin == "v")
      c.probe.input = Modality::V;
    else if (pin == "av")
      c.probe.input = Modality::AV;
    else
      errors.push_back("probe.input: expected a, v or av, got '" + pin + "'");
    c.probe.masked_only = r.flag("probe.masked_only");
    c.probe.ridge = r.real("probe.ridge");
    c.probe.mask_seed = r.size("probe.mask_seed");
    c.probe.batch_frames = std::max<std::size_t>(c.batch_frames, cs.max_frames);
    c.probe_train_utterances = r.size("probe.train_utterances");

    c.seed = r.size("run.seed");
    c.seeds = r.sizes("run.seeds");
    c.ablate_top_k = r.sizes("ablate.top_k");
    c.ablate_finetune = r.flag("ablate.finetune");
    c.compare_finetune = r.flag("compare.finetune");

    // Semantic checks only once every value parsed.
    if (errors.empty()) c.check(errors);
    if (!errors.empty()) throw ConfigError(RunConfig::join(errors));
    return c;
  }

  /// Applies each struct's own validation, collecting every message.
  void check(std::vector<std::string>& errors) const {
    auto collect = [&](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        errors.push_back(e.what());
      }
    };
    collect([&] { corpus.validate(); });
    collect([&] { pretrain.model.validate(); });
    collect([&] { pretrain.student.validate("student"); });
    collect([&] { pretrain.teacher.validate("teacher"); });
    collect([&] { pretrain.ema.validate(); });
    collect([&] { probe.validate(); });
    if (pretrain.top_k < 1 || pretrain.top_k > pretrain.model.encoder.n_blocks)
      errors.push_back("targets.top_k must lie in [1, model.n_blocks]");
    if (pretrain.lr <= 0) errors.push_back("pretrain.lr must be positive");
    if (pretrain.warmup_fraction < 0 || pretrain.warmup_fraction > 1)
      errors.push_back("pretrain.warmup_fraction must lie in [0, 1]");
    collect([&] { finetune.decoder.validate(finetune.model.encoder.dim); });
    if (finetune.lr <= 0) errors.push_back("finetune.lr must be positive");
    if (finetune.freeze_steps > finetune.updates) errors.push_back("finetune.freeze_steps must not exceed finetune.updates");
    if (finetune.task == Task::VSR && finetune.warmup > finetune.updates)
      errors.push_back("finetune.warmup must not exceed finetune.updates");
    if (finetune.task != Task::VSR && finetune.warmup + finetune.hold > finetune.updates)
      errors.push_back("finetune.warmup + finetune.hold must not exceed finetune.updates");
    if (finetune.init_scale <= 0 || finetune.final_scale <= 0) errors.push_back("finetune scales must be positive");
    if (pretrain.model.frontend.audio_stack != corpus.audio_rate_factor)
      errors.push_back("model.audio_stack must equal corpus.audio_rate");
    if (pretrain.model.frontend.video_side > corpus.video_side)
      errors.push_back("model.video_crop must not exceed corpus.video_side");
    if (pretrain.model.frontend.video_side < pretrain.model.frontend.stem_kernel[1])
      errors.push_back("model.video_crop must be at least the stem kernel size");
    if (corpus.max_frames > pretrain.model.encoder.max_positions)
      errors.push_back("model.max_positions must cover corpus.max_frames");
    const std::size_t max_tokens = corpus.max_frames / corpus.frames_per_token;
    if (max_tokens + 1 > finetune.decoder.max_positions)
      errors.push_back("decoder.max_positions must cover the longest reference plus EOS");
    if (corpus.vocab_size + kFirstToken > finetune.decoder.vocab_size)
      errors.push_back("decoder.vocab_size must be at least corpus.vocab_size + 3");
    if (batch_frames < corpus.max_frames) errors.push_back("data.batch_frames must be at least corpus.max_frames");
    if (test_fraction <= 0 || test_fraction >= 1) errors.push_back("data.test_fraction must lie in (0, 1)");
    if (label_fraction <= 0 || label_fraction > 1) errors.push_back("data.label_fraction must lie in (0, 1]");
    if (beam < 1) errors.push_back("decode.beam must be >= 1");
    if (decode_max_len < 1) errors.push_back("decode.max_len must be >= 1");
    for (auto k : ablate_top_k)
      if (k < 1 || k > pretrain.model.encoder.n_blocks)
        errors.push_back("ablate.top_k: K=" + std::to_string(k) + " outside [1, model.n_blocks]");
  }
};

}  // namespace avd2v
