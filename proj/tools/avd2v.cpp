// avd2v: command-line driver for corpus generation, pre-training,
// fine-tuning, decoding and the ablation harnesses.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avd2v/harness.hpp"

using namespace avd2v;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "run configuration (key = value lines)");
  auto* o = cmd->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "run seed");
}

RunConfig load_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) rc.set("run.seed", std::to_string(*c.seed));
  return rc;
}

std::string join_path(const std::string& a, const std::string& b) { return (fs::path(a) / b).string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual self-supervised pre-training and fine-tuning at desk scale"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common gen_c, pre_c, ft_c, dec_c, topk_c, cmp_c;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic audio-visual corpus");
  add_common(gen, gen_c);

  bool audio_only = false;
  std::string resume;
  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
  add_common(pre, pre_c);
  pre->add_flag("--audio-only", audio_only, "keep visual features out of the transformer");
  pre->add_option("--resume", resume, "continue from a pre-training checkpoint");

  std::string ft_task, ft_init;
  bool no_init = false;
  auto* ft = app.add_subcommand("finetune", "attach a decoder and fine-tune on labeled utterances");
  add_common(ft, ft_c);
  ft->add_option("--task", ft_task, "asr, vsr or avsr")->check(CLI::IsMember({"asr", "vsr", "avsr"}));
  ft->add_option("checkpoint", ft_init, "pre-training checkpoint");
  ft->add_flag("--no-init", no_init, "train from random initialization (baseline)");

  std::string dec_task, dec_ckpt;
  std::vector<std::size_t> beams;
  auto* dec = app.add_subcommand("decode", "decode the test split and report token error rate");
  add_common(dec, dec_c);
  dec->add_option("--task", dec_task, "asr, vsr or avsr")->check(CLI::IsMember({"asr", "vsr", "avsr"}));
  dec->add_option("--beam", beams, "beam width(s); repeat or comma-separate for a sweep")->delimiter(',');
  dec->add_option("checkpoint", dec_ckpt, "fine-tuned checkpoint")->required();

  std::vector<std::size_t> ks;
  auto* topk = app.add_subcommand("ablate-topk", "pre-train and probe once per top-K target setting");
  add_common(topk, topk_c);
  topk->add_option("--k", ks, "K values (comma-separated)")->delimiter(',');

  auto* cmp = app.add_subcommand("compare-av-a", "audio-visual versus audio-only pre-training across seeds");
  add_common(cmp, cmp_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      auto rc = load_config(gen_c);
      if (gen_c.seed) rc.set("corpus.seed", std::to_string(*gen_c.seed));
      const auto ctx = RunContext::from(rc, &std::cerr);
      prepare_out_dir(gen_c.out, ctx.resolved_text);
      const auto m = generate_corpus(ctx.cfg.corpus, gen_c.out);
      std::cerr << "wrote " << m.entries.size() << " utterances to " << gen_c.out << "\n";
    } else if (*pre) {
      auto rc = load_config(pre_c);
      if (audio_only) rc.set("pretrain.audio_only", "true");
      const auto ctx = RunContext::from(rc, &std::cerr);
      std::optional<ModelState<float>> state;
      if (!resume.empty()) state = load_checkpoint<float>(resume);
      const auto corpus = Corpus::load(ctx.cfg.data_dir);
      const auto split = make_split(corpus.size(), ctx.cfg);
      run_pretrain(ctx, ctx.cfg.pretrain, corpus, split.train, ctx.cfg.seed, {pre_c.out, std::move(state), {}, nullptr});
    } else if (*ft) {
      auto rc = load_config(ft_c);
      if (!ft_task.empty()) rc.set("finetune.task", ft_task);
      const auto ctx = RunContext::from(rc, &std::cerr);
      if (no_init == !ft_init.empty())
        throw ConfigError(no_init ? "--no-init and a checkpoint are mutually exclusive"
                                  : "finetune needs a pre-training checkpoint or --no-init");
      std::optional<ModelState<float>> pretrained;
      if (!no_init) pretrained = load_checkpoint<float>(ft_init);
      const auto corpus = Corpus::load(ctx.cfg.data_dir);
      const auto split = make_split(corpus.size(), ctx.cfg);
      run_finetune(ctx, ctx.cfg.finetune, corpus, split.labeled, ctx.cfg.seed,
                   {ft_c.out, pretrained ? &pretrained->student : nullptr, nullptr});
    } else if (*dec) {
      auto rc = load_config(dec_c);
      if (!dec_task.empty()) rc.set("finetune.task", dec_task);
      const auto ctx = RunContext::from(rc, &std::cerr);
      if (beams.empty()) beams.push_back(ctx.cfg.beam);
      for (auto b : beams)
        if (b < 1) throw ConfigError("--beam must be >= 1");
      auto state = load_checkpoint<float>(dec_ckpt);
      const auto corpus = Corpus::load(ctx.cfg.data_dir);
      const auto split = make_split(corpus.size(), ctx.cfg);
      prepare_out_dir(dec_c.out, ctx.resolved_text);
      nlohmann::json sweep = nlohmann::json::array();
      for (auto b : beams) {
        const auto rep = evaluate(ctx, ctx.cfg.finetune, corpus, split.test, state.student, b, dec_c.out,
                                  "beam" + std::to_string(b));
        sweep.push_back({{"beam", b}, {"ter", rep.ter}});
        std::cout << "beam " << b << " ter " << rep.ter << "\n";
      }
      binio::write_file_atomic(join_path(dec_c.out, "sweep.json"), sweep.dump(2) + "\n");
    } else if (*topk) {
      auto rc = load_config(topk_c);
      if (!ks.empty()) {
        std::string list;
        for (auto k : ks) list += (list.empty() ? "" : ",") + std::to_string(k);
        rc.set("ablate.top_k", list);
      }
      const auto ctx = RunContext::from(rc, &std::cerr);
      const auto corpus = Corpus::load(ctx.cfg.data_dir);
      const auto rows = ablate_topk(ctx, corpus, topk_c.out);
      std::cout << topk_csv(rows);
    } else if (*cmp) {
      const auto ctx = RunContext::from(load_config(cmp_c), &std::cerr);
      const auto corpus = Corpus::load(ctx.cfg.data_dir);
      const auto rows = compare_av_a(ctx, corpus, cmp_c.out);
      std::cout << compare_csv(rows);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
