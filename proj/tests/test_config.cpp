#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "avd2v/config.hpp"
#include "tiny_run.hpp"

using namespace avd2v;

namespace {

TEST(Config, DefaultsResolve) {
  const auto c = ResolvedConfig::from(RunConfig{});
  EXPECT_EQ(c.pretrain.model.encoder.n_blocks, 3u);
  EXPECT_EQ(c.pretrain.model.encoder.dim, 64u);
  EXPECT_EQ(c.pretrain.updates, 2000u);
  EXPECT_EQ(c.finetune.updates, 1000u);
  EXPECT_EQ(c.label_fraction, 0.1);
  EXPECT_EQ(c.pretrain.ema.tau_start, 0.999);
  EXPECT_EQ(c.pretrain.ema.tau_end, 0.99999);
  EXPECT_EQ(c.pretrain.ema.anneal_steps, 100000u);
  EXPECT_EQ(c.pretrain.model.mask_prob_percent, 50.0);
  EXPECT_EQ(c.pretrain.model.mask_length, 10u);
  EXPECT_EQ(c.pretrain.student.p_av.start, 1.0);
  EXPECT_EQ(c.pretrain.student.p_av.end, 0.25);
}

TEST(Config, ParsesCommentsAndWhitespace) {
  const auto rc = RunConfig::parse("# header\n  model.dim = 32 # inline\n\nmodel.n_heads=2\n");
  EXPECT_EQ(rc.raw("model.dim"), "32");
  EXPECT_EQ(rc.raw("model.n_heads"), "2");
  const auto again = RunConfig::parse(rc.dump());
  EXPECT_EQ(again.dump(), rc.dump());
}

TEST(Config, CollectsEveryProblemBeforeFailing) {
  try {
    RunConfig::parse("model.dim = 32\nbogus.key = 1\nno equals sign\nother.bad = 2\n", "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3 configuration error"), std::string::npos) << msg;
    EXPECT_NE(msg.find("x.cfg:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("x.cfg:3"), std::string::npos) << msg;
  }
  RunConfig rc;
  rc.set("model.dim", "abc");
  rc.set("model.dropout", "x");
  rc.set("decode.length_norm", "maybe");
  try {
    ResolvedConfig::from(rc);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("3 configuration error"), std::string::npos) << e.what();
  }
}

TEST(Config, SemanticChecks) {
  auto expect_error = [](const std::string& key, const std::string& value, const std::string& needle) {
    RunConfig rc;
    rc.set(key, value);
    try {
      ResolvedConfig::from(rc);
      ADD_FAILURE() << key << "=" << value << " accepted";
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("model.n_heads", "5", "divisible");
  expect_error("targets.top_k", "4", "top_k");
  expect_error("data.batch_frames", "50", "batch_frames");
  expect_error("corpus.audio_rate", "2", "audio_stack");
  expect_error("decoder.vocab_size", "10", "vocab_size");
  expect_error("student.p_av.start", "1.5", "student");
  expect_error("finetune.freeze_steps", "2000", "freeze_steps");
  expect_error("ablate.top_k", "1,9", "ablate.top_k");
  expect_error("finetune.task", "ocr", "unknown task");
  EXPECT_THROW(RunConfig{}.set("nope", "1"), ConfigError);
}

TEST(Config, TinyConfigResolves) { EXPECT_NO_THROW(avd2v::testing::tiny_resolved()); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(AVD2V_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const auto dir = std::filesystem::temp_directory_path() / "avd2v_cli_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto cfg = (dir / "tiny.cfg").string();
  {
    std::ofstream out(cfg);
    out << avd2v::testing::tiny_run_config().dump();
    out << "data.dir = " << (dir / "corpus").string() << "\n";
    out << "pretrain.updates = 2\nfinetune.updates = 2\nfinetune.warmup = 1\n";
  }
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("pretrain"), 2);
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "x").string() + " --set model.dim=abc"), 2);
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "corpus").string() + " --config " + cfg), 0);
  EXPECT_EQ(run_cli("pretrain --out " + (dir / "pre").string() + " --config " + cfg), 0);
  EXPECT_EQ(run_cli("finetune --task asr --out " + (dir / "ft").string() + " --config " + cfg), 2);
  EXPECT_EQ(run_cli("finetune --task asr --out " + (dir / "ft").string() + " --config " + cfg + " " +
                    (dir / "pre" / "checkpoint.bin").string()),
            0);
  EXPECT_EQ(run_cli("decode --task asr --beam 1,2 --out " + (dir / "dec").string() + " --config " + cfg + " " +
                    (dir / "ft" / "checkpoint.bin").string()),
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "dec" / "sweep.json"));
  EXPECT_EQ(run_cli("decode --out " + (dir / "dec").string() + " --config " + cfg + " " + (dir / "nothing.bin").string()),
            4);
  EXPECT_EQ(run_cli("pretrain --out " + (dir / "pre2").string() + " --config " + cfg + " --set data.dir=" +
                    (dir / "missing").string()),
            4);
}

}  // namespace
