#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string output;
};

const std::string kCorpus = std::string(SPANLAB_SOURCE_DIR) + "/data/toy_corpus.txt";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spanlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CliRun run(const std::string& args, const std::string& env = "") {
  const fs::path log = fs::temp_directory_path() / "spanlab_cli_output.txt";
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(SPANLAB_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTinyModel =
    " --set model.hidden_dim=16 --set model.num_layers=1 --set model.num_heads=2 --set model.ffn_dim=32"
    " --set model.sbo_hidden_dim=16 --set model.sbo_pos_dim=8 --set model.max_positions=32 --set n_max=32"
    " --set batch_size=4 --set log_every=2";

TEST(Cli, HelpListsSubcommandsAndFlags) {
  const CliRun top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"build-vocab", "pretrain", "finetune", "mask-stats", "grad-check", "ablate",
                          "inspect-checkpoint", "check-invariants"}) {
    EXPECT_NE(top.output.find(sub), std::string::npos) << sub;
  }
  const CliRun pre = run("pretrain --help");
  EXPECT_EQ(pre.code, 0);
  for (const char* flag : {"--config", "--preset", "--set", "--objectives", "--pipeline", "--seed", "--out"}) {
    EXPECT_NE(pre.output.find(flag), std::string::npos) << flag;
  }
}

TEST(Cli, UnknownFlagIsAnError) {
  const CliRun r = run("pretrain --learning-rate 3 --out " + scratch("unknown").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("learning-rate"), std::string::npos) << r.output;
  EXPECT_EQ(run("frobnicate").code, 1);
}

TEST(Cli, MissingCorpusIsAValidationError) {
  const CliRun r = run("build-vocab --corpus /nonexistent/corpus.txt --size 100 --out " + scratch("missing").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("/nonexistent/corpus.txt"), std::string::npos) << r.output;
}

TEST(Cli, SingleSequenceWithNspIsRejected) {
  const CliRun r = run("pretrain --pipeline 1seq --objectives nsp --out " + scratch("nsp").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("2seq"), std::string::npos) << r.output;
}

TEST(Cli, BadConfigReportsEveryProblem) {
  const CliRun r = run("pretrain --set masking.geo_p=2 --set batch_size=0 --set nonsense=1 --out " + scratch("bad").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("geo_p"), std::string::npos);
  EXPECT_NE(r.output.find("batch_size"), std::string::npos);
  EXPECT_NE(r.output.find("nonsense"), std::string::npos);
}

TEST(Cli, BuildVocabIsByteIdenticalOnRerun) {
  const fs::path a = scratch("vocab_a"), b = scratch("vocab_b");
  ASSERT_EQ(run("build-vocab --corpus " + kCorpus + " --size 150 --out " + a.string()).code, 0);
  ASSERT_EQ(run("build-vocab --corpus " + kCorpus + " --size 150 --out " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "vocab.txt"), slurp(b / "vocab.txt"));
  EXPECT_EQ(slurp(a / "counts.tsv"), slurp(b / "counts.tsv"));
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["command"], "build-vocab");
  EXPECT_TRUE(manifest.contains("version"));
}

TEST(Cli, PretrainFinetuneAndInspect) {
  const fs::path dir = scratch("pipeline");
  const CliRun pre = run("pretrain --quiet --steps 4 --set schedule.warmup_steps=1" + kTinyModel + " --out " +
                      (dir / "pre").string());
  ASSERT_EQ(pre.code, 0) << pre.output;
  EXPECT_TRUE(fs::exists(dir / "pre" / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "pre" / "checkpoint" / "weights.bin"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "pre" / "manifest.json"));
  EXPECT_EQ(manifest["config"]["schedule"]["total_steps"], 4);
  EXPECT_TRUE(manifest["timings_sec"].contains("throughput_tokens_per_sec"));

  const CliRun inspect = run("inspect-checkpoint " + (dir / "pre" / "checkpoint").string());
  EXPECT_EQ(inspect.code, 0);
  EXPECT_NE(inspect.output.find("embeddings.token"), std::string::npos) << inspect.output;

  const CliRun ft = run("finetune --checkpoint " + (dir / "pre" / "checkpoint").string() +
                     " --lrs 1e-3 --batch-sizes 8 --epochs 1 --task-set num_train=16 --task-set num_dev=8"
                     " --task-set context_len=12 --out " + (dir / "ft").string());
  ASSERT_EQ(ft.code, 0) << ft.output;
  const auto report = nlohmann::json::parse(slurp(dir / "ft" / "finetune.json"));
  EXPECT_EQ(report["grid"].size(), 1u);
  EXPECT_EQ(report["train_examples"], 16);

  EXPECT_EQ(run("inspect-checkpoint " + (dir / "nothing").string()).code, 2);
}

TEST(Cli, SeedFromEnvironment) {
  const fs::path a = scratch("seed_a"), b = scratch("seed_b");
  const std::string common = "pretrain --quiet --steps 2 --set schedule.warmup_steps=1" + kTinyModel + " --out ";
  ASSERT_EQ(run(common + a.string(), "SPANLAB_SEED=5").code, 0);
  ASSERT_EQ(run(common + b.string() + " --seed 5").code, 0);
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(nlohmann::json::parse(slurp(a / "manifest.json"))["seed"], 5);
}

TEST(Cli, MaskStatsPasses) {
  const fs::path dir = scratch("mask");
  const CliRun r = run("mask-stats --draws 200000 --blocks 2000 --out " + dir.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("length,analytic_p,empirical_p,count"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "mask_stats.json"));
  EXPECT_EQ(run("mask-stats --draws 10").code, 1) << "too few draws";
}

TEST(Cli, GradCheckPasses) {
  const CliRun r = run("grad-check --layers 2 --hidden 16");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("max relative error"), std::string::npos);
}

TEST(Cli, CheckInvariantsSuite) {
  const CliRun r = run("check-invariants --suite schedule");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
  EXPECT_EQ(run("check-invariants --suite nonsense").code, 1);
}

}  // namespace
