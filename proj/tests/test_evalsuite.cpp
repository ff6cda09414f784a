#include "spanlab/evalsuite.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

namespace spanlab {
namespace {

namespace fs = std::filesystem;


std::vector<TokenSequence> toy_docs(Vocabulary& vocab) {
  const auto texts = read_documents(std::string(SPANLAB_SOURCE_DIR) + "/data/toy_corpus.txt");
  vocab = build_vocab(texts, 200);
  return tokenize_documents(texts, vocab);
}

TEST(MaskStats, DefaultsPassAndCsvIsConsistent) {
  Vocabulary vocab;
  const auto docs = toy_docs(vocab);
  MaskStatsConfig cfg;
  cfg.draws = 300000;
  cfg.blocks = 2000;
  const auto sample = stats_blocks(docs, 510, 64, vocab.specials());
  for (const auto& b : sample) ASSERT_EQ(b.maskable_count(), 510u);
  const MaskStatsReport r = mask_stats(cfg, sample, vocab);
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.expected_budget, 76u);
  EXPECT_NEAR(r.analytic_mean, 3.797097504, 1e-8);
  std::uint64_t total = 0;
  for (auto c : r.histogram) total += c;
  EXPECT_EQ(total, cfg.draws);
  EXPECT_DOUBLE_EQ(r.boundary_observability, 1.0);
  EXPECT_DOUBLE_EQ(r.homogeneity, 1.0);

  std::istringstream csv(r.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "length,analytic_p,empirical_p,count");
  int rows = 0;
  while (std::getline(csv, line) && line[0] != '#') ++rows;
  EXPECT_EQ(rows, 10);
  EXPECT_NE(r.to_csv().find("# result: PASS"), std::string::npos);
  EXPECT_EQ(r.to_json()["checks"].size(), r.checks.size());
}

TEST(MaskStats, GeometricPOneConcentratesOnOne) {
  Vocabulary vocab;
  const auto docs = toy_docs(vocab);
  MaskStatsConfig cfg;
  cfg.masking.geo_p = 1.0;
  cfg.draws = 10000;
  cfg.blocks = 100;
  const MaskStatsReport r = mask_stats(cfg, stats_blocks(docs, 510, 8, vocab.specials()), vocab);
  EXPECT_EQ(r.histogram[0], cfg.draws);
  EXPECT_DOUBLE_EQ(r.empirical_p(1), 1.0);
  EXPECT_DOUBLE_EQ(r.empirical_mean, 1.0);
}

TEST(MaskStats, RejectsTooFewDraws) {
  Vocabulary vocab;
  const auto docs = toy_docs(vocab);
  MaskStatsConfig cfg;
  cfg.draws = 100;
  EXPECT_THROW(mask_stats(cfg, stats_blocks(docs, 50, 2, vocab.specials()), vocab), ValidationError);
}

TEST(Invariants, EverySuitePasses) {
  InvariantOptions opts;
  opts.batches = 100;
  opts.pairs = 20000;
  for (const auto& suite : invariant_suites()) {
    if (suite == "all") continue;
    const auto checks = assert_invariants(suite, opts);
    EXPECT_FALSE(checks.empty()) << suite;
    for (const auto& c : checks) EXPECT_TRUE(c.passed) << suite << ": " << c.name << " " << c.detail;
  }
  EXPECT_THROW(assert_invariants("nonsense"), ValidationError);
}

TEST(GradCheckReport, CoversEveryTensor) {
  GradCheckConfig g;
  g.model.num_layers = 1;
  const GradCheckReport r = grad_check(g);
  Model<double> m(g.model);
  EXPECT_EQ(r.tensors.size(), m.params().size());
  EXPECT_EQ(r.coordinates, m.params().num_scalars());
  double worst = 0.0;
  for (const auto& t : r.tensors) worst = std::max(worst, t.rel_error);
  EXPECT_EQ(worst, r.max_rel_error);
  g.step = 0.0;
  EXPECT_THROW(grad_check(g), ValidationError);
}

TEST(MeanStd, SampleStandardDeviation) {
  const MeanStd a = mean_std({2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0});
  EXPECT_DOUBLE_EQ(a.mean, 5.0);
  EXPECT_NEAR(a.stdev, std::sqrt(32.0 / 7.0), 1e-12);
  EXPECT_EQ(a.n, 8u);
  EXPECT_DOUBLE_EQ(mean_std({3.0}).stdev, 0.0);
  EXPECT_EQ(mean_std({}).n, 0u);
}

Json tiny_base() {
  Json j = preset_json("spanbert");
  j["model"]["hidden_dim"] = 16;
  j["model"]["num_layers"] = 1;
  j["model"]["num_heads"] = 2;
  j["model"]["ffn_dim"] = 32;
  j["model"]["sbo_pos_dim"] = 8;
  j["model"]["sbo_hidden_dim"] = 16;
  j["model"]["max_positions"] = 32;
  j["n_max"] = 32;
  j["batch_size"] = 4;
  j["schedule"] = {{"warmup_steps", 1}, {"peak_lr", 1e-3}, {"total_steps", 3}};
  j["log_every"] = 1;
  return j;
}

TEST(Ablation, BookkeepingAndFailureIsolation) {
  AblationConfig cfg;
  cfg.rows = grid_preset("table8", tiny_base());
  Json broken = cfg.rows[1].config;
  broken["data"]["corpus"] = "/nonexistent/corpus.txt";
  cfg.rows.push_back({"Broken", broken});
  cfg.seeds = {1, 2};
  cfg.task.num_train = 8;
  cfg.task.num_dev = 4;
  cfg.task.context_len = 10;
  cfg.finetune.learning_rates = {1e-3};
  cfg.finetune.batch_sizes = {4};
  cfg.finetune.epochs = 1;
  std::vector<std::string> progress;
  const AblationReport r = run_ablation(cfg, [&](const std::string& m) { progress.push_back(m); });
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(progress.size(), 8u);
  for (std::size_t i = 0; i < 3; ++i) {
    ASSERT_EQ(r.rows[i].runs.size(), 2u);
    for (const auto& run : r.rows[i].runs) EXPECT_TRUE(run.ok) << run.error;
    EXPECT_EQ(r.dev_em(i).n, 2u);
  }
  EXPECT_EQ(r.rows[0].objectives, "mlm,nsp");
  EXPECT_EQ(r.rows[2].pipeline, "1seq");
  for (const auto& run : r.rows[3].runs) {
    EXPECT_FALSE(run.ok);
    EXPECT_NE(run.error.find("nonexistent"), std::string::npos) << run.error;
  }
  EXPECT_EQ(r.dev_em(3).n, 0u);
  EXPECT_EQ(r.rows[0].runs[0].seed, 1u);
  EXPECT_GT(r.rows[2].runs[0].final_losses.sbo_count, 0u);
  EXPECT_EQ(r.rows[1].runs[0].final_losses.sbo_count, 0u);

  std::istringstream csv(r.to_csv());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 1u + 4 * 2);
  EXPECT_NE(r.summary_table().find("Span Masking (1seq) + SBO"), std::string::npos);
  std::istringstream jl(r.to_jsonl());
  while (std::getline(jl, line)) EXPECT_TRUE(Json::accept(line));

  const AblationReport again = run_ablation(cfg);
  EXPECT_EQ(again.to_csv(), r.to_csv()) << "identical configs give identical results";
}

TEST(Determinism, TwoRunsAreByteIdentical) {
  const TrainRunConfig cfg = train_config_from_json(tiny_base());
  const fs::path dir = fs::temp_directory_path() / "spanlab_determinism";
  fs::remove_all(dir);
  const CheckResult c = determinism_check(cfg, dir.string());
  EXPECT_TRUE(c.passed) << c.detail;
}

TEST(Overfit, ReportsStepsWhenThresholdUnreached) {
  TrainRunConfig cfg = train_config_from_json(tiny_base());
  const CheckResult c = overfit_check(cfg, 1e-6, 600.0);
  EXPECT_FALSE(c.passed);
  EXPECT_FALSE(c.detail.empty());
}

}  // namespace
}  // namespace spanlab
