#include "spanlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

namespace spanlab {
namespace {

namespace fs = std::filesystem;

TrainRunConfig small_run(const char* preset = "spanbert") {
  Json j = preset_json(preset);
  j["model"]["hidden_dim"] = 16;
  j["model"]["num_layers"] = 1;
  j["model"]["num_heads"] = 2;
  j["model"]["ffn_dim"] = 32;
  j["model"]["sbo_pos_dim"] = 8;
  j["model"]["sbo_hidden_dim"] = 16;
  j["model"]["max_positions"] = 32;
  j["n_max"] = 32;
  j["batch_size"] = 4;
  j["schedule"] = {{"warmup_steps", 2}, {"peak_lr", 1e-3}, {"total_steps", 6}};
  j["log_every"] = 2;
  return train_config_from_json(j);
}

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spanlab_train_" + name);
  fs::remove_all(dir);
  return dir.string();
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

TEST(Data, LoadsCorpusAndSchemeAnnotations) {
  TrainRunConfig cfg = small_run();
  const PretrainData d = load_pretrain_data(cfg);
  EXPECT_EQ(d.docs.size(), 10u);
  EXPECT_EQ(d.vocab.size(), 200);
  EXPECT_EQ(d.spans_for(MaskingScheme::kGeometricSpan), nullptr);

  cfg.masking.scheme = MaskingScheme::kNamedEntity;
  const PretrainData e = load_pretrain_data(cfg);
  ASSERT_NE(e.spans_for(MaskingScheme::kNamedEntity), nullptr);
  std::size_t total = 0;
  for (const auto& doc : *e.spans_for(MaskingScheme::kNamedEntity)) total += doc.size();
  EXPECT_GT(total, 0u);

  cfg.data.corpus = "/nonexistent/corpus.txt";
  EXPECT_THROW(load_pretrain_data(cfg), std::exception);
}

TEST(Stream, DeterministicAndEpochKeyed) {
  const TrainRunConfig cfg = small_run();
  const PretrainData data = load_pretrain_data(cfg);
  ExampleStream a(cfg, data), b(cfg, data);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a.next().input_ids, b.next().input_ids);

  const MaskedBatch e0 = mask_epoch(cfg, data, 0);
  const MaskedBatch e0_again = mask_epoch(cfg, data, 0);
  const MaskedBatch e1 = mask_epoch(cfg, data, 1);
  ASSERT_EQ(e0.size(), e1.size());
  std::size_t same = 0;
  for (std::size_t i = 0; i < e0.size(); ++i) {
    EXPECT_EQ(e0[i].input_ids, e0_again[i].input_ids);
    same += e0[i].input_ids == e1[i].input_ids;
  }
  EXPECT_LT(same, e0.size() / 4) << "dynamic masking: a new mask every epoch";
}

TEST(Stream, CoversEveryUnitOncePerEpoch) {
  const TrainRunConfig cfg = small_run();
  const PretrainData data = load_pretrain_data(cfg);
  ExampleStream s(cfg, data);
  const std::size_t n = s.units_in_epoch();
  ASSERT_GT(n, 10u);
  std::multiset<std::vector<int>> seen;
  const MaskedBatch reference = mask_epoch(cfg, data, 0);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(s.epoch(), 0u);
    seen.insert(s.next().input_ids);
  }
  for (const auto& ex : reference) EXPECT_EQ(seen.count(ex.input_ids), 1u);
  s.next();
  EXPECT_EQ(s.epoch(), 1u);
  EXPECT_EQ(s.consumed(), n + 1);
}

TEST(Stream, BiSequenceUnitsCarryLabels) {
  TrainRunConfig cfg = small_run("bert-baseline");
  const PretrainData data = load_pretrain_data(cfg);
  ExampleStream s(cfg, data);
  const MaskedBatch batch = s.next_batch(200);
  std::size_t positive = 0;
  for (const auto& ex : batch) {
    ASSERT_TRUE(ex.nsp_label.has_value());
    positive += *ex.nsp_label;
    EXPECT_EQ(std::count(ex.input_ids.begin(), ex.input_ids.end(), data.vocab.specials().sep), 2);
  }
  EXPECT_GT(positive, 60u);
  EXPECT_LT(positive, 140u);
}

TEST(Metrics, LineHasAllKeys) {
  MetricsRecord r;
  r.step = 10;
  r.lr = 0.5;
  r.losses.mlm_sum = 4.0;
  r.losses.mlm_count = 2;
  r.tokens = 99;
  const Json j = Json::parse(metrics_line(r, {true, false, false}));
  for (const char* key : {"step", "lr", "mlm_loss", "sbo_loss", "nsp_loss", "total_loss", "tokens", "tokens_per_sec"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["mlm_loss"], 2.0);
  EXPECT_TRUE(j["sbo_loss"].is_null());
  EXPECT_TRUE(j["tokens_per_sec"].is_null());
  r.tokens_per_sec = 12.5;
  EXPECT_EQ(Json::parse(metrics_line(r, {true, false, false}))["tokens_per_sec"], 12.5);
}

TEST(ModelConfig, ResolvedFromVocabularyAndMasking) {
  TrainRunConfig cfg = small_run();
  cfg.model.vocab_size = 0;
  cfg.masking.l_max = 7;
  const PretrainData data = load_pretrain_data(cfg);
  const ModelConfig m = resolve_model_config(cfg, data.vocab);
  EXPECT_EQ(m.vocab_size, data.vocab.size());
  EXPECT_EQ(m.sbo_max_span, 7);
  cfg.model.vocab_size = 123;
  EXPECT_THROW(resolve_model_config(cfg, data.vocab), ValidationError);
}

TEST(Pretrain, IdenticalRunsProduceIdenticalLogs) {
  const TrainRunConfig cfg = small_run();
  const PretrainData data = load_pretrain_data(cfg);
  const std::string a = fresh_dir("a"), b = fresh_dir("b");
  const PretrainResult ra = pretrain(cfg, data, {a, {}, std::nullopt});
  const PretrainResult rb = pretrain(cfg, data, {b, {}, std::nullopt});
  EXPECT_EQ(ra.steps_run, 6);
  EXPECT_EQ(read_file(a + "/metrics.jsonl"), read_file(b + "/metrics.jsonl"));
  EXPECT_EQ(read_file(a + "/checkpoint/weights.bin"), read_file(b + "/checkpoint/weights.bin"));
  const auto lines = lines_of(a + "/metrics.jsonl");
  ASSERT_EQ(lines.size(), 3u) << "steps 2, 4, 6";
  EXPECT_EQ(Json::parse(lines.back())["step"], 6);

  TrainRunConfig other = cfg;
  other.seed = cfg.seed + 1;
  const PretrainResult rc = pretrain(other, data);
  EXPECT_NE(ra.log.back().losses.total(), rc.log.back().losses.total());
}

TEST(Pretrain, LossDecreasesOnTinyData) {
  TrainRunConfig cfg = small_run();
  cfg.schedule = {20, 5e-3, 300};
  cfg.batch_size = 16;
  cfg.log_every = 30;
  cfg.model.dropout_rate = 0.0;
  const PretrainData data = load_pretrain_data(cfg);
  const PretrainResult r = pretrain(cfg, data);
  ASSERT_GE(r.log.size(), 2u);
  EXPECT_LT(r.log.back().losses.total(), 0.85 * r.log.front().losses.total());
  for (const auto& rec : r.log) {
    EXPECT_GT(rec.losses.mlm_count, 0u);
    EXPECT_EQ(rec.losses.sbo_count, rec.losses.mlm_count);
    EXPECT_EQ(rec.losses.nsp_count, 0u);
  }
}

TEST(Pretrain, CheckpointResumesStreamState) {
  TrainRunConfig cfg = small_run();
  cfg.checkpoint_every = 3;
  const PretrainData data = load_pretrain_data(cfg);
  const std::string dir = fresh_dir("ckpt");
  pretrain(cfg, data, {dir, {}, std::nullopt});
  const LoadedCheckpoint ck = load_checkpoint(dir + "/checkpoint");
  EXPECT_EQ(ck.meta.step, 6);
  EXPECT_EQ(ck.meta.rng_state["examples_consumed"], 6 * 4);
  EXPECT_EQ(ck.meta.rng_state["seed"], cfg.seed);
  EXPECT_EQ(train_config_from_json(ck.meta.run_config).schedule.total_steps, 6);
}

TEST(Pretrain, DivergenceAbortsAndKeepsLastCheckpoint) {
  TrainRunConfig cfg = small_run();
  cfg.checkpoint_every = 1;
  cfg.clip_norm = 0.0;
  cfg.schedule = {1, 1e30, 10};
  const PretrainData data = load_pretrain_data(cfg);
  const std::string dir = fresh_dir("diverge");
  try {
    pretrain(cfg, data, {dir, {}, std::nullopt});
    FAIL() << "expected divergence";
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos) << e.what();
  }
  const LoadedCheckpoint ck = load_checkpoint(dir + "/checkpoint");
  EXPECT_GE(ck.meta.step, 1);
  EXPECT_LT(ck.meta.step, 10);
}

TEST(Pretrain, StopsEarlyBelowThreshold) {
  TrainRunConfig cfg = small_run();
  cfg.schedule = {2, 1e-3, 40};
  const PretrainData data = load_pretrain_data(cfg);
  const PretrainResult r = pretrain(cfg, data, {"", {}, 1e9});
  EXPECT_EQ(r.steps_run, 2);
}

TEST(Evaluate, EvalModeIsRepeatable) {
  const TrainRunConfig cfg = small_run();
  const PretrainData data = load_pretrain_data(cfg);
  Model<float> model(resolve_model_config(cfg, data.vocab));
  model.init(1);
  const LossBreakdown a = evaluate_pretrain(model, cfg, data, 3);
  const LossBreakdown b = evaluate_pretrain(model, cfg, data, 3);
  EXPECT_EQ(a.total(), b.total());
  EXPECT_NEAR(a.mlm_mean(), std::log(200.0), 0.5) << "untrained model is near uniform";
}

}  // namespace
}  // namespace spanlab
