#include "spanlab/config.hpp"

#include <algorithm>

#include <gtest/gtest.h>

namespace spanlab {
namespace {

bool mentions(const std::vector<std::string>& problems, const std::string& needle) {
  return std::any_of(problems.begin(), problems.end(),
                     [&](const std::string& p) { return p.find(needle) != std::string::npos; });
}

std::vector<std::string> problems_of(const Json& j) {
  try {
    train_config_from_json(j);
  } catch (const ValidationError& e) {
    return e.problems();
  }
  return {};
}

TEST(Presets, AllParseAndValidate) {
  for (const auto& name : preset_names()) {
    const TrainRunConfig cfg = train_config_from_json(preset_json(name));
    EXPECT_TRUE(cfg.problems().empty()) << name;
  }
  EXPECT_THROW(preset_json("bert-large"), ValidationError);
}

TEST(Presets, Contents) {
  const auto span = train_config_from_json(preset_json("spanbert"));
  EXPECT_EQ(span.pipeline, Pipeline::kSingleSequence);
  EXPECT_EQ(span.objectives, (Objectives{true, true, false}));
  EXPECT_EQ(span.masking.scheme, MaskingScheme::kGeometricSpan);
  EXPECT_DOUBLE_EQ(span.masking.geo_p, 0.2);
  EXPECT_EQ(span.masking.l_max, 10);
  EXPECT_DOUBLE_EQ(span.masking.budget_rate, 0.15);
  EXPECT_DOUBLE_EQ(span.optimizer.beta1, 0.9);
  EXPECT_DOUBLE_EQ(span.optimizer.beta2, 0.999);
  EXPECT_DOUBLE_EQ(span.optimizer.epsilon, 1e-8);
  EXPECT_DOUBLE_EQ(span.optimizer.weight_decay, 0.1);
  EXPECT_DOUBLE_EQ(span.model.dropout_rate, 0.1);

  const auto bert = train_config_from_json(preset_json("bert-baseline"));
  EXPECT_EQ(bert.pipeline, Pipeline::kBiSequence);
  EXPECT_EQ(bert.objectives, (Objectives{true, false, true}));
  EXPECT_EQ(bert.masking.scheme, MaskingScheme::kSubword);

  const auto paper = train_config_from_json(preset_json("paper-scale"));
  EXPECT_EQ(paper.schedule.warmup_steps, 10000);
  EXPECT_DOUBLE_EQ(paper.schedule.peak_lr, 1e-4);
  EXPECT_EQ(paper.schedule.total_steps, 2400000);
  EXPECT_EQ(paper.batch_size, 256);
  EXPECT_EQ(paper.n_max, 512);
  EXPECT_EQ(paper.model.hidden_dim, 1024);
  EXPECT_EQ(paper.model.num_layers, 24);
  EXPECT_EQ(paper.model.num_heads, 16);
}

TEST(RunConfig, SingleSequenceRejectsNsp) {
  Json j = preset_json("spanbert");
  j["objectives"] = {"mlm", "nsp"};
  const auto p = problems_of(j);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_TRUE(mentions(p, "2seq"));
}

TEST(RunConfig, EveryProblemReportedAtOnce) {
  Json j = preset_json("spanbert");
  j["masking"]["geo_p"] = 1.5;
  j["model"]["num_heads"] = 5;
  j["batch_size"] = 0;
  j["schedule"]["warmup_steps"] = 9999999;
  j["n_max"] = "long";
  j["bogus"] = 1;
  j["masking"]["colour"] = "red";
  const auto p = problems_of(j);
  EXPECT_TRUE(mentions(p, "geo_p"));
  EXPECT_TRUE(mentions(p, "num_heads"));
  EXPECT_TRUE(mentions(p, "batch_size"));
  EXPECT_TRUE(mentions(p, "warmup_steps"));
  EXPECT_TRUE(mentions(p, "n_max"));
  EXPECT_TRUE(mentions(p, "bogus"));
  EXPECT_TRUE(mentions(p, "colour"));
}

TEST(RunConfig, LinguisticSchemesNeedAnnotations) {
  Json j = preset_json("bert-baseline");
  j["masking"]["scheme"] = "noun_phrase";
  j["data"]["noun_phrase_annotations"] = "";
  EXPECT_TRUE(mentions(problems_of(j), "noun_phrase_annotations"));
  j["masking"]["scheme"] = "named_entity";
  EXPECT_TRUE(problems_of(j).empty());
}

TEST(RunConfig, JsonRoundTrip) {
  Json j = preset_json("overfit");
  j["seed"] = 99;
  const TrainRunConfig a = train_config_from_json(j);
  const TrainRunConfig b = train_config_from_json(to_json(a));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(b.seed, 99u);
  EXPECT_EQ(b.model.hidden_dim, 64);
}

TEST(Overrides, DottedPathsAndTypes) {
  Json j = preset_json("spanbert");
  apply_override(j, "masking.geo_p=0.4");
  apply_override(j, "objectives=[\"mlm\"]");
  apply_override(j, "pipeline=2seq");
  apply_override(j, "model.hidden_dim=32");
  const TrainRunConfig c = train_config_from_json(j);
  EXPECT_DOUBLE_EQ(c.masking.geo_p, 0.4);
  EXPECT_EQ(c.objectives, (Objectives{true, false, false}));
  EXPECT_EQ(c.pipeline, Pipeline::kBiSequence);
  EXPECT_EQ(c.model.hidden_dim, 32);
  EXPECT_THROW(apply_override(j, "no_equals_sign"), ValidationError);

  apply_override(j, "masking.typo=3");
  EXPECT_TRUE(mentions(problems_of(j), "typo"));
}

TEST(Grids, TableRows) {
  const Json base = preset_json("spanbert");
  const auto t7 = grid_preset("table7", base);
  ASSERT_EQ(t7.size(), 5u);
  std::vector<std::string> schemes;
  for (const auto& r : t7) {
    const TrainRunConfig c = train_config_from_json(r.config);
    EXPECT_EQ(c.pipeline, Pipeline::kBiSequence);
    EXPECT_EQ(c.objectives, (Objectives{true, false, true}));
    schemes.emplace_back(to_string(c.masking.scheme));
  }
  EXPECT_EQ(schemes, (std::vector<std::string>{"subword", "whole_word", "named_entity", "noun_phrase", "geometric_span"}));

  const auto t8 = grid_preset("table8", base);
  ASSERT_EQ(t8.size(), 3u);
  EXPECT_EQ(train_config_from_json(t8[0].config).objectives, (Objectives{true, false, true}));
  EXPECT_EQ(train_config_from_json(t8[1].config).objectives, (Objectives{true, false, false}));
  EXPECT_EQ(train_config_from_json(t8[2].config).objectives, (Objectives{true, true, false}));
  for (const auto& r : t8) EXPECT_EQ(train_config_from_json(r.config).model.hidden_dim, 64) << "rows share the model";
  EXPECT_THROW(grid_preset("table9", base), ValidationError);
}

TEST(Pipeline, Names) {
  EXPECT_EQ(parse_pipeline("1seq"), Pipeline::kSingleSequence);
  EXPECT_EQ(parse_pipeline("2seq"), Pipeline::kBiSequence);
  EXPECT_EQ(to_string(Pipeline::kBiSequence), "2seq");
  EXPECT_THROW(parse_pipeline("3seq"), ValidationError);
}

}  // namespace
}  // namespace spanlab
