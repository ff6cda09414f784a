#include "spanlab/model.hpp"

#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "spanlab/evalsuite.hpp"

namespace spanlab {
namespace {

ModelConfig tiny_config() { return ModelConfig{50, 16, 2, 2, 32, 32, 8, 16, 10, 0.1, 0.02, true}; }

// Independent softmax cross-entropy in long double.
double oracle_ce(const std::vector<double>& logits, int target) {
  long double z = 0.0L;
  long double m = logits[0];
  for (double x : logits) m = std::max<long double>(m, x);
  for (double x : logits) z += std::exp(static_cast<long double>(x) - m);
  return static_cast<double>(m + std::log(z) - logits[static_cast<std::size_t>(target)]);
}

MaskedBatch batch_for(const ModelConfig& m, Objectives o, std::uint64_t seed) {
  GradCheckConfig g;
  g.model = m;
  g.objectives = o;
  g.batch = 3;
  g.body_len = 22;
  g.seed = seed;
  return grad_check_batch(g, 0);
}

void zero_params(Model<double>& model) {
  for (auto& t : model.params().tensors) t.setZero();
}

TEST(ModelConfig, ReportsEveryProblem) {
  ModelConfig c = tiny_config();
  EXPECT_TRUE(c.problems().empty());
  c.vocab_size = 3;
  c.hidden_dim = 15;
  c.dropout_rate = 1.0;
  EXPECT_EQ(c.problems().size(), 3u);
  EXPECT_THROW(Model<float>{c}, ValidationError);
}

TEST(Objectives, ParseAndPrint) {
  EXPECT_EQ(parse_objectives("mlm,sbo"), (Objectives{true, true, false}));
  EXPECT_EQ(parse_objectives("nsp, mlm"), (Objectives{true, false, true}));
  EXPECT_EQ(to_string(Objectives{true, true, true}), "mlm,sbo,nsp");
  EXPECT_THROW(parse_objectives("mlm,qa"), ValidationError);
}

TEST(CrossEntropy, MatchesOracleAndIsStable) {
  const std::vector<std::vector<double>> cases{{0.0, 0.0, 0.0}, {1.0, -2.0, 0.5, 3.0}, {1000.0, 999.0, -1000.0}};
  for (const auto& logits : cases) {
    for (int t = 0; t < static_cast<int>(logits.size()); ++t) {
      EXPECT_NEAR(cross_entropy(logits, t), oracle_ce(logits, t), 1e-12);
    }
  }
  EXPECT_TRUE(std::isfinite(cross_entropy(std::vector<double>{1e4, -1e4}, 1)));
}

TEST(Heads, ZeroWeightsGiveUniformLosses) {
  for (int vocab : {50, 200}) {
    ModelConfig c = tiny_config();
    c.vocab_size = vocab;
    Model<double> model(c);
    model.init(3);
    zero_params(model);
    const auto batch = batch_for(c, {true, true, true}, 11);
    const auto r = model.loss(batch, {true, true, true}, EvalOptions{false, nullptr, false});
    EXPECT_NEAR(r.breakdown.mlm_mean(), std::log(static_cast<double>(vocab)), 1e-12);
    EXPECT_NEAR(r.breakdown.sbo_mean(), std::log(static_cast<double>(vocab)), 1e-12);
    EXPECT_NEAR(r.breakdown.nsp_mean(), std::log(2.0), 1e-12);
    EXPECT_EQ(r.breakdown.nsp_count, batch.size());
  }
}

TEST(Heads, MlmLogitsAreTiedAndLinear) {
  ModelConfig c = tiny_config();
  c.mlm_transform = false;
  Model<double> model(c);
  model.init(4);
  const auto& L = model.layout();
  RowVec<double> h = RowVec<double>::Zero(16);
  EXPECT_TRUE(model.mlm_logits(h).isZero()) << "zero hidden, zero bias";
  EXPECT_EQ(model.mlm_logits(h).size(), 50);

  h(3) = 1.0;
  const RowVec<double> before = model.mlm_logits(h);
  model.params().tensors[static_cast<std::size_t>(L.tok_emb)](17, 3) += 0.5;
  const RowVec<double> after = model.mlm_logits(h);
  for (int v = 0; v < 50; ++v) {
    if (v == 17) {
      EXPECT_NEAR(after(v) - before(v), 0.5, 1e-12);
    } else {
      EXPECT_EQ(after(v), before(v));
    }
  }
}

TEST(Sbo, PositionRowIndexing) {
  Model<float> model(tiny_config());
  // target i=7 in the span starting at s=5 is the third position: row index 2 (p_3)
  EXPECT_EQ(model.sbo_position_row(5, 7), 2u);
  EXPECT_EQ(model.sbo_position_row(5, 5), 0u);
  EXPECT_EQ(model.sbo_position_row(5, 14), 9u);
  EXPECT_EQ(model.sbo_position_row(5, 40), 9u);
  EXPECT_THROW(model.sbo_position_row(5, 4), ValidationError);
}

TEST(Sbo, DependsOnlyOnBoundariesAndPosition) {
  ModelConfig c = tiny_config();
  Model<double> model(c);
  model.init(5);
  const std::vector<int> ids{2, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 3};
  EncoderOutput<double> out = model.encode(ids);
  const SpanMask span{5, 8, Replacement::kMask, {14, 15, 16, 17}, false};
  const RowVec<double> y = model.sbo_vector(out, span, 7);
  EXPECT_EQ(y.size(), 16);

  EncoderOutput<double> perturbed = out;
  for (int r : {0, 1, 2, 3, 5, 6, 7, 8, 10, 11, 12}) perturbed.hidden.row(r).array() += 3.25;
  const RowVec<double> y2 = model.sbo_vector(perturbed, span, 7);
  EXPECT_EQ(std::memcmp(y.data(), y2.data(), sizeof(double) * 16), 0);

  EncoderOutput<double> left = out;
  left.hidden(4, 0) += 0.1;
  EXPECT_GT((model.sbo_vector(left, span, 7) - y).norm(), 0.0);
  EncoderOutput<double> right = out;
  right.hidden(9, 0) += 0.1;
  EXPECT_GT((model.sbo_vector(right, span, 7) - y).norm(), 0.0);

  // the position row selects p_3; editing any other row changes nothing
  const int pos = model.layout().sbo_pos;
  model.params().tensors[static_cast<std::size_t>(pos)].row(0).array() += 1.0;
  EXPECT_EQ((model.sbo_vector(out, span, 7) - y).norm(), 0.0);
  model.params().tensors[static_cast<std::size_t>(pos)].row(2).array() += 1.0;
  EXPECT_GT((model.sbo_vector(out, span, 7) - y).norm(), 0.0);

  EXPECT_THROW(model.sbo_vector(out, SpanMask{0, 2, Replacement::kMask, {}, false}, 1), ValidationError);
  EXPECT_THROW(model.sbo_vector(out, SpanMask{10, 12, Replacement::kMask, {}, false}, 11), ValidationError);
  EXPECT_THROW(model.sbo_vector(out, span, 9), ValidationError);
}

TEST(Loss, MlmTermIndependentOfSbo) {
  Model<double> model(tiny_config());
  model.init(6);
  const auto batch = batch_for(tiny_config(), {true, true, false}, 2);
  const auto a = model.loss(batch, {true, false, false}, EvalOptions{false, nullptr, false});
  const auto b = model.loss(batch, {true, true, false}, EvalOptions{false, nullptr, false});
  EXPECT_EQ(a.breakdown.mlm_sum, b.breakdown.mlm_sum);
  EXPECT_EQ(a.breakdown.sbo_sum, 0.0);
  EXPECT_EQ(b.breakdown.sbo_count, b.breakdown.mlm_count) << "one SBO term per masked token";
  EXPECT_NEAR(b.total(), b.breakdown.mlm_mean() + b.breakdown.sbo_mean(), 1e-12);
}

TEST(Loss, DisabledSboLeavesItsGradientsZero) {
  Model<double> model(tiny_config());
  model.init(7);
  const auto batch = batch_for(tiny_config(), {true, false, false}, 3);
  const auto r = model.loss(batch, {true, false, false});
  const auto& L = model.layout();
  for (int idx : {L.sbo_pos, L.sbo_w1, L.sbo_b1, L.sbo_w2, L.sbo_b2, L.sbo_bias, L.nsp_w, L.nsp_b}) {
    EXPECT_TRUE(r.grads.tensors[static_cast<std::size_t>(idx)].isZero()) << r.grads.specs[static_cast<std::size_t>(idx)].name;
  }
  EXPECT_GT(r.grads.tensors[static_cast<std::size_t>(L.tok_emb)].norm(), 0.0);
}

TEST(Loss, NothingMaskedGivesZeroLossAndGradients) {
  GradCheckConfig g;
  g.objectives = {true, true, false};
  g.zero_masked = true;
  const auto batch = grad_check_batch(g, 0);
  Model<double> model(g.model);
  model.init(8);
  const auto r = model.loss(batch, g.objectives);
  EXPECT_EQ(r.total(), 0.0);
  for (const auto& t : r.grads.tensors) EXPECT_TRUE(t.isZero());
}

TEST(Loss, FloatAgreesWithDouble) {
  Model<double> md(tiny_config());
  md.init(9);
  const Model<float> mf = md.cast<float>();
  const auto batch = batch_for(tiny_config(), {true, true, true}, 4);
  const auto rd = md.loss(batch, {true, true, true});
  const auto rf = mf.loss(batch, {true, true, true});
  EXPECT_NEAR(rf.total(), rd.total(), 1e-4 * rd.total());
  for (std::size_t t = 0; t < rd.grads.size(); ++t) {
    const double scale = std::max(1e-3, rd.grads.tensors[t].cwiseAbs().maxCoeff());
    EXPECT_LT((rf.grads.tensors[t].cast<double>() - rd.grads.tensors[t]).cwiseAbs().maxCoeff(), 1e-3 * scale)
        << rd.grads.specs[t].name;
  }
}

TEST(Encoder, DropoutOnlyInTrainMode) {
  Model<double> model(tiny_config());
  model.init(10);
  const std::vector<int> ids{2, 9, 8, 7, 6, 3};
  const auto a = model.encode(ids);
  const auto b = model.encode(ids);
  EXPECT_EQ(a.hidden, b.hidden);
  Rng r1(1), r2(1), r3(2);
  const auto t1 = model.encode(ids, EvalOptions{true, &r1, false});
  const auto t2 = model.encode(ids, EvalOptions{true, &r2, false});
  const auto t3 = model.encode(ids, EvalOptions{true, &r3, false});
  EXPECT_EQ(t1.hidden, t2.hidden);
  EXPECT_NE(t1.hidden, t3.hidden);
  EXPECT_NE(t1.hidden, a.hidden);

  ModelConfig no_drop = tiny_config();
  no_drop.dropout_rate = 0.0;
  Model<double> plain(no_drop);
  plain.init(10);
  Rng r4(1);
  EXPECT_EQ(plain.encode(ids, EvalOptions{true, &r4, false}).hidden, plain.encode(ids).hidden);
  EXPECT_THROW(model.encode(std::vector<int>(40, 5)), ValidationError) << "longer than max_positions";
}

TEST(Init, SeededAndShaped) {
  Model<float> a(tiny_config()), b(tiny_config()), c(tiny_config());
  a.init(1);
  b.init(1);
  c.init(2);
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t t = 0; t < a.params().size(); ++t) EXPECT_EQ(a.params().tensors[t], b.params().tensors[t]);
  EXPECT_NE(a.params().tensors[0], c.params().tensors[0]);
  const auto& L = a.layout();
  EXPECT_EQ(a.params().tensors[static_cast<std::size_t>(L.tok_emb)].rows(), 50);
  EXPECT_EQ(a.params().tensors[static_cast<std::size_t>(L.sbo_pos)].rows(), 10);
  EXPECT_EQ(a.params().tensors[static_cast<std::size_t>(L.sbo_w1)].rows(), 2 * 16 + 8) << "h0 width";
  EXPECT_TRUE(a.params().tensors[static_cast<std::size_t>(L.emb_ln_g)].isOnes());
  EXPECT_TRUE(a.params().tensors[static_cast<std::size_t>(L.nsp_b)].isZero());
  for (std::size_t t = 0; t < a.params().size(); ++t) {
    const auto& name = a.params().specs[t].name;
    const bool norm_or_bias = name.find(".bias") != std::string::npos || name.find("ln.") != std::string::npos ||
                              name.find(".ln") != std::string::npos;
    EXPECT_EQ(a.params().specs[t].decay, !norm_or_bias) << name;
  }
}

// Independent central differences on sampled coordinates.
TEST(Gradients, SampledCoordinatesMatchFiniteDifferences) {
  Model<double> model(tiny_config());
  model.init(12);
  const Objectives all{true, true, true};
  const auto batch = batch_for(tiny_config(), all, 5);
  const auto analytic = model.loss(batch, all);
  Rng pick(99);
  for (std::size_t t = 0; t < model.params().size(); ++t) {
    auto& tensor = model.params().tensors[t];
    for (int k = 0; k < 3; ++k) {
      const auto idx = static_cast<Eigen::Index>(pick() % static_cast<std::uint64_t>(tensor.size()));
      double& x = tensor.data()[idx];
      const double saved = x;
      const double h = 1e-5;
      x = saved + h;
      const double up = model.loss(batch, all, EvalOptions{false, nullptr, false}).total();
      x = saved - h;
      const double down = model.loss(batch, all, EvalOptions{false, nullptr, false}).total();
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.grads.tensors[t].data()[idx];
      EXPECT_NEAR(a, numeric, 1e-6 + 1e-4 * std::abs(numeric)) << model.params().specs[t].name << "[" << idx << "]";
    }
  }
}

TEST(Gradients, FullTinyModel) {
  GradCheckConfig g;
  const auto r = grad_check(g);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor;
  EXPECT_GT(r.coordinates, 1000u);
}

TEST(Gradients, TrainModeWithFixedDropout) {
  GradCheckConfig g;
  g.train_mode = true;
  g.seed = 77;
  const auto r = grad_check(g);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor;
}

TEST(Gradients, HeadsOnlyModelIsNearExact) {
  GradCheckConfig g;
  g.model.num_layers = 0;
  g.model.mlm_transform = false;
  g.model.init_std = 1.0;
  g.model.dropout_rate = 0.0;
  const auto r = grad_check(g);
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst_tensor;
}

TEST(Gradients, ZeroMaskedBatchIsAllZero) {
  GradCheckConfig g;
  g.objectives = {true, true, false};
  g.zero_masked = true;
  const auto r = grad_check(g);
  for (const auto& t : r.tensors) {
    EXPECT_EQ(t.max_abs_analytic, 0.0) << t.name;
    EXPECT_EQ(t.max_abs_numeric, 0.0) << t.name;
  }
}

TEST(SpanSelect, BestSpanHonoursRegionAndLength) {
  SpanLogits<double> l;
  l.start = RowVec<double>::Zero(8);
  l.end = RowVec<double>::Zero(8);
  l.start(3) = 2.0;
  l.end(6) = 2.0;
  EXPECT_EQ(best_span(l, IndexRange{2, 8}, 30), (std::pair<std::size_t, std::size_t>{3, 6}));
  EXPECT_EQ(best_span(l, IndexRange{2, 8}, 2), (std::pair<std::size_t, std::size_t>{3, 3}))
      << "ties keep the earliest span";
  EXPECT_EQ(best_span(l, IndexRange{4, 8}, 30), (std::pair<std::size_t, std::size_t>{4, 6}));
  l.start(0) = 10.0;
  EXPECT_EQ(best_span(l, IndexRange{2, 8}, 30), (std::pair<std::size_t, std::size_t>{0, 0})) << "[CLS] wins";
  l.start(0) = 0.0;
  l.end(2) = 5.0;
  EXPECT_EQ(best_span(l, IndexRange{2, 8}, 30), (std::pair<std::size_t, std::size_t>{2, 2})) << "end never precedes start";
}

TEST(SpanSelect, LossGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny_config();
  Model<double> model(c);
  model.init(13);
  std::vector<SpanSelectExample> batch{{{2, 10, 3, 11, 12, 13, 14, 3}, 4, 5, {3, 7}}, {{2, 10, 3, 20, 21, 3}, 0, 0, {3, 5}}};
  const auto analytic = model.span_select_loss(batch);
  EXPECT_EQ(analytic.count, 2u);
  for (int idx : {model.layout().qa_start_w, model.layout().qa_end_b, model.layout().tok_emb}) {
    auto& tensor = model.params().tensors[static_cast<std::size_t>(idx)];
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(tensor.size(), 8); ++k) {
      double& x = tensor.data()[k];
      const double saved = x;
      x = saved + 1e-5;
      const double up = model.span_select_loss(batch, EvalOptions{false, nullptr, false}).mean();
      x = saved - 1e-5;
      const double down = model.span_select_loss(batch, EvalOptions{false, nullptr, false}).mean();
      x = saved;
      const double numeric = (up - down) / 2e-5;
      EXPECT_NEAR(analytic.grads.tensors[static_cast<std::size_t>(idx)].data()[k], numeric, 1e-7 + 1e-5 * std::abs(numeric));
    }
  }
}

}  // namespace
}  // namespace spanlab
