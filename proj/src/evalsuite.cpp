#include "spanlab/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "spanlab/optim.hpp"

namespace spanlab {

namespace {

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

CheckResult check(std::string name, bool passed, std::string detail) {
  return CheckResult{std::move(name), passed, std::move(detail)};
}

std::string default_corpus() { return std::string(SPANLAB_SOURCE_DIR) + "/data/toy_corpus.txt"; }

}  // namespace

bool all_passed(const std::vector<CheckResult>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

// ---------------------------------------------------------------- mask statistics

double MaskStatsReport::empirical_p(int length) const {
  if (length < 1 || length > l_max || draws == 0) return 0.0;
  return static_cast<double>(histogram[static_cast<std::size_t>(length - 1)]) / static_cast<double>(draws);
}

std::string MaskStatsReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "length,analytic_p,empirical_p,count\n";
  for (int k = 1; k <= l_max; ++k) {
    os << k << ',' << analytic_pmf[static_cast<std::size_t>(k - 1)] << ',' << empirical_p(k) << ','
       << histogram[static_cast<std::size_t>(k - 1)] << '\n';
  }
  os << "# draws=" << draws << " empirical_mean=" << empirical_mean << " analytic_mean=" << analytic_mean
     << " tv=" << tv_distance << " chi_square=" << chi_square << '\n';
  os << "# blocks=" << blocks << " budget=" << expected_budget << " degraded=" << degraded
     << " budget_compliance=" << budget_compliance << " spans=" << spans << " mask=" << frac_mask
     << " random=" << frac_random << " keep=" << frac_keep << " homogeneity=" << homogeneity
     << " boundary_observability=" << boundary_observability << '\n';
  for (const auto& c : checks) os << "# " << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  os << "# result: " << (passed() ? "PASS" : "FAIL") << '\n';
  return os.str();
}

Json MaskStatsReport::to_json() const {
  Json checks_json = Json::array();
  for (const auto& c : checks) checks_json.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  return Json{{"l_max", l_max},
              {"draws", draws},
              {"histogram", histogram},
              {"analytic_pmf", analytic_pmf},
              {"empirical_mean", empirical_mean},
              {"analytic_mean", analytic_mean},
              {"tv_distance", tv_distance},
              {"chi_square", chi_square},
              {"blocks", blocks},
              {"expected_budget", expected_budget},
              {"degraded", degraded},
              {"budget_compliance", budget_compliance},
              {"spans", spans},
              {"frac_mask", frac_mask},
              {"frac_random", frac_random},
              {"frac_keep", frac_keep},
              {"homogeneity", homogeneity},
              {"boundary_observability", boundary_observability},
              {"checks", checks_json},
              {"passed", passed()}};
}

std::vector<Block> stats_blocks(const std::vector<TokenSequence>& docs, std::size_t maskable, std::size_t count,
                                const SpecialIds& specials) {
  std::vector<int> ids;
  std::vector<bool> starts;
  for (const auto& d : docs) {
    ids.insert(ids.end(), d.ids.begin(), d.ids.end());
    starts.insert(starts.end(), d.word_start.begin(), d.word_start.end());
  }
  if (ids.empty() || maskable == 0) throw ValidationError("stats_blocks needs a non-empty corpus and block size");
  std::vector<Block> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    TokenSequence body;
    body.offset = (b * maskable) % ids.size();
    for (std::size_t k = 0; k < maskable; ++k) {
      const std::size_t at = (body.offset + k) % ids.size();
      body.ids.push_back(ids[at]);
      body.word_start.push_back(k == 0 || starts[at]);
    }
    out.push_back(make_block(body, specials));
  }
  return out;
}

MaskStatsReport mask_stats(const MaskStatsConfig& cfg, const std::vector<Block>& sample, const Vocabulary& vocab) {
  cfg.masking.validate();
  if (cfg.draws < 10'000) throw ValidationError("mask_stats needs at least 10^4 draws");
  MaskStatsReport r;
  r.l_max = cfg.masking.l_max;
  r.draws = cfg.draws;
  r.analytic_pmf = span_length_pmf(cfg.masking);
  r.analytic_mean = span_length_mean(cfg.masking);
  r.histogram.assign(static_cast<std::size_t>(r.l_max), 0);

  Rng len_rng = keyed_rng(cfg.seed, {stream::kEval, 1});
  double sum = 0.0;
  for (std::uint64_t i = 0; i < cfg.draws; ++i) {
    const int k = sample_span_length(cfg.masking, len_rng);
    ++r.histogram[static_cast<std::size_t>(k - 1)];
    sum += k;
  }
  r.empirical_mean = sum / static_cast<double>(cfg.draws);
  for (int k = 1; k <= r.l_max; ++k) {
    const double p = r.analytic_pmf[static_cast<std::size_t>(k - 1)];
    r.tv_distance += std::abs(r.empirical_p(k) - p);
    const double expected = p * static_cast<double>(cfg.draws);
    if (expected > 0.0) {
      const double diff = static_cast<double>(r.histogram[static_cast<std::size_t>(k - 1)]) - expected;
      r.chi_square += diff * diff / expected;
    }
  }
  r.tv_distance *= 0.5;

  // masking statistics on the block sample
  UnigramSampler unigram(vocab);
  const SpecialIds& sp = vocab.specials();
  const std::vector<TokenSpan> no_annotations;
  const auto* ann = needs_annotations(cfg.masking.scheme) ? &no_annotations : nullptr;
  std::size_t compliant = 0;
  std::uint64_t n_mask = 0, n_random = 0, n_keep = 0, homogeneous = 0, observable = 0;
  r.blocks = sample.empty() ? 0 : cfg.blocks;
  for (std::size_t b = 0; b < r.blocks; ++b) {
    const Block& block = sample[b % sample.size()];
    Rng rng = keyed_rng(cfg.seed, {stream::kEval, 2, b});
    const MaskedExample ex = sample_mask(block, cfg.masking, ann, unigram, sp, rng);
    r.expected_budget = ex.budget;
    if (ex.degraded) {
      ++r.degraded;
    } else if (ex.masked_count() == ex.budget) {
      ++compliant;
    }
    std::set<std::size_t> masked;
    for (const auto& t : ex.mlm_targets) masked.insert(t.position);
    for (const auto& s : ex.spans) {
      ++r.spans;
      bool same = true;
      for (std::size_t pos = s.start; pos <= s.end; ++pos) {
        const int id = ex.input_ids[pos];
        const int orig = s.original_ids[pos - s.start];
        switch (s.category) {
          case Replacement::kMask: same = same && id == sp.mask; break;
          case Replacement::kKeep: same = same && id == orig; break;
          case Replacement::kRandom: same = same && !vocab.is_special(id); break;
        }
      }
      switch (s.category) {
        case Replacement::kMask: ++n_mask; break;
        case Replacement::kKeep: ++n_keep; break;
        case Replacement::kRandom: ++n_random; break;
      }
      homogeneous += same ? 1 : 0;
      const bool left_ok = s.start > 0 && masked.count(s.start - 1) == 0;
      const bool right_ok = s.end + 1 < ex.input_ids.size() && masked.count(s.end + 1) == 0;
      observable += left_ok && right_ok ? 1 : 0;
    }
  }
  const std::size_t clean = r.blocks - r.degraded;
  r.budget_compliance = clean ? static_cast<double>(compliant) / static_cast<double>(clean) : 0.0;
  if (r.spans > 0) {
    const auto n = static_cast<double>(r.spans);
    r.frac_mask = static_cast<double>(n_mask) / n;
    r.frac_random = static_cast<double>(n_random) / n;
    r.frac_keep = static_cast<double>(n_keep) / n;
    r.homogeneity = static_cast<double>(homogeneous) / n;
    r.boundary_observability = static_cast<double>(observable) / n;
  }

  const double p1 = r.analytic_pmf[0];
  r.checks.push_back(check("span_length_mean", std::abs(r.empirical_mean - r.analytic_mean) < 0.01,
                           "empirical " + fmt(r.empirical_mean) + " vs analytic " + fmt(r.analytic_mean) + " (tol 0.01)"));
  r.checks.push_back(check("span_length_tv", r.tv_distance < 0.005, "TV " + fmt(r.tv_distance) + " (< 0.005)"));
  r.checks.push_back(check("span_length_p1", std::abs(r.empirical_p(1) - p1) < 0.002,
                           "P(1) " + fmt(r.empirical_p(1)) + " vs " + fmt(p1) + " (tol 0.002)"));
  if (r.blocks > 0) {
    r.checks.push_back(check("budget_exact", r.degraded == 0 && r.budget_compliance == 1.0,
                             std::to_string(compliant) + "/" + std::to_string(r.blocks) + " blocks at budget " +
                                 std::to_string(r.expected_budget) + ", " + std::to_string(r.degraded) + " degraded"));
    const bool fractions_ok = std::abs(r.frac_mask - cfg.masking.mask_prob) <= 0.01 &&
                              std::abs(r.frac_random - cfg.masking.random_prob) <= 0.01 &&
                              std::abs(r.frac_keep - cfg.masking.keep_prob) <= 0.01;
    r.checks.push_back(check("replacement_fractions", fractions_ok,
                             fmt(r.frac_mask, 4) + "/" + fmt(r.frac_random, 4) + "/" + fmt(r.frac_keep, 4) + " over " +
                                 std::to_string(r.spans) + " spans (tol 0.01)"));
    r.checks.push_back(check("span_homogeneity", r.homogeneity == 1.0, fmt(100.0 * r.homogeneity) + "% of spans"));
    r.checks.push_back(check("boundary_observability", r.boundary_observability == 1.0,
                             fmt(100.0 * r.boundary_observability) + "% of spans"));
  }
  return r;
}

// ---------------------------------------------------------------- gradient check

namespace {

Vocabulary synthetic_vocab(int size) {
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  std::vector<std::int64_t> counts(kNumSpecials, 0);
  for (int i = kNumSpecials; i < size; ++i) {
    tokens.push_back("t" + std::to_string(i));
    counts.push_back(1);
  }
  return Vocabulary(std::move(tokens), std::move(counts));
}

TokenSequence random_sequence(std::size_t n, int vocab_size, Rng& rng) {
  std::uniform_int_distribution<int> pick(kNumSpecials, vocab_size - 1);
  TokenSequence seq;
  for (std::size_t i = 0; i < n; ++i) {
    seq.ids.push_back(pick(rng));
    seq.word_start.push_back(true);
  }
  return seq;
}

}  // namespace

MaskedBatch grad_check_batch(const GradCheckConfig& cfg, std::uint64_t trial) {
  const Vocabulary vocab = synthetic_vocab(cfg.model.vocab_size);
  UnigramSampler unigram(vocab);
  Rng rng = keyed_rng(cfg.seed, {stream::kEval, 3, trial});
  MaskingConfig mcfg;
  mcfg.l_max = cfg.model.sbo_max_span;
  MaskedBatch batch;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    Block block;
    if (cfg.objectives.nsp) {
      const std::size_t a = std::max<std::size_t>(1, cfg.body_len / 2);
      const std::size_t c = std::max<std::size_t>(1, cfg.body_len - a);
      BiSequencePair pair{random_sequence(a, vocab.size(), rng), random_sequence(c, vocab.size(), rng), b % 2 == 0};
      block = make_pair_block(pair, vocab.specials());
    } else {
      block = make_block(random_sequence(cfg.body_len, vocab.size(), rng), vocab.specials());
    }
    if (cfg.zero_masked) {
      MaskedExample ex;
      ex.input_ids = block.tokens.ids;
      ex.nsp_label = block.is_next;
      batch.push_back(std::move(ex));
    } else {
      batch.push_back(sample_mask(block, mcfg, nullptr, unigram, vocab.specials(), rng));
    }
  }
  return batch;
}

GradCheckReport grad_check(const GradCheckConfig& cfg) {
  cfg.model.validate();
  if (!(cfg.step > 0.0)) throw ValidationError("grad_check step must be positive");
  if (cfg.trials < 1) throw ValidationError("grad_check trials must be >= 1");
  if (cfg.body_len + 3 > static_cast<std::size_t>(cfg.model.max_positions)) {
    throw ValidationError("grad_check body_len does not fit model.max_positions");
  }
  Model<double> model(cfg.model);
  model.init(cfg.seed);
  auto& params = model.params();

  GradCheckReport report;
  for (const auto& s : params.specs) report.tensors.push_back(TensorGradError{s.name, 0.0, 0.0, 0.0});
  const std::uint64_t dropout_seed = derive_seed(cfg.seed, {stream::kDropout});

  for (int trial = 0; trial < cfg.trials; ++trial) {
    const MaskedBatch batch = grad_check_batch(cfg, static_cast<std::uint64_t>(trial));
    auto eval = [&](bool grads) {
      Rng rng(dropout_seed);
      return model.loss(batch, cfg.objectives, EvalOptions{cfg.train_mode, &rng, grads});
    };
    const LossResult<double> analytic = eval(true);
    if (!std::isfinite(analytic.total()) || !analytic.grads.all_finite()) {
      throw NonFiniteError("grad_check", "non-finite loss or gradient in grad_check");
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
      auto& tensor = params.tensors[t];
      const auto& g = analytic.grads.tensors[t];
      double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
      for (Eigen::Index k = 0; k < tensor.size(); ++k) {
        double& x = tensor.data()[k];
        const double saved = x;
        x = saved + cfg.step;
        const double up = eval(false).total();
        x = saved - cfg.step;
        const double down = eval(false).total();
        x = saved;
        const double numeric = (up - down) / (2.0 * cfg.step);
        if (!std::isfinite(numeric)) throw NonFiniteError("grad_check", "non-finite finite difference");
        const double a = g.data()[k];
        max_diff = std::max(max_diff, std::abs(a - numeric));
        max_a = std::max(max_a, std::abs(a));
        max_n = std::max(max_n, std::abs(numeric));
        ++report.coordinates;
      }
      // the floor keeps tensors with an identically zero gradient (attention
      // key biases shift every score of a row equally) from dividing noise by noise
      const double scale = std::max({max_a, max_n, 1e-10});
      const double rel = max_diff / scale;
      auto& entry = report.tensors[t];
      entry.rel_error = std::max(entry.rel_error, rel);
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, max_a);
      entry.max_abs_numeric = std::max(entry.max_abs_numeric, max_n);
    }
  }
  for (const auto& e : report.tensors) {
    if (e.rel_error >= report.max_rel_error) {
      report.max_rel_error = e.rel_error;
      report.worst_tensor = e.name;
    }
  }
  return report;
}

// ---------------------------------------------------------------- invariants

namespace {

struct ToyData {
  Vocabulary vocab;
  std::vector<TokenSequence> docs;
};

ToyData load_toy(const InvariantOptions& opts) {
  const auto texts = read_documents(opts.corpus.empty() ? default_corpus() : opts.corpus);
  if (texts.size() < 2) throw ValidationError("invariant checks need a corpus with at least two documents");
  ToyData d;
  d.vocab = build_vocab(texts, std::max(200, min_vocab_size(texts)));
  d.docs = tokenize_documents(texts, d.vocab);
  return d;
}

std::vector<CheckResult> masking_invariants(const InvariantOptions& opts) {
  const ToyData toy = load_toy(opts);
  const auto blocks = segment_blocks(toy.docs, 128, toy.vocab.specials());
  const MaskingConfig cfg;
  UnigramSampler unigram(toy.vocab);
  std::size_t examples = 0, spans = 0, observable = 0, homogeneous = 0, aligned = 0, at_budget = 0, degraded = 0,
              disjoint = 0, in_segment = 0;
  for (std::size_t b = 0; b < opts.batches; ++b) {
    for (std::size_t i = 0; i < opts.batch_size; ++i) {
      const std::size_t unit = (b * opts.batch_size + i) % blocks.size();
      const Block& block = blocks[unit];
      Rng rng = keyed_rng(opts.seed, {stream::kMask, b, i});
      const MaskedExample ex = sample_mask(block, cfg, nullptr, unigram, toy.vocab.specials(), rng);
      ++examples;
      if (ex.degraded) ++degraded;
      if (!ex.degraded && ex.masked_count() == ex.budget) ++at_budget;
      std::vector<bool> masked(ex.input_ids.size(), false);
      bool overlap = false;
      for (const auto& s : ex.spans) {
        for (std::size_t p = s.start; p <= s.end; ++p) {
          overlap = overlap || masked[p];
          masked[p] = true;
        }
      }
      disjoint += overlap ? 0 : 1;
      for (const auto& s : ex.spans) {
        ++spans;
        const bool ok_left = s.start > 0 && !masked[s.start - 1];
        const bool ok_right = s.end + 1 < masked.size() && !masked[s.end + 1];
        observable += ok_left && ok_right ? 1 : 0;
        aligned += block.tokens.word_start[s.start] ? 1 : 0;
        const auto seg = block.segment_of(s.start);
        in_segment += seg && seg->contains(s.end) ? 1 : 0;
        bool same = true;
        for (std::size_t p = s.start; p <= s.end; ++p) {
          const int id = ex.input_ids[p];
          if (s.category == Replacement::kMask) same = same && id == toy.vocab.specials().mask;
          if (s.category == Replacement::kKeep) same = same && id == s.original_ids[p - s.start];
          if (s.category == Replacement::kRandom) same = same && !toy.vocab.is_special(id);
        }
        homogeneous += same ? 1 : 0;
      }
    }
  }
  const auto frac = [](std::size_t a, std::size_t b) { return std::to_string(a) + "/" + std::to_string(b); };
  return {
      check("masking.boundary_observability", observable == spans, frac(observable, spans) + " spans"),
      check("masking.span_homogeneity", homogeneous == spans, frac(homogeneous, spans) + " spans"),
      check("masking.word_aligned_starts", aligned == spans, frac(aligned, spans) + " spans"),
      check("masking.spans_within_segment", in_segment == spans, frac(in_segment, spans) + " spans"),
      check("masking.spans_disjoint", disjoint == examples, frac(disjoint, examples) + " examples"),
      check("masking.budget_exact", at_budget + degraded == examples && degraded == 0,
            frac(at_budget, examples) + " at budget, " + std::to_string(degraded) + " degraded"),
  };
}

ModelConfig tiny_model(int vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.hidden_dim = 16;
  m.num_layers = 1;
  m.num_heads = 2;
  m.ffn_dim = 32;
  m.max_positions = 128;
  m.sbo_pos_dim = 8;
  m.sbo_hidden_dim = 16;
  m.dropout_rate = 0.0;
  return m;
}

std::vector<CheckResult> sbo_invariants(const InvariantOptions& opts) {
  const ToyData toy = load_toy(opts);
  const auto blocks = segment_blocks(toy.docs, 128, toy.vocab.specials());
  Model<float> model(tiny_model(toy.vocab.size()));
  model.init(opts.seed);
  UnigramSampler unigram(toy.vocab);
  const MaskingConfig mcfg;
  Rng rng = keyed_rng(opts.seed, {stream::kEval, 4});
  std::normal_distribution<float> noise(0.0f, 1.0f);

  std::size_t tested = 0, identical = 0, sensitive = 0;
  for (std::size_t attempt = 0; tested < opts.sbo_spans && attempt < 100 * opts.sbo_spans; ++attempt) {
    const Block& block = blocks[attempt % blocks.size()];
    const MaskedExample ex = sample_mask(block, mcfg, nullptr, unigram, toy.vocab.specials(), rng);
    if (ex.spans.empty()) continue;
    const SpanMask& span = ex.spans[attempt % ex.spans.size()];
    const auto out = model.encode(ex.input_ids);
    const std::size_t i = span.start + attempt % span.length();
    const RowVec<float> before = model.sbo_logits(out, span, i);
    EncoderOutput<float> perturbed = out;
    for (Eigen::Index r = 0; r < perturbed.hidden.rows(); ++r) {
      const auto row = static_cast<std::size_t>(r);
      if (row == span.start - 1 || row == span.end + 1) continue;
      for (Eigen::Index c = 0; c < perturbed.hidden.cols(); ++c) perturbed.hidden(r, c) += noise(rng);
    }
    const RowVec<float> after = model.sbo_logits(perturbed, span, i);
    const bool same = before.size() == after.size() &&
                      std::memcmp(before.data(), after.data(), sizeof(float) * static_cast<std::size_t>(before.size())) == 0;
    identical += same ? 1 : 0;
    // the boundary rows must matter, or the check above is vacuous
    EncoderOutput<float> boundary = out;
    boundary.hidden.row(static_cast<Eigen::Index>(span.start - 1)).array() += 1.0f;
    sensitive += (model.sbo_logits(boundary, span, i) - before).cwiseAbs().maxCoeff() > 0.0f ? 1 : 0;
    ++tested;
  }

  // worked indexing example: span (5, 8), target 7
  bool indexing = model.sbo_position_row(5, 7) == 2;
  {
    Matrix<float> h = Matrix<float>::Zero(12, model.config().hidden_dim);
    for (Eigen::Index r = 0; r < h.rows(); ++r) h.row(r).setConstant(static_cast<float>(r) * 0.1f);
    EncoderOutput<float> out{h};
    SpanMask span;
    span.start = 5;
    span.end = 8;
    const RowVec<float> base = model.sbo_vector(out, span, 7);
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      EncoderOutput<float> moved = out;
      moved.hidden.row(r).array() += 1.0f;
      const bool changed = (model.sbo_vector(moved, span, 7) - base).cwiseAbs().maxCoeff() > 0.0f;
      indexing = indexing && (changed == (r == 4 || r == 9));
    }
  }
  return {
      check("sbo.locality", tested == opts.sbo_spans && identical == tested,
            std::to_string(identical) + "/" + std::to_string(tested) + " spans bit-identical under perturbation"),
      check("sbo.boundary_sensitivity", sensitive == tested,
            std::to_string(sensitive) + "/" + std::to_string(tested) + " spans react to the left boundary"),
      check("sbo.indexing", indexing, "s=5 e=8 i=7 reads rows 4 and 9 and relative position 3 (row index 2)"),
  };
}

std::vector<CheckResult> loss_invariants(const InvariantOptions& opts) {
  std::vector<CheckResult> out;
  for (int v : {50, 200, 30522}) {
    std::vector<double> zeros(static_cast<std::size_t>(v), 0.0);
    const double ce = cross_entropy(zeros, v / 2);
    out.push_back(check("loss.uniform_ce_v" + std::to_string(v), std::abs(ce - std::log(double(v))) < 1e-9,
                        fmt(ce, 17) + " vs ln " + std::to_string(v)));
  }
  GradCheckConfig g;
  g.seed = opts.seed;
  Model<double> model(g.model);
  model.init(opts.seed);
  auto& p = model.params();
  p.tensors[static_cast<std::size_t>(model.layout().nsp_w)].setZero();
  p.tensors[static_cast<std::size_t>(model.layout().nsp_b)].setZero();
  const MaskedBatch batch = grad_check_batch(g, 0);
  const double nsp = model.loss(batch, Objectives{false, false, true}, EvalOptions{false, nullptr, false})
                         .breakdown.nsp_mean();
  out.push_back(check("loss.nsp_zero_weight", std::abs(nsp - std::log(2.0)) < 1e-9, fmt(nsp, 17) + " vs ln 2"));

  p.tensors[static_cast<std::size_t>(model.layout().tok_emb)].setZero();
  p.tensors[static_cast<std::size_t>(model.layout().mlm_bias)].setZero();
  const double mlm = model.loss(batch, Objectives{true, false, false}, EvalOptions{false, nullptr, false})
                         .breakdown.mlm_mean();
  const double ln_v = std::log(static_cast<double>(g.model.vocab_size));
  out.push_back(check("loss.mlm_zero_embedding", std::abs(mlm - ln_v) < 1e-9,
                      fmt(mlm, 17) + " vs ln " + std::to_string(g.model.vocab_size)));
  return out;
}

std::vector<CheckResult> schedule_invariants() {
  std::vector<CheckResult> out;
  const Schedule paper{10000, 1e-4, 100000};
  out.push_back(check("schedule.start", lr_at(paper, 0) == 0.0, "lr_at(0) = " + fmt(lr_at(paper, 0))));
  out.push_back(check("schedule.peak", lr_at(paper, paper.warmup_steps) == paper.peak_lr,
                      "lr_at(warmup) = " + fmt(lr_at(paper, paper.warmup_steps), 17)));
  out.push_back(check("schedule.end", lr_at(paper, paper.total_steps) == 0.0,
                      "lr_at(total) = " + fmt(lr_at(paper, paper.total_steps))));
  const std::int64_t mid = (paper.warmup_steps + paper.total_steps) / 2;
  out.push_back(check("schedule.decay_midpoint", std::abs(lr_at(paper, mid) - paper.peak_lr / 2) < 1e-12,
                      "lr_at(" + std::to_string(mid) + ") = " + fmt(lr_at(paper, mid), 17)));
  const Schedule small{7, 1.0, 31};
  bool shape = true;
  for (std::int64_t s = 0; s <= small.total_steps; ++s) {
    shape = shape && lr_at(small, s) <= lr_at(small, small.warmup_steps);
    if (s > 0) shape = shape && std::abs(lr_at(small, s) - lr_at(small, s - 1)) <= 1.0 / 7 + 1e-12;
  }
  out.push_back(check("schedule.peak_at_warmup", shape, "maximum at warmup_steps, bounded step changes"));
  return out;
}

std::vector<CheckResult> optimizer_invariants() {
  std::vector<CheckResult> out;
  ParamSet<double> params;
  params.specs = {TensorSpec{"w", {1}, true}};
  params.tensors = {Matrix<double>::Constant(1, 1, 0.5)};
  ParamSet<double> grads = params.zeros_like();
  grads.tensors[0](0, 0) = 1.0;
  AdamWConfig cfg;
  auto state = OptimizerState<double>::zeros_for(params, cfg);
  const double lr = 1e-3;
  optimizer_step(params, grads, state, lr);
  // after one step m_hat = g and v_hat = g^2
  const double expected = 0.5 - lr * (1.0 / (1.0 + cfg.epsilon) + cfg.weight_decay * 0.5);
  out.push_back(check("optimizer.single_step", std::abs(params.tensors[0](0, 0) - expected) < 1e-12,
                      fmt(params.tensors[0](0, 0), 17) + " vs " + fmt(expected, 17)));

  ParamSet<double> frozen;
  frozen.specs = {TensorSpec{"w", {1}, true}};
  frozen.tensors = {Matrix<double>::Constant(1, 1, 0.5)};
  AdamWConfig no_wd = cfg;
  no_wd.weight_decay = 0.0;
  auto s2 = OptimizerState<double>::zeros_for(frozen, no_wd);
  optimizer_step(frozen, frozen.zeros_like(), s2, lr);
  out.push_back(check("optimizer.zero_grad_no_decay", frozen.tensors[0](0, 0) == 0.5, "parameter unchanged"));

  auto s3 = OptimizerState<double>::zeros_for(frozen, cfg);
  optimizer_step(frozen, frozen.zeros_like(), s3, lr);
  out.push_back(check("optimizer.decay_without_grad", frozen.tensors[0](0, 0) == 0.5 - lr * cfg.weight_decay * 0.5,
                      fmt(frozen.tensors[0](0, 0), 17)));

  ParamSet<double> bad = frozen.zeros_like();
  bad.tensors[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
  const double before = frozen.tensors[0](0, 0);
  bool threw = false;
  try {
    optimizer_step(frozen, bad, s3, lr);
  } catch (const NonFiniteError&) {
    threw = true;
  }
  out.push_back(check("optimizer.non_finite_rejected", threw && frozen.tensors[0](0, 0) == before,
                      threw ? "error raised, no update" : "no error"));
  return out;
}

std::vector<CheckResult> nsp_invariants(const InvariantOptions& opts) {
  const ToyData toy = load_toy(opts);
  std::size_t total = 0, positive = 0, contiguous = 0;
  for (std::uint64_t epoch = 0; total < opts.pairs; ++epoch) {
    for (const auto& pair : sample_epoch_pairs(toy.docs, 128, opts.seed, epoch)) {
      if (total == opts.pairs) break;
      ++total;
      if (!pair.is_next) continue;
      ++positive;
      contiguous += pair.x_b.doc_id == pair.x_a.doc_id && pair.x_b.offset == pair.x_a.offset + pair.x_a.size() ? 1 : 0;
    }
  }
  const double frac = total ? static_cast<double>(positive) / static_cast<double>(total) : 0.0;
  return {
      check("nsp.balance", std::abs(frac - 0.5) <= 0.01, "is_next fraction " + fmt(frac) + " over " + std::to_string(total)),
      check("nsp.contiguous_positives", contiguous == positive,
            std::to_string(contiguous) + "/" + std::to_string(positive) + " positive pairs contiguous"),
  };
}

}  // namespace

std::vector<std::string> invariant_suites() { return {"masking", "sbo", "loss", "schedule", "optimizer", "nsp"}; }

std::vector<CheckResult> assert_invariants(const std::string& suite, const InvariantOptions& opts) {
  if (suite == "all") {
    std::vector<CheckResult> out;
    for (const auto& s : invariant_suites()) {
      auto part = assert_invariants(s, opts);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (suite == "masking") return masking_invariants(opts);
  if (suite == "sbo") return sbo_invariants(opts);
  if (suite == "loss") return loss_invariants(opts);
  if (suite == "schedule") return schedule_invariants();
  if (suite == "optimizer") return optimizer_invariants();
  if (suite == "nsp") return nsp_invariants(opts);
  throw ValidationError("unknown invariant suite '" + suite + "'");
}

// ---------------------------------------------------------------- training checks

CheckResult overfit_check(const TrainRunConfig& cfg, double threshold, double max_seconds) {
  const PretrainData data = load_pretrain_data(cfg);
  PretrainOptions opts;
  opts.stop_below = threshold;
  const PretrainResult res = pretrain(cfg, data, opts);
  const double last = res.log.empty() ? INFINITY : res.log.back().losses.total();
  const bool ok = last < threshold && res.wall_seconds < max_seconds;
  return check("overfit", ok,
               "combined loss " + fmt(last) + " after " + std::to_string(res.steps_run) + " steps in " +
                   fmt(res.wall_seconds, 4) + " s (need < " + fmt(threshold) + " within " +
                   std::to_string(cfg.schedule.total_steps) + " steps and " + fmt(max_seconds) + " s)");
}

CheckResult determinism_check(const TrainRunConfig& cfg, const std::string& work_dir) {
  TrainRunConfig c = cfg;
  c.deterministic = true;
  const PretrainData data = load_pretrain_data(c);
  const std::string a = work_dir + "/run_a";
  const std::string b = work_dir + "/run_b";
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  pretrain(c, data, PretrainOptions{a, {}, std::nullopt});
  pretrain(c, data, PretrainOptions{b, {}, std::nullopt});
  std::vector<std::string> differ;
  for (const char* file : {"metrics.jsonl", "checkpoint/weights.bin", "checkpoint/manifest.json"}) {
    if (read_file(a + "/" + file) != read_file(b + "/" + file)) differ.push_back(file);
  }
  std::string detail = differ.empty() ? "metrics.jsonl, weights.bin and manifest.json byte-identical" : "differs:";
  for (const auto& f : differ) detail += " " + f;
  return check("determinism", differ.empty(), detail);
}

// ---------------------------------------------------------------- ablation

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  m.n = values.size();
  if (values.empty()) return m;
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.stdev = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

namespace {

template <class F>
MeanStd row_stat(const AblationRow& row, F metric) {
  std::vector<double> v;
  for (const auto& r : row.runs) {
    if (r.ok) v.push_back(metric(r));
  }
  return mean_std(v);
}

}  // namespace

MeanStd AblationReport::dev_em(std::size_t row) const {
  return row_stat(rows.at(row), [](const AblationRun& r) { return r.best.dev.exact_match; });
}
MeanStd AblationReport::dev_f1(std::size_t row) const {
  return row_stat(rows.at(row), [](const AblationRun& r) { return r.best.dev.f1; });
}
MeanStd AblationReport::train_em(std::size_t row) const {
  return row_stat(rows.at(row), [](const AblationRun& r) { return r.best.train.exact_match; });
}

std::string AblationReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "row,label,scheme,pipeline,objectives,seed,status,mlm_loss,sbo_loss,nsp_loss,best_lr,best_batch,"
        "train_em,dev_em,dev_f1,rejected,error\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    for (const auto& r : row.runs) {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      os << i << ",\"" << row.label << "\"," << row.scheme << ',' << row.pipeline << ",\"" << row.objectives << "\","
         << r.seed << ',' << (r.ok ? "ok" : "failed") << ',' << r.final_losses.mlm_mean() << ','
         << r.final_losses.sbo_mean() << ',' << r.final_losses.nsp_mean() << ',' << r.best.learning_rate << ','
         << r.best.batch_size << ',' << r.best.train.exact_match << ',' << r.best.dev.exact_match << ','
         << r.best.dev.f1 << ',' << r.rejected << ",\"" << err << "\"\n";
    }
  }
  return os.str();
}

std::string AblationReport::to_jsonl() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    for (const auto& r : row.runs) {
      Json j{{"row", i},
             {"label", row.label},
             {"scheme", row.scheme},
             {"pipeline", row.pipeline},
             {"objectives", row.objectives},
             {"seed", r.seed},
             {"ok", r.ok},
             {"error", r.error},
             {"mlm_loss", r.final_losses.mlm_mean()},
             {"sbo_loss", r.final_losses.sbo_mean()},
             {"nsp_loss", r.final_losses.nsp_mean()},
             {"best_lr", r.best.learning_rate},
             {"best_batch", r.best.batch_size},
             {"train_em", r.best.train.exact_match},
             {"train_f1", r.best.train.f1},
             {"dev_em", r.best.dev.exact_match},
             {"dev_f1", r.best.dev.f1},
             {"rejected", r.rejected}};
      os << j.dump() << '\n';
    }
    const auto em = dev_em(i), f1 = dev_f1(i), tem = train_em(i);
    Json summary{{"row", i},           {"label", row.label},   {"summary", true},
                 {"runs_ok", em.n},    {"dev_em_mean", em.mean}, {"dev_em_stdev", em.stdev},
                 {"dev_f1_mean", f1.mean}, {"dev_f1_stdev", f1.stdev}, {"train_em_mean", tem.mean},
                 {"train_em_stdev", tem.stdev}};
    os << summary.dump() << '\n';
  }
  return os.str();
}

std::string AblationReport::summary_table() const {
  std::ostringstream os;
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  os << std::left << std::setw(static_cast<int>(width)) << "Model" << "  " << std::setw(16) << "dev EM"
     << std::setw(16) << "dev F1" << std::setw(16) << "train EM" << "runs\n";
  auto cell = [](const MeanStd& m) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(1) << m.mean << " +- " << m.stdev;
    return c.str();
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto em = dev_em(i);
    os << std::left << std::setw(static_cast<int>(width)) << rows[i].label << "  " << std::setw(16) << cell(em)
       << std::setw(16) << cell(dev_f1(i)) << std::setw(16) << cell(train_em(i)) << em.n << "/"
       << rows[i].runs.size() << '\n';
  }
  return os.str();
}

AblationReport run_ablation(const AblationConfig& cfg, const std::function<void(const std::string&)>& progress) {
  if (cfg.rows.empty()) throw ValidationError("ablation grid has no rows");
  if (cfg.seeds.empty()) throw ValidationError("ablation needs at least one seed");
  if (auto p = cfg.finetune.problems(); !p.empty()) throw ValidationError("invalid finetune config", p);
  AblationReport report;
  report.seeds = cfg.seeds;
  for (const auto& grid_row : cfg.rows) {
    AblationRow row;
    row.label = grid_row.label;
    std::optional<TrainRunConfig> parsed;
    std::string parse_error;
    try {
      parsed = train_config_from_json(grid_row.config);
      row.scheme = std::string(to_string(parsed->masking.scheme));
      row.pipeline = std::string(to_string(parsed->pipeline));
      row.objectives = to_string(parsed->objectives);
    } catch (const std::exception& e) {
      parse_error = e.what();
    }
    for (std::uint64_t seed : cfg.seeds) {
      AblationRun run;
      run.seed = seed;
      if (progress) progress(row.label + " seed " + std::to_string(seed));
      try {
        if (!parsed) throw ValidationError(parse_error);
        TrainRunConfig c = *parsed;
        c.seed = seed;
        const PretrainData data = load_pretrain_data(c);
        const PretrainResult pre = pretrain(c, data);
        if (!pre.log.empty()) run.final_losses = pre.log.back().losses;
        const MarkerTask task = make_marker_task(data.vocab, cfg.task);
        FinetuneConfig ft = cfg.finetune;
        ft.seed = seed;
        const FinetuneResult fr = finetune_span(pre.model, task.train, task.dev, ft, data.vocab.specials());
        run.best = fr.best_point();
        run.rejected = fr.rejected;
        run.ok = true;
      } catch (const std::exception& e) {
        run.error = e.what();
      }
      row.runs.push_back(std::move(run));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace spanlab
