#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spanlab/config.hpp"
#include "spanlab/corpus.hpp"
#include "spanlab/finetune.hpp"
#include "spanlab/masking.hpp"
#include "spanlab/model.hpp"
#include "spanlab/training.hpp"

namespace spanlab {

/// One named pass/fail line.
struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

bool all_passed(const std::vector<CheckResult>& checks);

// ---------------------------------------------------------------- mask statistics

struct MaskStatsConfig {
  MaskingConfig masking;
  /// Span-length draws.
  std::uint64_t draws = 1'000'000;
  /// Blocks masked for the budget, replacement and boundary checks.
  std::size_t blocks = 10'000;
  /// Maskable tokens per sample block.
  std::size_t block_maskable = 510;
  std::uint64_t seed = 1234;
};

struct MaskStatsReport {
  int l_max = 0;
  std::uint64_t draws = 0;
  /// Entry k-1 counts draws of length k.
  std::vector<std::uint64_t> histogram;
  std::vector<double> analytic_pmf;
  double empirical_mean = 0.0;
  double analytic_mean = 0.0;
  double tv_distance = 0.0;
  double chi_square = 0.0;

  std::size_t blocks = 0;
  std::size_t expected_budget = 0;
  std::size_t degraded = 0;
  /// Share of non-degraded blocks masking exactly the budget.
  double budget_compliance = 0.0;
  std::uint64_t spans = 0;
  /// Span-level shares of MASK, RANDOM and KEEP.
  double frac_mask = 0.0;
  double frac_random = 0.0;
  double frac_keep = 0.0;
  /// Share of spans whose every position agrees with the span's category.
  double homogeneity = 0.0;
  /// Share of spans whose s-1 and e+1 neighbours are unmasked.
  double boundary_observability = 0.0;

  std::vector<CheckResult> checks;

  double empirical_p(int length) const;
  bool passed() const { return all_passed(checks); }
  /// length,analytic_p,empirical_p,count rows plus a '#' footer with every check.
  std::string to_csv() const;
  Json to_json() const;
};

/// Blocks of exactly `maskable` body tokens cut from the concatenated corpus.
std::vector<Block> stats_blocks(const std::vector<TokenSequence>& docs, std::size_t maskable, std::size_t count,
                                const SpecialIds& specials);

/// Histogram and moments of sample_span_length plus budget, replacement and
/// boundary statistics of sample_mask on `sample` (cycled to cfg.blocks).
MaskStatsReport mask_stats(const MaskStatsConfig& cfg, const std::vector<Block>& sample, const Vocabulary& vocab);

// ---------------------------------------------------------------- gradient check

struct GradCheckConfig {
  ModelConfig model{50, 16, 2, 2, 32, 32, 8, 16, 10, 0.1, 0.02, true};
  Objectives objectives{true, true, true};
  std::size_t batch = 2;
  /// Body tokens per example (pairs split them between two segments).
  std::size_t body_len = 20;
  /// Independent random batches.
  int trials = 1;
  double step = 1e-4;
  /// Enables dropout with a fixed mask shared by every evaluation.
  bool train_mode = false;
  /// Budget rate 0: nothing is masked.
  bool zero_masked = false;
  std::uint64_t seed = 1234;
};

struct TensorGradError {
  std::string name;
  double rel_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorGradError> tensors;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t coordinates = 0;
};

/// Central differences in double precision against Model<double>::loss.
/// Per tensor: max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-10).
GradCheckReport grad_check(const GradCheckConfig& cfg);

/// A random batch over a synthetic vocabulary of cfg.model.vocab_size entries.
MaskedBatch grad_check_batch(const GradCheckConfig& cfg, std::uint64_t trial);

// ---------------------------------------------------------------- invariants

struct InvariantOptions {
  std::uint64_t seed = 1234;
  /// Corpus for data-driven checks; the bundled toy corpus when empty.
  std::string corpus;
  std::size_t batches = 1000;
  std::size_t batch_size = 8;
  std::size_t sbo_spans = 100;
  std::size_t pairs = 100'000;
};

/// Suites: masking, sbo, loss, schedule, optimizer, nsp, or all.
std::vector<CheckResult> assert_invariants(const std::string& suite, const InvariantOptions& opts = {});
std::vector<std::string> invariant_suites();

// ---------------------------------------------------------------- training checks

/// Pretrains until the logged combined loss drops below `threshold` or the
/// step budget runs out.
CheckResult overfit_check(const TrainRunConfig& cfg, double threshold, double max_seconds);

/// Runs `cfg` twice under `work_dir` and compares metrics logs, weights and
/// manifests byte for byte.
CheckResult determinism_check(const TrainRunConfig& cfg, const std::string& work_dir);

// ---------------------------------------------------------------- ablation

struct AblationConfig {
  std::vector<GridRow> rows;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  MarkerTaskConfig task;
  FinetuneConfig finetune;
};

struct AblationRun {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  LossBreakdown final_losses;
  GridPointResult best;
  std::size_t rejected = 0;
};

struct AblationRow {
  std::string label;
  std::string scheme;
  std::string pipeline;
  std::string objectives;
  std::vector<AblationRun> runs;
};

struct MeanStd {
  double mean = 0.0;
  double stdev = 0.0;
  std::size_t n = 0;
};

/// Sample standard deviation (n - 1); 0 for fewer than two values.
MeanStd mean_std(const std::vector<double>& values);

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds;

  MeanStd dev_em(std::size_t row) const;
  MeanStd dev_f1(std::size_t row) const;
  MeanStd train_em(std::size_t row) const;
  std::string to_csv() const;
  std::string to_jsonl() const;
  std::string summary_table() const;
};

/// pretrain + finetune_span for every (row, seed). Failures are recorded on the
/// run and the grid continues.
AblationReport run_ablation(const AblationConfig& cfg,
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace spanlab
