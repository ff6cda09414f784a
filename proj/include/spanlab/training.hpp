#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spanlab/checkpoint.hpp"
#include "spanlab/config.hpp"
#include "spanlab/corpus.hpp"
#include "spanlab/masking.hpp"
#include "spanlab/model.hpp"
#include "spanlab/optim.hpp"

namespace spanlab {

/// Tokenized corpus plus everything masking needs.
struct PretrainData {
  Vocabulary vocab;
  std::vector<TokenSequence> docs;
  /// Per document, document token coordinates. Empty when no file was given.
  std::vector<std::vector<TokenSpan>> entity_spans;
  std::vector<std::vector<TokenSpan>> noun_phrase_spans;

  const std::vector<std::vector<TokenSpan>>* spans_for(MaskingScheme scheme) const;
};

/// Reads the corpus, loads or builds the vocabulary and reads annotation files named in cfg.data.
PretrainData load_pretrain_data(const TrainRunConfig& cfg);
PretrainData make_pretrain_data(const std::vector<std::string>& docs, Vocabulary vocab);

/// Endless stream of masked examples. Units (blocks, or NSP pairs for the 2seq
/// pipeline) are visited in a fresh random order each epoch, and each unit's
/// mask is drawn from an rng keyed on (seed, epoch, unit index), so masks
/// change every epoch and never depend on batch composition.
class ExampleStream {
 public:
  ExampleStream(const TrainRunConfig& cfg, const PretrainData& data);

  MaskedExample next();
  MaskedBatch next_batch(std::size_t size);

  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t consumed() const { return consumed_; }
  std::size_t units_in_epoch() const { return units_.size(); }

 private:
  void start_epoch(std::uint64_t epoch);

  const TrainRunConfig* cfg_;
  const PretrainData* data_;
  UnigramSampler unigram_;
  std::vector<Block> blocks_;
  std::vector<Block> units_;
  std::vector<std::size_t> order_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::uint64_t consumed_ = 0;
};

/// Masks every unit of one epoch (keyed by `epoch`) in order.
MaskedBatch mask_epoch(const TrainRunConfig& cfg, const PretrainData& data, std::uint64_t epoch);

struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  LossBreakdown losses;
  std::int64_t tokens = 0;
  /// Only outside determinism mode.
  std::optional<double> tokens_per_sec;
};

/// One JSONL line: step, lr, mlm_loss, sbo_loss, nsp_loss, total_loss, tokens, tokens_per_sec.
std::string metrics_line(const MetricsRecord& r, const Objectives& objectives);

struct PretrainOptions {
  /// Metrics log, checkpoint and manifest go here; nothing is written when empty.
  std::string out_dir;
  std::function<void(const MetricsRecord&)> on_log;
  /// Stop early once the logged interval's total loss falls below this value.
  std::optional<double> stop_below;
};

struct PretrainResult {
  Model<float> model;
  std::vector<MetricsRecord> log;
  std::int64_t steps_run = 0;
  double wall_seconds = 0.0;
};

/// Model config with vocab_size and the SBO table resolved against data and masking.
ModelConfig resolve_model_config(const TrainRunConfig& cfg, const Vocabulary& vocab);

/// The pre-training loop: per step sample a batch, mask it, evaluate the enabled
/// objectives, clip, and take an AdamW step on the warmup/decay schedule.
/// Throws RuntimeError on a non-finite loss; the last checkpoint on disk is kept.
PretrainResult pretrain(const TrainRunConfig& cfg, const PretrainData& data, const PretrainOptions& opts = {});

/// Eval-mode loss over one freshly masked epoch.
LossBreakdown evaluate_pretrain(const Model<float>& model, const TrainRunConfig& cfg, const PretrainData& data,
                                std::uint64_t epoch_key);

}  // namespace spanlab
