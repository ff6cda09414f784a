#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spanlab/config.hpp"
#include "spanlab/corpus.hpp"
#include "spanlab/model.hpp"

namespace spanlab {

/// Inclusive [start, end] pair.
using SpanPair = std::pair<std::size_t, std::size_t>;

/// A span-selection example before packing: question and context as token
/// ids, the answer as inclusive context word indices (nullopt: unanswerable).
struct QaExample {
  std::vector<int> question;
  std::vector<int> context;
  std::vector<bool> context_word_start;
  std::optional<SpanPair> answer;
};

/// JSONL, one object per line: {"context": ..., "question": ..., "answer_span": [s, e] | null}.
/// context/question are either token-id arrays or text tokenized with `vocab`.
std::vector<QaExample> read_qa_dataset(const std::string& path, const Vocabulary& vocab);
/// Writes the token-id form.
void write_qa_dataset(const std::string& path, const std::vector<QaExample>& examples);

/// Synthetic marker task. Context tokens are random whole-word vocabulary
/// entries; the open marker sits right before the answer and the close marker
/// right after it. The question is the open marker alone. Unanswerable
/// examples carry no markers.
struct MarkerTaskConfig {
  int num_train = 128;
  int num_dev = 64;
  int context_len = 24;
  int min_answer = 1;
  int max_answer = 3;
  double unanswerable_rate = 0.0;
  std::uint64_t seed = 7;
  /// -1: the first two whole-word entries after the specials.
  int open_marker = -1;
  int close_marker = -1;

  std::vector<std::string> problems() const;
};

struct MarkerTask {
  std::vector<QaExample> train;
  std::vector<QaExample> dev;
  int open_marker = 0;
  int close_marker = 0;
};

MarkerTask make_marker_task(const Vocabulary& vocab, const MarkerTaskConfig& cfg);

/// Packs [CLS] question [SEP] context [SEP], truncating the context to fit
/// max_len. Returns nullopt when the answer does not fit.
std::optional<SpanSelectExample> pack_qa_example(const QaExample& ex, const SpecialIds& specials,
                                                 std::size_t max_len);

/// Token-overlap F1 of two inclusive spans, in [0, 1].
double span_f1(const SpanPair& pred, const SpanPair& gold);

struct SpanMetrics {
  /// Percentages.
  double exact_match = 0.0;
  double f1 = 0.0;
  std::size_t count = 0;
};

/// Eval-mode predictions scored against the packed gold positions.
SpanMetrics evaluate_span_select(const Model<float>& model, const std::vector<SpanSelectExample>& examples,
                                 std::size_t max_answer_len);

struct FinetuneConfig {
  std::vector<double> learning_rates{5e-6, 1e-5, 2e-5, 3e-5, 5e-5};
  std::vector<int> batch_sizes{16, 32};
  int epochs = 4;
  /// Fraction of steps spent warming up.
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t max_answer_len = 30;
  std::uint64_t seed = 1;

  std::vector<std::string> problems() const;
};

Json to_json(const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const Json& j);
Json to_json(const MarkerTaskConfig& c);
MarkerTaskConfig marker_task_config_from_json(const Json& j);

struct GridPointResult {
  double learning_rate = 0.0;
  int batch_size = 0;
  double final_loss = 0.0;
  SpanMetrics train;
  SpanMetrics dev;
};

struct FinetuneResult {
  std::vector<GridPointResult> grid;
  /// Index into `grid` of the best dev F1 (ties: higher EM, then earlier).
  std::size_t best = 0;
  /// Examples dropped because the answer fell outside the sequence.
  std::size_t rejected = 0;
  Model<float> best_model;

  const GridPointResult& best_point() const { return grid.at(best); }
};

/// Trains the start/end head and the encoder end-to-end for every
/// (learning rate, batch size) pair, starting each from `pretrained`.
FinetuneResult finetune_span(const Model<float>& pretrained, const std::vector<QaExample>& train,
                             const std::vector<QaExample>& dev, const FinetuneConfig& cfg,
                             const SpecialIds& specials = {});

}  // namespace spanlab
