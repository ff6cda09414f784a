#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spanlab/masking.hpp"
#include "spanlab/model.hpp"
#include "spanlab/optim.hpp"

namespace spanlab {

using Json = nlohmann::ordered_json;

enum class Pipeline { kSingleSequence, kBiSequence };

std::string_view to_string(Pipeline p);
Pipeline parse_pipeline(std::string_view name);

struct DataConfig {
  std::string corpus;
  /// Existing vocabulary file; built from the corpus when empty.
  std::string vocab;
  std::string counts;
  int vocab_size = 200;
  /// Annotation JSONL read by the named_entity scheme.
  std::string entity_annotations;
  /// Annotation JSONL read by the noun_phrase scheme.
  std::string noun_phrase_annotations;

  /// The annotation file the scheme consumes, empty if none.
  const std::string& annotations_for(MaskingScheme scheme) const;
};

struct TrainRunConfig {
  std::uint64_t seed = 1234;
  Pipeline pipeline = Pipeline::kSingleSequence;
  Objectives objectives{true, true, false};
  MaskingConfig masking;
  ModelConfig model;
  AdamWConfig optimizer;
  /// Global-norm gradient clip; 0 disables.
  double clip_norm = 1.0;
  Schedule schedule{200, 1e-3, 2000};
  int batch_size = 32;
  int n_max = 128;
  int log_every = 100;
  /// 0: only the final checkpoint.
  int checkpoint_every = 0;
  /// Serial execution and no wall-clock values in the metrics log.
  bool deterministic = true;
  DataConfig data;

  /// Every violated constraint. vocab_size 0 is accepted (resolved from the vocabulary).
  std::vector<std::string> problems() const;
  void validate() const;
};

Json to_json(const MaskingConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const TrainRunConfig& c);

/// Parses a model config; throws ValidationError listing every problem.
ModelConfig model_config_from_json(const Json& j);
/// Parses a run config on top of defaults. Unknown keys and type errors are
/// collected together with semantic problems and reported at once.
TrainRunConfig train_config_from_json(const Json& j);

/// Sets a dotted path, e.g. "masking.geo_p=0.4" or "objectives=[\"mlm\"]".
/// The value is parsed as JSON when possible, else taken as a string.
void apply_override(Json& j, std::string_view assignment);

/// Named run presets: spanbert, bert-baseline, bert-1seq, paper-scale, overfit.
Json preset_json(std::string_view name);
std::vector<std::string> preset_names();

/// Ablation grids: table7 (five masking schemes, 2seq + NSP) and table8
/// (span+NSP 2seq, span 1seq, span 1seq + SBO). Each row is a full run config.
struct GridRow {
  std::string label;
  Json config;
};
std::vector<GridRow> grid_preset(std::string_view name, const Json& base);

}  // namespace spanlab
