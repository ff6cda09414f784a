#pragma once

#include <cstdint>
#include <string>

#include "spanlab/config.hpp"
#include "spanlab/model.hpp"

namespace spanlab {

/// Everything a checkpoint directory carries besides the weights.
struct CheckpointMeta {
  std::int64_t step = 0;
  /// Training configuration snapshot (may be null).
  Json run_config;
  /// Enough to resume the data/mask streams: master seed and examples consumed.
  Json rng_state;
};

/// Writes `dir/manifest.json` and `dir/weights.bin` (little-endian float32,
/// row-major, concatenated in manifest order). Both files are replaced atomically.
void save_checkpoint(const std::string& dir, const Model<float>& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model<float> model;
  CheckpointMeta meta;
  Json manifest;
};

/// Validates tensor names, shapes, offsets and file size against the manifest.
LoadedCheckpoint load_checkpoint(const std::string& dir);

/// The manifest alone (for inspection).
Json read_manifest(const std::string& dir);

}  // namespace spanlab
