#include "spanlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>

namespace spanlab {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void append_le_float(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float read_le_float(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const std::string& dir, const Model<float>& model, const CheckpointMeta& meta) {
  const auto& params = model.params();
  std::string blob;
  blob.reserve(params.num_scalars() * 4);
  Json tensors = Json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors[i];
    const std::size_t offset = blob.size();
    // Row-major storage makes data() the row-major element order.
    for (Eigen::Index j = 0; j < t.size(); ++j) append_le_float(blob, t.data()[j]);
    tensors.push_back({{"name", params.specs[i].name},
                       {"shape", params.specs[i].shape},
                       {"dtype", "float32"},
                       {"offset", offset},
                       {"nbytes", blob.size() - offset}});
  }
  Json manifest{{"format", "spanlab-checkpoint"},
                {"version", 1},
                {"model_config", to_json(model.config())},
                {"step", meta.step},
                {"rng_state", meta.rng_state},
                {"run_config", meta.run_config},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"weights_file", "weights.bin"},
                {"total_bytes", blob.size()},
                {"tensors", tensors}};
  std::filesystem::create_directories(dir);
  write_file_atomic(dir + "/weights.bin", blob);
  write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

Json read_manifest(const std::string& dir) {
  const std::string text = read_file(dir + "/manifest.json");
  Json manifest = Json::parse(text, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw ValidationError(dir + "/manifest.json is not a JSON object");
  }
  if (manifest.value("format", "") != "spanlab-checkpoint") {
    throw ValidationError(dir + "/manifest.json is not a spanlab checkpoint manifest");
  }
  return manifest;
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  Json manifest = read_manifest(dir);
  const ModelConfig cfg = model_config_from_json(manifest.at("model_config"));
  Model<float> model(cfg);
  const std::string blob = read_file(dir + "/" + manifest.value("weights_file", std::string("weights.bin")));
  if (blob.size() != manifest.at("total_bytes").get<std::size_t>()) {
    throw ValidationError("weights.bin holds " + std::to_string(blob.size()) + " bytes, manifest says " +
                          manifest.at("total_bytes").dump());
  }
  const auto& entries = manifest.at("tensors");
  auto& params = model.params();
  if (entries.size() != params.size()) {
    throw ValidationError("checkpoint has " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    const auto& spec = params.specs[i];
    if (e.at("name").get<std::string>() != spec.name ||
        e.at("shape").get<std::vector<std::int64_t>>() != spec.shape) {
      throw ValidationError("checkpoint tensor " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                            ") does not match model tensor " + spec.name);
    }
    auto& t = params.tensors[i];
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    if (nbytes != static_cast<std::size_t>(t.size()) * 4 || offset + nbytes > blob.size()) {
      throw ValidationError("checkpoint tensor " + spec.name + " has an inconsistent byte range");
    }
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = read_le_float(blob.data() + offset + 4 * j);
  }
  CheckpointMeta meta{manifest.value("step", std::int64_t{0}), manifest.value("run_config", Json()),
                      manifest.value("rng_state", Json())};
  return {std::move(model), std::move(meta), std::move(manifest)};
}

}  // namespace spanlab
