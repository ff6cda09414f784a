#include "spanlab/checkpoint.hpp"

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

namespace spanlab {
namespace {

namespace fs = std::filesystem;

ModelConfig small() { return ModelConfig{40, 8, 1, 2, 16, 16, 4, 8, 10, 0.1, 0.02, true}; }

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spanlab_ckpt_" + name);
  fs::remove_all(dir);
  return dir.string();
}

TEST(Checkpoint, BitwiseRoundTrip) {
  Model<float> model(small());
  model.init(21);
  model.params().tensors[0](0, 0) = -0.0f;
  model.params().tensors[0](0, 1) = 1e-40f;  // subnormal
  const std::string dir = fresh_dir("rt");
  save_checkpoint(dir, model, {42, Json{{"seed", 7}}, Json{{"examples_consumed", 3}}});
  const LoadedCheckpoint loaded = load_checkpoint(dir);
  ASSERT_EQ(loaded.model.params().size(), model.params().size());
  for (std::size_t t = 0; t < model.params().size(); ++t) {
    const auto& a = model.params().tensors[t];
    const auto& b = loaded.model.params().tensors[t];
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())), 0)
        << model.params().specs[t].name;
  }
  EXPECT_EQ(loaded.meta.step, 42);
  EXPECT_EQ(loaded.meta.run_config["seed"], 7);
  EXPECT_EQ(loaded.meta.rng_state["examples_consumed"], 3);
  EXPECT_EQ(loaded.model.config().hidden_dim, 8);

  // saving the loaded model reproduces both files byte for byte
  const std::string again = fresh_dir("rt2");
  save_checkpoint(again, loaded.model, loaded.meta);
  EXPECT_EQ(read_file(dir + "/weights.bin"), read_file(again + "/weights.bin"));
  EXPECT_EQ(read_file(dir + "/manifest.json"), read_file(again + "/manifest.json"));
}

TEST(Checkpoint, LittleEndianFloat32Layout) {
  Model<float> model(small());
  model.init(1);
  model.params().tensors[0](0, 0) = 1.0f;  // 0x3f800000
  model.params().tensors[0](0, 1) = -2.5f;  // 0xc0200000
  const std::string dir = fresh_dir("le");
  save_checkpoint(dir, model, {});
  const std::string blob = read_file(dir + "/weights.bin");
  const unsigned char expect[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  ASSERT_GE(blob.size(), 8u);
  EXPECT_EQ(std::memcmp(blob.data(), expect, 8), 0);
  EXPECT_EQ(blob.size(), model.params().num_scalars() * 4);

  const Json m = read_manifest(dir);
  EXPECT_EQ(m["byte_order"], "little");
  std::size_t offset = 0;
  for (const auto& t : m["tensors"]) {
    EXPECT_EQ(t["offset"].get<std::size_t>(), offset);
    offset += t["nbytes"].get<std::size_t>();
  }
  EXPECT_EQ(offset, blob.size());
}

TEST(Checkpoint, RejectsTruncatedWeights) {
  Model<float> model(small());
  model.init(2);
  const std::string dir = fresh_dir("trunc");
  save_checkpoint(dir, model, {});
  std::string blob = read_file(dir + "/weights.bin");
  blob.resize(blob.size() - 4);
  write_file_atomic(dir + "/weights.bin", blob);
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
}

TEST(Checkpoint, RejectsShapeMismatch) {
  Model<float> model(small());
  model.init(3);
  const std::string dir = fresh_dir("shape");
  save_checkpoint(dir, model, {});
  Json m = read_manifest(dir);
  m["tensors"][1]["shape"] = {99, 1};
  write_file_atomic(dir + "/manifest.json", m.dump(2));
  EXPECT_THROW(load_checkpoint(dir), ValidationError);

  Json renamed = read_manifest(dir);
  renamed["tensors"][1]["shape"] = model.params().specs[1].shape;
  renamed["tensors"][1]["name"] = "something.else";
  write_file_atomic(dir + "/manifest.json", renamed.dump(2));
  EXPECT_THROW(load_checkpoint(dir), ValidationError);
}

TEST(Checkpoint, RejectsForeignManifest) {
  const std::string dir = fresh_dir("foreign");
  write_file_atomic(dir + "/manifest.json", "{\"format\": \"other\"}");
  EXPECT_THROW(read_manifest(dir), ValidationError);
  write_file_atomic(dir + "/manifest.json", "not json");
  EXPECT_THROW(read_manifest(dir), ValidationError);
  EXPECT_THROW(load_checkpoint(fresh_dir("absent")), std::exception);
}

}  // namespace
}  // namespace spanlab
