#include "spanlab/common.hpp"

#include <filesystem>
#include <set>

#include <gtest/gtest.h>

namespace spanlab {
namespace {

TEST(DeriveSeed, IsAPureFunctionOfItsInputs) {
  EXPECT_EQ(derive_seed(42, {stream::kMask, 3, 7}), derive_seed(42, {stream::kMask, 3, 7}));
  Rng a = keyed_rng(42, {stream::kBatch, 1});
  Rng b = keyed_rng(42, {stream::kBatch, 1});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(DeriveSeed, SeparatesStreamsAndKeyOrder) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t tag : {stream::kMask, stream::kBatch, stream::kPairs, stream::kInit, stream::kDropout,
                            stream::kTask, stream::kEval}) {
    for (std::uint64_t k = 0; k < 50; ++k) seen.insert(derive_seed(1, {tag, k}));
  }
  EXPECT_EQ(seen.size(), 7u * 50u);
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
}

TEST(IndexRange, HalfOpen) {
  const IndexRange r{2, 5};
  EXPECT_EQ(r.size(), 3u);
  EXPECT_FALSE(r.contains(1));
  EXPECT_TRUE(r.contains(2));
  EXPECT_TRUE(r.contains(4));
  EXPECT_FALSE(r.contains(5));
  EXPECT_TRUE((IndexRange{4, 4}.empty()));
  EXPECT_EQ((IndexRange{6, 3}.size()), 0u);
}

TEST(Files, AtomicWriteCreatesParentsAndReplaces) {
  const auto dir = std::filesystem::temp_directory_path() / "spanlab_test_common";
  std::filesystem::remove_all(dir);
  const std::string path = (dir / "a" / "b.txt").string();
  write_file_atomic(path, "first");
  EXPECT_EQ(read_file(path), "first");
  write_file_atomic(path, std::string("sec\0nd", 6));
  EXPECT_EQ(read_file(path), std::string("sec\0nd", 6));
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    EXPECT_EQ(e.path().filename(), "b.txt") << "temporary file left behind";
  }
  EXPECT_THROW(read_file((dir / "missing").string()), std::exception);
}

TEST(Errors, ValidationErrorCarriesEveryProblem) {
  const ValidationError e("bad config", {"a must be positive", "b is unknown"});
  ASSERT_EQ(e.problems().size(), 2u);
  EXPECT_EQ(e.problems()[1], "b is unknown");
  const NonFiniteError nf("sbo", "nan in sbo");
  EXPECT_EQ(nf.term(), "sbo");
  EXPECT_NE(dynamic_cast<const RuntimeError*>(&nf), nullptr);
}

}  // namespace
}  // namespace spanlab
