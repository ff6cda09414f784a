#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spanlab {

/// Bad input, bad configuration or violated precondition. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
  ValidationError(const std::string& summary, std::vector<std::string> problems);

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// Failure while running a pipeline stage (I/O, divergence). Maps to exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

/// A loss term or gradient became NaN/Inf.
class NonFiniteError : public RuntimeError {
 public:
  NonFiniteError(std::string term, const std::string& what)
      : RuntimeError(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

using Rng = std::mt19937_64;

/// Mixes a master seed with stream keys (e.g. epoch, block index) into an
/// independent seed, so every stream is reproducible regardless of the order
/// in which streams are consumed.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys);

inline Rng keyed_rng(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(master, keys));
}

// Stream tags for derive_seed; keeps different consumers of one master seed apart.
namespace stream {
inline constexpr std::uint64_t kMask = 0x6d61736bULL;
inline constexpr std::uint64_t kBatch = 0x62617463ULL;
inline constexpr std::uint64_t kPairs = 0x70616972ULL;
inline constexpr std::uint64_t kInit = 0x696e6974ULL;
inline constexpr std::uint64_t kDropout = 0x64726f70ULL;
inline constexpr std::uint64_t kTask = 0x7461736bULL;
inline constexpr std::uint64_t kEval = 0x6576616cULL;
}  // namespace stream

/// Half-open index interval [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

/// Writes `contents` to `path` via a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace spanlab
