#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spanlab/common.hpp"

namespace spanlab {

/// Ids of the special symbols. They always occupy the first five vocabulary
/// slots in this order.
struct SpecialIds {
  int pad = 0;
  int unk = 1;
  int cls = 2;
  int sep = 3;
  int mask = 4;
};

inline constexpr std::string_view kContinuationPrefix = "##";
inline constexpr int kNumSpecials = 5;

class Vocabulary {
 public:
  Vocabulary() = default;
  /// `tokens` must start with the five specials. Counts may be empty (all zero).
  Vocabulary(std::vector<std::string> tokens, std::vector<std::int64_t> unigram_counts);

  int size() const { return static_cast<int>(tokens_.size()); }
  const SpecialIds& specials() const { return specials_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// -1 if absent.
  int find(std::string_view token) const;
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
  static bool is_continuation(std::string_view token);

  const std::vector<std::int64_t>& unigram_counts() const { return counts_; }
  std::int64_t total_count() const;
  void set_unigram_counts(std::vector<std::int64_t> counts);

  /// One token per line, line number = id.
  void save(const std::string& vocab_path, const std::string& counts_path) const;
  static Vocabulary load(const std::string& vocab_path, const std::string& counts_path = {});

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::int64_t> counts_;
  SpecialIds specials_;
};

/// Subword ids of a contiguous stretch of one document.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<bool> word_start;
  int doc_id = 0;
  /// Document token offset of ids[0].
  std::size_t offset = 0;

  std::size_t size() const { return ids.size(); }
  /// Copy of [begin, end) with doc provenance kept; the first token is
  /// re-flagged as a word start so the slice is word-aligned on its own.
  TokenSequence slice(std::size_t begin, std::size_t end) const;
};

/// Where a segment of a Block came from.
struct SegmentOrigin {
  int doc_id = 0;
  /// Document token offset of the segment's first token.
  std::size_t offset = 0;
};

/// A model-ready sequence: [CLS] body [SEP] for single-sequence training or
/// [CLS] a [SEP] b [SEP] for bi-sequence training. Special positions are never
/// maskable.
struct Block {
  TokenSequence tokens;
  /// Maskable index intervals in `tokens`; one per segment.
  std::vector<IndexRange> maskable;
  /// Parallel to `maskable`.
  std::vector<SegmentOrigin> origins;
  /// Set for bi-sequence inputs.
  std::optional<bool> is_next;

  std::size_t maskable_count() const;
  bool is_maskable(std::size_t pos) const;
  /// The segment containing `pos`, if any.
  std::optional<IndexRange> segment_of(std::size_t pos) const;
};

struct BiSequencePair {
  TokenSequence x_a;
  TokenSequence x_b;
  bool is_next = false;
};

/// Splits on whitespace, then splits ASCII punctuation into words of its own.
std::vector<std::string> split_words(std::string_view text);
/// UTF-8 code points of a word.
std::vector<std::string> utf8_chars(std::string_view word);

/// Reads a corpus: documents are separated by one or more blank lines.
std::vector<std::string> read_documents(const std::string& path);
std::vector<std::string> split_documents(std::string_view text);

/// Frequency-ranked whole words plus single-character fallbacks (word-initial
/// and continuation). Throws ValidationError when `target_size` cannot hold the
/// specials and every character pair.
Vocabulary build_vocab(const std::vector<std::string>& docs, int target_size);
/// Smallest target_size build_vocab accepts for `docs`.
int min_vocab_size(const std::vector<std::string>& docs);

/// Greedy longest-match within each word; word_start marks each word's first subword.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, int doc_id = 0);
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);
std::vector<TokenSequence> tokenize_documents(const std::vector<std::string>& docs,
                                              const Vocabulary& vocab);

/// Wraps a body as [CLS] body [SEP].
Block make_block(const TokenSequence& body, const SpecialIds& specials);
/// Formats [CLS] a [SEP] b [SEP].
Block make_pair_block(const BiSequencePair& pair, const SpecialIds& specials);

/// Greedy left-to-right packing of each document into bodies of at most
/// n_max - 2 tokens. Blocks never cross documents.
std::vector<Block> segment_blocks(const std::vector<TokenSequence>& docs, std::size_t n_max,
                                  const SpecialIds& specials);

/// Walks the corpus document by document drawing NSP pairs. Half the pairs
/// continue x_a in its source document; the rest take x_b from a random
/// position of another document. Returns nullopt once the corpus is consumed.
class BiSequenceSampler {
 public:
  BiSequenceSampler(const std::vector<TokenSequence>& docs, std::size_t n_max, Rng rng);

  std::optional<BiSequencePair> next();
  /// Moves the read cursor to token `cursor` of document `doc`.
  void seek(std::size_t doc, std::size_t cursor);

 private:
  TokenSequence random_segment(std::size_t exclude_doc, std::size_t max_len);

  const std::vector<TokenSequence>* docs_;
  std::size_t n_max_;
  Rng rng_;
  std::size_t doc_ = 0;
  std::size_t cursor_ = 0;
  std::vector<double> doc_weights_;
};

/// One pass of the sampler seeded from (seed, epoch).
std::vector<BiSequencePair> sample_epoch_pairs(const std::vector<TokenSequence>& docs,
                                               std::size_t n_max, std::uint64_t seed,
                                               std::uint64_t epoch);

/// Single-pair convenience wrapper around BiSequenceSampler.
std::optional<BiSequencePair> sample_bisequence(const std::vector<TokenSequence>& docs,
                                                std::size_t n_max, Rng& rng);

}  // namespace spanlab
