#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "spanlab/corpus.hpp"

namespace spanlab {

enum class MaskingScheme { kSubword, kWholeWord, kNamedEntity, kNounPhrase, kGeometricSpan };

std::string_view to_string(MaskingScheme scheme);
MaskingScheme parse_masking_scheme(std::string_view name);
bool needs_annotations(MaskingScheme scheme);

struct MaskingConfig {
  MaskingScheme scheme = MaskingScheme::kGeometricSpan;
  double budget_rate = 0.15;
  double geo_p = 0.2;
  int l_max = 10;
  double mask_prob = 0.8;
  double random_prob = 0.1;
  double keep_prob = 0.1;
  /// Consecutive rejected candidates tolerated before giving up on the budget.
  int max_attempts = 100;
  /// Probability of drawing an annotated span under the linguistic schemes.
  double annotation_prob = 0.5;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;
};

enum class Replacement { kMask, kRandom, kKeep };
std::string_view to_string(Replacement r);

/// A masked span [start, end] (inclusive) in block coordinates.
struct SpanMask {
  std::size_t start = 0;
  std::size_t end = 0;
  Replacement category = Replacement::kMask;
  std::vector<int> original_ids;
  /// The final span was cut short to land exactly on the budget.
  bool trimmed = false;

  std::size_t length() const { return end - start + 1; }
};

struct MlmTarget {
  std::size_t position = 0;
  int original_id = 0;
};

struct MaskedExample {
  std::vector<int> input_ids;
  std::vector<SpanMask> spans;
  /// Sorted by position.
  std::vector<MlmTarget> mlm_targets;
  std::optional<bool> nsp_label;
  std::size_t budget = 0;
  /// max_attempts ran out before the budget was spent; masked_count() < budget.
  bool degraded = false;

  std::size_t masked_count() const { return mlm_targets.size(); }
};

using MaskedBatch = std::vector<MaskedExample>;

/// Annotated span in block token coordinates, inclusive.
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;
};

/// Draws replacement tokens from the corpus unigram distribution.
class UnigramSampler {
 public:
  explicit UnigramSampler(const Vocabulary& vocab);
  int operator()(Rng& rng) { return dist_(rng); }
  double probability(int id) const;

 private:
  std::discrete_distribution<int> dist_;
};

/// Span length in words: Geo(p) restricted to [1, l_max] (resampled, not clamped).
int sample_span_length(const MaskingConfig& cfg, Rng& rng);
/// Analytic PMF of sample_span_length; entry k-1 holds P(length = k).
std::vector<double> span_length_pmf(const MaskingConfig& cfg);
double span_length_mean(const MaskingConfig& cfg);

/// max(1, floor(rate * maskable)).
std::size_t masking_budget(double rate, std::size_t maskable);

/// Chooses spans for `block` under cfg.scheme and applies the span-level
/// replacement policy. `annotations` (block coordinates) are required for the
/// named_entity and noun_phrase schemes.
MaskedExample sample_mask(const Block& block, const MaskingConfig& cfg,
                          const std::vector<TokenSpan>* annotations, UnigramSampler& unigram,
                          const SpecialIds& specials, Rng& rng);

/// One category per span; rewrites `input_ids` in place and fills `category`.
void apply_replacement(std::vector<SpanMask>& spans, std::vector<int>& input_ids, const MaskingConfig& cfg,
                       UnigramSampler& unigram, const SpecialIds& specials, Rng& rng);

// ---------------------------------------------------------------- annotations

/// Word-coordinate spans, inclusive, for one document.
struct DocumentAnnotations {
  int doc_id = 0;
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;
};

/// JSONL: {"doc_id": 3, "spans": [[0, 1], [5, 7]]} per line.
std::vector<DocumentAnnotations> read_annotations(const std::string& path);

/// Per-document token spans (document coordinates) from word spans. Spans
/// running past the document are dropped.
std::vector<std::vector<TokenSpan>> annotation_token_spans(const std::vector<TokenSequence>& docs,
                                                           const std::vector<DocumentAnnotations>& ann);

/// Annotated spans lying entirely inside one segment of `block`, shifted to
/// block coordinates. `doc_spans` is indexed by doc_id.
std::vector<TokenSpan> annotations_for_block(const Block& block,
                                             const std::vector<std::vector<TokenSpan>>& doc_spans);

}  // namespace spanlab
