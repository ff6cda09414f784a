#include "spanlab/masking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace spanlab {

namespace {

constexpr std::string_view kSchemeNames[] = {"subword", "whole_word", "named_entity", "noun_phrase",
                                              "geometric_span"};

/// One whole word inside one maskable segment: token positions [start, end].
struct Word {
  std::size_t start;
  std::size_t end;
  std::size_t segment;
};

std::vector<Word> block_words(const Block& block) {
  std::vector<Word> words;
  for (std::size_t seg = 0; seg < block.maskable.size(); ++seg) {
    const IndexRange r = block.maskable[seg];
    for (std::size_t i = r.begin; i < r.end; ++i) {
      if (i == r.begin || block.tokens.word_start[i]) {
        if (!words.empty() && words.back().segment == seg) words.back().end = i - 1;
        words.push_back({i, r.end - 1, seg});
      }
    }
  }
  return words;
}

/// Tracks masked positions and enforces disjoint, non-abutting spans.
class SpanSet {
 public:
  SpanSet(std::size_t n, std::size_t budget) : masked_(n, false), budget_(budget) {}

  bool conflicts(std::size_t s, std::size_t e) const {
    const std::size_t lo = s == 0 ? 0 : s - 1;
    const std::size_t hi = std::min(e + 1, masked_.size() - 1);
    for (std::size_t i = lo; i <= hi; ++i) {
      if (masked_[i]) return true;
    }
    return false;
  }

  /// Adds [s, e], trimming from the right to stay within budget.
  void add(std::size_t s, std::size_t e, const std::vector<int>& ids) {
    SpanMask span;
    span.start = s;
    span.end = e;
    const std::size_t remaining = budget_ - count_;
    if (span.length() > remaining) {
      span.end = s + remaining - 1;
      span.trimmed = true;
    }
    for (std::size_t i = span.start; i <= span.end; ++i) {
      masked_[i] = true;
      span.original_ids.push_back(ids[i]);
    }
    count_ += span.length();
    spans_.push_back(std::move(span));
  }

  bool full() const { return count_ >= budget_; }
  std::vector<SpanMask> take() { return std::move(spans_); }

 private:
  std::vector<bool> masked_;
  std::vector<SpanMask> spans_;
  std::size_t budget_;
  std::size_t count_ = 0;
};

std::vector<SpanMask> subword_spans(const Block& block, std::size_t budget, Rng& rng) {
  std::vector<std::size_t> positions;
  for (const auto& r : block.maskable) {
    for (std::size_t i = r.begin; i < r.end; ++i) positions.push_back(i);
  }
  // partial Fisher-Yates: the first `budget` entries are a uniform draw without replacement
  for (std::size_t i = 0; i < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, positions.size() - 1);
    std::swap(positions[i], positions[pick(rng)]);
  }
  positions.resize(budget);
  std::sort(positions.begin(), positions.end());

  // Adjacent picks merge into one span so every span keeps observed boundaries.
  std::vector<SpanMask> spans;
  for (std::size_t p : positions) {
    if (!spans.empty() && spans.back().end + 1 == p) {
      spans.back().end = p;
    } else {
      spans.push_back(SpanMask{p, p, Replacement::kMask, {}, false});
    }
  }
  for (auto& s : spans) {
    for (std::size_t i = s.start; i <= s.end; ++i) s.original_ids.push_back(block.tokens.ids[i]);
  }
  return spans;
}

}  // namespace

std::string_view to_string(MaskingScheme scheme) { return kSchemeNames[static_cast<int>(scheme)]; }

MaskingScheme parse_masking_scheme(std::string_view name) {
  for (int i = 0; i < 5; ++i) {
    if (kSchemeNames[i] == name) return static_cast<MaskingScheme>(i);
  }
  if (name == "span" || name == "geometric") return MaskingScheme::kGeometricSpan;
  throw ValidationError("unknown masking scheme '" + std::string(name) +
                        "' (expected subword, whole_word, named_entity, noun_phrase, geometric_span)");
}

bool needs_annotations(MaskingScheme scheme) {
  return scheme == MaskingScheme::kNamedEntity || scheme == MaskingScheme::kNounPhrase;
}

std::string_view to_string(Replacement r) {
  switch (r) {
    case Replacement::kMask: return "mask";
    case Replacement::kRandom: return "random";
    case Replacement::kKeep: return "keep";
  }
  return "?";
}

std::vector<std::string> MaskingConfig::problems() const {
  std::vector<std::string> out;
  if (!(geo_p > 0.0 && geo_p <= 1.0)) out.push_back("masking.geo_p must be in (0, 1]");
  if (l_max < 1) out.push_back("masking.l_max must be >= 1");
  if (!(budget_rate > 0.0 && budget_rate < 1.0)) out.push_back("masking.budget_rate must be in (0, 1)");
  if (mask_prob < 0 || random_prob < 0 || keep_prob < 0 ||
      std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9) {
    out.push_back("masking replacement split (mask, random, keep) must be non-negative and sum to 1");
  }
  if (max_attempts < 1) out.push_back("masking.max_attempts must be >= 1");
  if (!(annotation_prob >= 0.0 && annotation_prob <= 1.0)) out.push_back("masking.annotation_prob must be in [0, 1]");
  return out;
}

void MaskingConfig::validate() const {
  auto p = problems();
  if (!p.empty()) throw ValidationError("invalid masking config", std::move(p));
}

UnigramSampler::UnigramSampler(const Vocabulary& vocab) {
  std::vector<double> weights(static_cast<std::size_t>(vocab.size()), 0.0);
  double total = 0.0;
  for (int id = kNumSpecials; id < vocab.size(); ++id) {
    weights[static_cast<std::size_t>(id)] = static_cast<double>(vocab.unigram_counts()[static_cast<std::size_t>(id)]);
    total += weights[static_cast<std::size_t>(id)];
  }
  if (total <= 0.0) {
    // No counts available: uniform over ordinary tokens.
    for (int id = kNumSpecials; id < vocab.size(); ++id) weights[static_cast<std::size_t>(id)] = 1.0;
  }
  dist_ = std::discrete_distribution<int>(weights.begin(), weights.end());
}

double UnigramSampler::probability(int id) const {
  const auto p = dist_.probabilities();
  return id >= 0 && static_cast<std::size_t>(id) < p.size() ? p[static_cast<std::size_t>(id)] : 0.0;
}

int sample_span_length(const MaskingConfig& cfg, Rng& rng) {
  if (cfg.geo_p >= 1.0) return 1;
  // std::geometric_distribution counts failures before the first success (support 0, 1, ...).
  std::geometric_distribution<int> geo(cfg.geo_p);
  while (true) {
    const int len = geo(rng) + 1;
    if (len <= cfg.l_max) return len;
  }
}

std::vector<double> span_length_pmf(const MaskingConfig& cfg) {
  const double q = 1.0 - cfg.geo_p;
  const double norm = 1.0 - std::pow(q, cfg.l_max);
  std::vector<double> pmf(static_cast<std::size_t>(cfg.l_max));
  for (int k = 1; k <= cfg.l_max; ++k) pmf[static_cast<std::size_t>(k - 1)] = std::pow(q, k - 1) * cfg.geo_p / norm;
  return pmf;
}

double span_length_mean(const MaskingConfig& cfg) {
  const auto pmf = span_length_pmf(cfg);
  double mean = 0.0;
  for (std::size_t k = 0; k < pmf.size(); ++k) mean += static_cast<double>(k + 1) * pmf[k];
  return mean;
}

std::size_t masking_budget(double rate, std::size_t maskable) {
  if (maskable == 0) return 0;
  // the epsilon absorbs products like 0.15 * 20 landing at 2.9999999999999996
  const auto b = static_cast<std::size_t>(std::floor(rate * static_cast<double>(maskable) + 1e-9));
  return std::clamp<std::size_t>(b, 1, maskable);
}

void apply_replacement(std::vector<SpanMask>& spans, std::vector<int>& input_ids, const MaskingConfig& cfg,
                       UnigramSampler& unigram, const SpecialIds& specials, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (auto& span : spans) {
    const double u = u01(rng);
    if (u < cfg.mask_prob) {
      span.category = Replacement::kMask;
    } else if (u < cfg.mask_prob + cfg.random_prob) {
      span.category = Replacement::kRandom;
    } else {
      span.category = Replacement::kKeep;
    }
    for (std::size_t i = span.start; i <= span.end; ++i) {
      switch (span.category) {
        case Replacement::kMask: input_ids[i] = specials.mask; break;
        case Replacement::kRandom: input_ids[i] = unigram(rng); break;
        case Replacement::kKeep: break;
      }
    }
  }
}

MaskedExample sample_mask(const Block& block, const MaskingConfig& cfg, const std::vector<TokenSpan>* annotations,
                          UnigramSampler& unigram, const SpecialIds& specials, Rng& rng) {
  const std::size_t maskable = block.maskable_count();
  if (maskable == 0) throw ValidationError("block has no maskable tokens");
  if (needs_annotations(cfg.scheme) && annotations == nullptr) {
    throw ValidationError("masking scheme " + std::string(to_string(cfg.scheme)) + " requires an annotation file");
  }

  MaskedExample ex;
  ex.input_ids = block.tokens.ids;
  ex.nsp_label = block.is_next;
  ex.budget = masking_budget(cfg.budget_rate, maskable);

  std::vector<SpanMask> spans;
  if (cfg.scheme == MaskingScheme::kSubword) {
    spans = subword_spans(block, ex.budget, rng);
  } else {
    const std::vector<Word> words = block_words(block);
    std::vector<std::size_t> last_word_of_segment(block.maskable.size(), 0);
    for (std::size_t w = 0; w < words.size(); ++w) last_word_of_segment[words[w].segment] = w;

    SpanSet chosen(block.tokens.size(), ex.budget);
    std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
    std::bernoulli_distribution use_annotation(cfg.annotation_prob);
    int failures = 0;
    while (!chosen.full()) {
      if (failures >= cfg.max_attempts) {
        ex.degraded = true;
        break;
      }
      std::size_t s = 0;
      std::size_t e = 0;
      if (cfg.scheme == MaskingScheme::kGeometricSpan) {
        const auto len = static_cast<std::size_t>(sample_span_length(cfg, rng));
        const std::size_t first = pick_word(rng);
        const std::size_t last = std::min(first + len - 1, last_word_of_segment[words[first].segment]);
        s = words[first].start;
        e = words[last].end;
      } else if (needs_annotations(cfg.scheme) && !annotations->empty() && use_annotation(rng)) {
        const TokenSpan& a = (*annotations)[std::uniform_int_distribution<std::size_t>(0, annotations->size() - 1)(rng)];
        s = a.start;
        e = a.end;
      } else {
        const Word& w = words[pick_word(rng)];
        s = w.start;
        e = w.end;
      }
      if (chosen.conflicts(s, e)) {
        ++failures;
        continue;
      }
      chosen.add(s, e, block.tokens.ids);
      failures = 0;
    }
    spans = chosen.take();
    std::sort(spans.begin(), spans.end(), [](const SpanMask& a, const SpanMask& b) { return a.start < b.start; });
  }

  apply_replacement(spans, ex.input_ids, cfg, unigram, specials, rng);
  for (const auto& span : spans) {
    for (std::size_t i = span.start; i <= span.end; ++i) ex.mlm_targets.push_back({i, block.tokens.ids[i]});
  }
  ex.spans = std::move(spans);
  return ex;
}

// ---------------------------------------------------------------- annotations

std::vector<DocumentAnnotations> read_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open annotation file " + path);
  std::vector<DocumentAnnotations> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DocumentAnnotations doc;
      doc.doc_id = j.at("doc_id").get<int>();
      for (const auto& span : j.at("spans")) {
        const auto a = span.at(0).get<long long>();
        const auto b = span.at(1).get<long long>();
        if (a < 0 || b < a) throw ValidationError("span [" + std::to_string(a) + ", " + std::to_string(b) + "] is invalid");
        doc.word_spans.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
      }
      out.push_back(std::move(doc));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::vector<TokenSpan>> annotation_token_spans(const std::vector<TokenSequence>& docs,
                                                           const std::vector<DocumentAnnotations>& ann) {
  std::vector<std::vector<TokenSpan>> out(docs.size());
  for (const auto& doc_ann : ann) {
    if (doc_ann.doc_id < 0 || static_cast<std::size_t>(doc_ann.doc_id) >= docs.size()) continue;
    const TokenSequence& doc = docs[static_cast<std::size_t>(doc_ann.doc_id)];
    // word k covers tokens [word_begin[k], word_begin[k+1])
    std::vector<std::size_t> word_begin;
    for (std::size_t i = 0; i < doc.size(); ++i) {
      if (doc.word_start[i] || i == 0) word_begin.push_back(i);
    }
    word_begin.push_back(doc.size());
    const std::size_t num_words = word_begin.size() - 1;
    for (const auto& [ws, we] : doc_ann.word_spans) {
      if (we >= num_words) continue;
      out[static_cast<std::size_t>(doc_ann.doc_id)].push_back({word_begin[ws], word_begin[we + 1] - 1});
    }
  }
  return out;
}

std::vector<TokenSpan> annotations_for_block(const Block& block,
                                             const std::vector<std::vector<TokenSpan>>& doc_spans) {
  std::vector<TokenSpan> out;
  for (std::size_t seg = 0; seg < block.maskable.size(); ++seg) {
    const IndexRange r = block.maskable[seg];
    const SegmentOrigin& origin = block.origins[seg];
    if (origin.doc_id < 0 || static_cast<std::size_t>(origin.doc_id) >= doc_spans.size()) continue;
    const std::size_t lo = origin.offset;
    const std::size_t hi = origin.offset + r.size();  // exclusive, document coordinates
    for (const auto& span : doc_spans[static_cast<std::size_t>(origin.doc_id)]) {
      if (span.start >= lo && span.end < hi) {
        out.push_back({span.start - lo + r.begin, span.end - lo + r.begin});
      }
    }
  }
  return out;
}

}  // namespace spanlab
