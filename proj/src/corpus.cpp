#include "spanlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace spanlab {

namespace {

const char* const kSpecialTokens[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;  // stray continuation byte: treat as its own character
}

bool blank_line(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return is_space(static_cast<unsigned char>(c)); });
}

}  // namespace

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::vector<std::int64_t> unigram_counts)
    : tokens_(std::move(tokens)) {
  if (tokens_.size() < static_cast<std::size_t>(kNumSpecials)) {
    throw ValidationError("vocabulary must hold at least the five special tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens_[static_cast<std::size_t>(i)] != kSpecialTokens[i]) {
      throw ValidationError("vocabulary line " + std::to_string(i + 1) + " must be " + kSpecialTokens[i]);
    }
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw ValidationError("empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ValidationError("duplicate token '" + tokens_[i] + "'");
    }
  }
  set_unigram_counts(std::move(unigram_counts));
}

int Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

bool Vocabulary::is_continuation(std::string_view token) {
  return token.size() > kContinuationPrefix.size() && token.substr(0, kContinuationPrefix.size()) == kContinuationPrefix;
}

std::int64_t Vocabulary::total_count() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void Vocabulary::set_unigram_counts(std::vector<std::int64_t> counts) {
  if (counts.empty()) counts.assign(tokens_.size(), 0);
  if (counts.size() != tokens_.size()) {
    throw ValidationError("unigram counts cover " + std::to_string(counts.size()) + " tokens, vocabulary has " +
                          std::to_string(tokens_.size()));
  }
  if (std::any_of(counts.begin(), counts.end(), [](std::int64_t c) { return c < 0; })) {
    throw ValidationError("negative unigram count");
  }
  counts_ = std::move(counts);
}

void Vocabulary::save(const std::string& vocab_path, const std::string& counts_path) const {
  std::string vocab_text;
  std::string counts_text;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    vocab_text += tokens_[i];
    vocab_text += '\n';
    counts_text += tokens_[i];
    counts_text += '\t';
    counts_text += std::to_string(counts_[i]);
    counts_text += '\n';
  }
  write_file_atomic(vocab_path, vocab_text);
  if (!counts_path.empty()) write_file_atomic(counts_path, counts_text);
}

Vocabulary Vocabulary::load(const std::string& vocab_path, const std::string& counts_path) {
  std::ifstream in(vocab_path);
  if (!in) throw RuntimeError("cannot open vocabulary file " + vocab_path);
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  Vocabulary vocab(std::move(tokens), {});
  if (counts_path.empty()) return vocab;

  std::ifstream cin(counts_path);
  if (!cin) throw RuntimeError("cannot open unigram counts file " + counts_path);
  std::vector<std::int64_t> counts(vocab.tokens_.size(), 0);
  std::size_t lineno = 0;
  for (std::string line; std::getline(cin, line);) {
    ++lineno;
    if (line.empty()) continue;
    auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw ValidationError(counts_path + ":" + std::to_string(lineno) + ": expected token<TAB>count");
    }
    int id = vocab.find(std::string_view(line).substr(0, tab));
    if (id < 0) {
      throw ValidationError(counts_path + ":" + std::to_string(lineno) + ": unknown token");
    }
    counts[static_cast<std::size_t>(id)] = std::stoll(line.substr(tab + 1));
  }
  vocab.set_unigram_counts(std::move(counts));
  return vocab;
}

// ---------------------------------------------------------------- text helpers

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return words;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> chars;
  for (std::size_t i = 0; i < word.size();) {
    std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    chars.emplace_back(word.substr(i, len));
    i += len;
  }
  return chars;
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (blank_line(line)) {
      if (!current.empty()) docs.push_back(std::move(current));
      current.clear();
    } else {
      if (!current.empty()) current += '\n';
      current += line;
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (!current.empty()) docs.push_back(std::move(current));
  return docs;
}

std::vector<std::string> read_documents(const std::string& path) {
  return split_documents(read_file(path));
}

// ---------------------------------------------------------------- build_vocab

namespace {

struct CorpusStats {
  std::map<std::string, std::int64_t> word_freq;
  std::set<std::string> chars;
};

CorpusStats scan(const std::vector<std::string>& docs) {
  CorpusStats stats;
  for (const auto& doc : docs) {
    for (auto& w : split_words(doc)) {
      for (auto& c : utf8_chars(w)) stats.chars.insert(c);
      ++stats.word_freq[w];
    }
  }
  return stats;
}

}  // namespace

int min_vocab_size(const std::vector<std::string>& docs) {
  return kNumSpecials + 2 * static_cast<int>(scan(docs).chars.size());
}

Vocabulary build_vocab(const std::vector<std::string>& docs, int target_size) {
  CorpusStats stats = scan(docs);
  if (stats.word_freq.empty()) throw ValidationError("corpus is empty");
  const int minimum = kNumSpecials + 2 * static_cast<int>(stats.chars.size());
  if (target_size < minimum) {
    throw ValidationError("vocabulary size " + std::to_string(target_size) +
                          " is too small: specials plus character fallbacks need at least " +
                          std::to_string(minimum));
  }

  std::vector<std::pair<std::string, std::int64_t>> ranked(stats.word_freq.begin(), stats.word_freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(std::begin(kSpecialTokens), std::end(kSpecialTokens));
  const auto word_slots = static_cast<std::size_t>(target_size - minimum);
  std::size_t taken = 0;
  for (const auto& [word, freq] : ranked) {
    if (taken == word_slots) break;
    if (stats.chars.count(word) != 0) continue;  // already covered by the character token
    tokens.push_back(word);
    ++taken;
  }
  for (const auto& c : stats.chars) tokens.push_back(c);
  for (const auto& c : stats.chars) tokens.push_back(std::string(kContinuationPrefix) + c);

  Vocabulary vocab(std::move(tokens), {});
  std::vector<std::int64_t> counts(static_cast<std::size_t>(vocab.size()), 0);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (int id : tokenize(docs[d], vocab, static_cast<int>(d)).ids) ++counts[static_cast<std::size_t>(id)];
  }
  vocab.set_unigram_counts(std::move(counts));
  return vocab;
}

// ---------------------------------------------------------------- tokenize

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, int doc_id) {
  TokenSequence seq;
  seq.doc_id = doc_id;
  const int unk = vocab.specials().unk;
  for (const auto& word : split_words(text)) {
    const auto chars = utf8_chars(word);
    std::size_t i = 0;
    while (i < chars.size()) {
      int match = -1;
      std::size_t match_end = i;
      std::string piece = i == 0 ? std::string() : std::string(kContinuationPrefix);
      // longest match: grow the candidate and remember the last hit
      for (std::size_t j = i; j < chars.size(); ++j) {
        piece += chars[j];
        int id = vocab.find(piece);
        if (id >= 0 && !(i == 0 && Vocabulary::is_continuation(piece))) {
          match = id;
          match_end = j + 1;
        }
      }
      if (match < 0) {
        seq.ids.push_back(unk);
        match_end = i + 1;
      } else {
        seq.ids.push_back(match);
      }
      seq.word_start.push_back(i == 0);
      i = match_end;
    }
  }
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const std::string& tok = vocab.token(seq.ids[i]);
    if (Vocabulary::is_continuation(tok) && !seq.word_start[i]) {
      out += tok.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

std::vector<TokenSequence> tokenize_documents(const std::vector<std::string>& docs, const Vocabulary& vocab) {
  std::vector<TokenSequence> out;
  out.reserve(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) out.push_back(tokenize(docs[d], vocab, static_cast<int>(d)));
  return out;
}

TokenSequence TokenSequence::slice(std::size_t begin, std::size_t end) const {
  TokenSequence out;
  out.doc_id = doc_id;
  out.offset = offset + begin;
  out.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(begin), ids.begin() + static_cast<std::ptrdiff_t>(end));
  out.word_start.assign(word_start.begin() + static_cast<std::ptrdiff_t>(begin),
                        word_start.begin() + static_cast<std::ptrdiff_t>(end));
  if (!out.word_start.empty()) out.word_start[0] = true;
  return out;
}

// ---------------------------------------------------------------- blocks

std::size_t Block::maskable_count() const {
  std::size_t n = 0;
  for (const auto& r : maskable) n += r.size();
  return n;
}

bool Block::is_maskable(std::size_t pos) const {
  return std::any_of(maskable.begin(), maskable.end(), [pos](const IndexRange& r) { return r.contains(pos); });
}

std::optional<IndexRange> Block::segment_of(std::size_t pos) const {
  for (const auto& r : maskable) {
    if (r.contains(pos)) return r;
  }
  return std::nullopt;
}

namespace {

void append(TokenSequence& dst, const TokenSequence& src) {
  dst.ids.insert(dst.ids.end(), src.ids.begin(), src.ids.end());
  dst.word_start.insert(dst.word_start.end(), src.word_start.begin(), src.word_start.end());
}

void append_special(TokenSequence& dst, int id) {
  dst.ids.push_back(id);
  dst.word_start.push_back(false);
}

}  // namespace

Block make_block(const TokenSequence& body, const SpecialIds& specials) {
  Block block;
  block.tokens.doc_id = body.doc_id;
  // For blocks, offset records where the body (position 1) starts in its document.
  block.tokens.offset = body.offset;
  append_special(block.tokens, specials.cls);
  append(block.tokens, body);
  append_special(block.tokens, specials.sep);
  block.maskable.push_back({1, 1 + body.size()});
  block.origins.push_back({body.doc_id, body.offset});
  return block;
}

Block make_pair_block(const BiSequencePair& pair, const SpecialIds& specials) {
  Block block;
  block.tokens.doc_id = pair.x_a.doc_id;
  block.tokens.offset = pair.x_a.offset;
  append_special(block.tokens, specials.cls);
  append(block.tokens, pair.x_a);
  append_special(block.tokens, specials.sep);
  append(block.tokens, pair.x_b);
  append_special(block.tokens, specials.sep);
  const std::size_t a_end = 1 + pair.x_a.size();
  block.maskable.push_back({1, a_end});
  block.maskable.push_back({a_end + 1, a_end + 1 + pair.x_b.size()});
  block.origins.push_back({pair.x_a.doc_id, pair.x_a.offset});
  block.origins.push_back({pair.x_b.doc_id, pair.x_b.offset});
  block.is_next = pair.is_next;
  return block;
}

std::vector<Block> segment_blocks(const std::vector<TokenSequence>& docs, std::size_t n_max,
                                  const SpecialIds& specials) {
  if (n_max < 3) throw ValidationError("n_max must be at least 3 to hold [CLS] x [SEP]");
  const std::size_t body_max = n_max - 2;
  std::vector<Block> blocks;
  for (const auto& doc : docs) {
    for (std::size_t off = 0; off < doc.size(); off += body_max) {
      blocks.push_back(make_block(doc.slice(off, std::min(doc.size(), off + body_max)), specials));
    }
  }
  return blocks;
}

// ---------------------------------------------------------------- NSP pairs

BiSequenceSampler::BiSequenceSampler(const std::vector<TokenSequence>& docs, std::size_t n_max, Rng rng)
    : docs_(&docs), n_max_(n_max), rng_(std::move(rng)) {
  if (n_max < 5) throw ValidationError("n_max must be at least 5 for [CLS] a [SEP] b [SEP]");
  std::size_t non_empty = 0;
  doc_weights_.reserve(docs.size());
  for (const auto& d : docs) {
    doc_weights_.push_back(static_cast<double>(d.size()));
    non_empty += d.size() > 0 ? 1 : 0;
  }
  if (non_empty < 2) throw ValidationError("bi-sequence sampling needs at least two non-empty documents");
}

TokenSequence BiSequenceSampler::random_segment(std::size_t exclude_doc, std::size_t max_len) {
  std::vector<double> weights = doc_weights_;
  weights[exclude_doc] = 0.0;
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const TokenSequence& doc = (*docs_)[pick(rng_)];
  const std::size_t len = std::min(max_len, doc.size());
  std::uniform_int_distribution<std::size_t> start(0, doc.size() - len);
  const std::size_t s = start(rng_);
  return doc.slice(s, s + len);
}

void BiSequenceSampler::seek(std::size_t doc, std::size_t cursor) {
  doc_ = doc;
  cursor_ = cursor;
}

std::optional<BiSequencePair> BiSequenceSampler::next() {
  const bool is_next = std::bernoulli_distribution(0.5)(rng_);
  const std::size_t need = is_next ? 2 : 1;
  while (true) {
    if (doc_ >= docs_->size()) return std::nullopt;
    if ((*docs_)[doc_].size() - cursor_ >= need) break;
    ++doc_;
    cursor_ = 0;
  }
  const TokenSequence& doc = (*docs_)[doc_];
  const std::size_t remaining = doc.size() - cursor_;
  const std::size_t body = n_max_ - 3;
  const std::size_t target_a = std::uniform_int_distribution<std::size_t>(1, body - 1)(rng_);

  BiSequencePair pair;
  pair.is_next = is_next;
  if (is_next) {
    const std::size_t a_len = std::min(target_a, remaining - 1);
    const std::size_t b_len = std::min(body - a_len, remaining - a_len);
    pair.x_a = doc.slice(cursor_, cursor_ + a_len);
    pair.x_b = doc.slice(cursor_ + a_len, cursor_ + a_len + b_len);
    cursor_ += a_len + b_len;
  } else {
    const std::size_t a_len = std::min(target_a, remaining);
    pair.x_a = doc.slice(cursor_, cursor_ + a_len);
    pair.x_b = random_segment(doc_, body - a_len);
    cursor_ += a_len;
  }
  return pair;
}

std::vector<BiSequencePair> sample_epoch_pairs(const std::vector<TokenSequence>& docs, std::size_t n_max,
                                               std::uint64_t seed, std::uint64_t epoch) {
  BiSequenceSampler sampler(docs, n_max, keyed_rng(seed, {stream::kPairs, epoch}));
  std::vector<BiSequencePair> pairs;
  while (auto p = sampler.next()) pairs.push_back(std::move(*p));
  return pairs;
}

std::optional<BiSequencePair> sample_bisequence(const std::vector<TokenSequence>& docs, std::size_t n_max,
                                                Rng& rng) {
  BiSequenceSampler sampler(docs, n_max, Rng(rng()));
  std::vector<double> weights;
  for (const auto& d : docs) weights.push_back(static_cast<double>(d.size()));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  // A start at the very end of the last document can exhaust the walk; redraw.
  for (int attempt = 0; attempt < 100; ++attempt) {
    const std::size_t doc = pick(rng);
    sampler.seek(doc, std::uniform_int_distribution<std::size_t>(0, docs[doc].size() - 1)(rng));
    if (auto pair = sampler.next()) return pair;
  }
  return std::nullopt;
}

}  // namespace spanlab
