#include "spanlab/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "spanlab/field_reader.hpp"
#include "spanlab/optim.hpp"

namespace spanlab {

// ---------------------------------------------------------------- dataset I/O

namespace {

void read_text_or_ids(const Json& v, const Vocabulary& vocab, std::vector<int>& ids, std::vector<bool>& starts,
                      const std::string& where) {
  ids.clear();
  starts.clear();
  if (v.is_string()) {
    const TokenSequence seq = tokenize(v.get<std::string>(), vocab);
    ids = seq.ids;
    starts = seq.word_start;
    return;
  }
  if (!v.is_array()) throw ValidationError(where + " must be a string or an array of token ids");
  for (const auto& t : v) {
    if (!t.is_number_integer()) throw ValidationError(where + " holds a non-integer token id");
    const int id = t.get<int>();
    if (id < 0 || id >= vocab.size()) throw ValidationError(where + " token id " + std::to_string(id) + " is out of range");
    ids.push_back(id);
    starts.push_back(!Vocabulary::is_continuation(vocab.token(id)));
  }
  if (!starts.empty()) starts[0] = true;
}

/// Token index of the first subword of each word.
std::vector<std::size_t> word_offsets(const std::vector<bool>& word_start) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < word_start.size(); ++i) {
    if (word_start[i]) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<QaExample> read_qa_dataset(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read dataset " + path);
  std::vector<QaExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const std::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("context") || !j.contains("question")) {
      throw ValidationError(where + ": expected an object with context and question");
    }
    QaExample ex;
    std::vector<bool> q_starts;
    read_text_or_ids(j.at("context"), vocab, ex.context, ex.context_word_start, where + " context");
    read_text_or_ids(j.at("question"), vocab, ex.question, q_starts, where + " question");
    if (j.contains("answer_span") && !j.at("answer_span").is_null()) {
      const auto& a = j.at("answer_span");
      if (!a.is_array() || a.size() != 2 || !a[0].is_number_unsigned() || !a[1].is_number_unsigned()) {
        throw ValidationError(where + ": answer_span must be [start_word, end_word]");
      }
      const auto s = a[0].get<std::size_t>();
      const auto e = a[1].get<std::size_t>();
      if (e < s) throw ValidationError(where + ": answer_span end precedes start");
      ex.answer = SpanPair{s, e};
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_qa_dataset(const std::string& path, const std::vector<QaExample>& examples) {
  std::ostringstream os;
  for (const auto& ex : examples) {
    Json j{{"context", ex.context}, {"question", ex.question}, {"answer_span", nullptr}};
    if (ex.answer) j["answer_span"] = Json::array({ex.answer->first, ex.answer->second});
    os << j.dump() << '\n';
  }
  write_file_atomic(path, os.str());
}

// ---------------------------------------------------------------- marker task

std::vector<std::string> MarkerTaskConfig::problems() const {
  std::vector<std::string> out;
  if (num_train < 1) out.push_back("task.num_train must be >= 1");
  if (num_dev < 0) out.push_back("task.num_dev must be >= 0");
  if (min_answer < 1 || max_answer < min_answer) out.push_back("task answer lengths need 1 <= min_answer <= max_answer");
  if (context_len < max_answer + 2) out.push_back("task.context_len must be >= max_answer + 2");
  if (unanswerable_rate < 0.0 || unanswerable_rate > 1.0) out.push_back("task.unanswerable_rate must lie in [0, 1]");
  return out;
}

MarkerTask make_marker_task(const Vocabulary& vocab, const MarkerTaskConfig& cfg) {
  if (auto p = cfg.problems(); !p.empty()) throw ValidationError("invalid marker task config", p);
  std::vector<int> words;
  for (int id = kNumSpecials; id < vocab.size(); ++id) {
    if (!Vocabulary::is_continuation(vocab.token(id))) words.push_back(id);
  }
  MarkerTask task;
  task.open_marker = cfg.open_marker >= 0 ? cfg.open_marker : (words.size() > 0 ? words[0] : -1);
  task.close_marker = cfg.close_marker >= 0 ? cfg.close_marker : (words.size() > 1 ? words[1] : -1);
  if (task.open_marker < kNumSpecials || task.close_marker < kNumSpecials || task.open_marker >= vocab.size() ||
      task.close_marker >= vocab.size() || task.open_marker == task.close_marker) {
    throw ValidationError("marker task needs two distinct non-special marker tokens");
  }
  std::erase_if(words, [&](int id) { return id == task.open_marker || id == task.close_marker; });
  if (words.empty()) throw ValidationError("marker task needs filler tokens besides the markers");

  Rng rng = keyed_rng(cfg.seed, {stream::kTask});
  std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
  std::uniform_int_distribution<int> pick_len(cfg.min_answer, cfg.max_answer);
  std::bernoulli_distribution unanswerable(cfg.unanswerable_rate);
  const auto n = static_cast<std::size_t>(cfg.context_len);

  auto make_one = [&] {
    QaExample ex;
    ex.question = {task.open_marker};
    ex.context.resize(n);
    for (auto& t : ex.context) t = words[pick_word(rng)];
    ex.context_word_start.assign(n, true);
    if (!unanswerable(rng)) {
      const auto len = static_cast<std::size_t>(pick_len(rng));
      // open marker at p, answer p+1..p+len, close marker at p+len+1
      std::uniform_int_distribution<std::size_t> pick_pos(0, n - len - 2);
      const std::size_t p = pick_pos(rng);
      ex.context[p] = task.open_marker;
      ex.context[p + len + 1] = task.close_marker;
      ex.answer = SpanPair{p + 1, p + len};
    }
    return ex;
  };
  for (int i = 0; i < cfg.num_train; ++i) task.train.push_back(make_one());
  for (int i = 0; i < cfg.num_dev; ++i) task.dev.push_back(make_one());
  return task;
}

// ---------------------------------------------------------------- packing and metrics

std::optional<SpanSelectExample> pack_qa_example(const QaExample& ex, const SpecialIds& specials,
                                                 std::size_t max_len) {
  if (ex.question.size() + 4 > max_len) return std::nullopt;
  const std::size_t ctx_begin = ex.question.size() + 2;
  const std::size_t room = max_len - ctx_begin - 1;
  const std::size_t ctx_len = std::min(room, ex.context.size());

  SpanSelectExample out;
  out.input_ids.reserve(ctx_begin + ctx_len + 1);
  out.input_ids.push_back(specials.cls);
  out.input_ids.insert(out.input_ids.end(), ex.question.begin(), ex.question.end());
  out.input_ids.push_back(specials.sep);
  out.input_ids.insert(out.input_ids.end(), ex.context.begin(),
                       ex.context.begin() + static_cast<std::ptrdiff_t>(ctx_len));
  out.input_ids.push_back(specials.sep);
  out.answer_region = {ctx_begin, ctx_begin + ctx_len};

  if (ex.answer) {
    const auto starts = word_offsets(ex.context_word_start);
    const auto [ws, we] = *ex.answer;
    if (we >= starts.size()) return std::nullopt;
    const std::size_t ts = starts[ws];
    const std::size_t te = (we + 1 < starts.size() ? starts[we + 1] : ex.context.size()) - 1;
    if (te >= ctx_len) return std::nullopt;
    out.start = ctx_begin + ts;
    out.end = ctx_begin + te;
  }
  return out;
}

double span_f1(const SpanPair& pred, const SpanPair& gold) {
  const std::size_t lo = std::max(pred.first, gold.first);
  const std::size_t hi = std::min(pred.second, gold.second);
  if (hi < lo) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(pred.second - pred.first + 1);
  const double recall = overlap / static_cast<double>(gold.second - gold.first + 1);
  return 2.0 * precision * recall / (precision + recall);
}

SpanMetrics evaluate_span_select(const Model<float>& model, const std::vector<SpanSelectExample>& examples,
                                 std::size_t max_answer_len) {
  SpanMetrics m;
  double em = 0.0;
  double f1 = 0.0;
  for (const auto& ex : examples) {
    const auto out = model.encode(ex.input_ids);
    const auto pred = best_span(model.span_select_logits(out), ex.answer_region, max_answer_len);
    const SpanPair gold{ex.start, ex.end};
    const bool pred_null = pred.first == 0;
    const bool gold_null = gold.first == 0;
    if (pred_null || gold_null) {
      const double hit = pred_null == gold_null ? 1.0 : 0.0;
      em += hit;
      f1 += hit;
    } else {
      em += pred == gold ? 1.0 : 0.0;
      f1 += span_f1(pred, gold);
    }
  }
  m.count = examples.size();
  if (m.count > 0) {
    m.exact_match = 100.0 * em / static_cast<double>(m.count);
    m.f1 = 100.0 * f1 / static_cast<double>(m.count);
  }
  return m;
}

// ---------------------------------------------------------------- configs

std::vector<std::string> FinetuneConfig::problems() const {
  std::vector<std::string> out;
  if (learning_rates.empty()) out.push_back("finetune.learning_rates must not be empty");
  for (double lr : learning_rates) {
    if (!(lr > 0.0)) out.push_back("finetune.learning_rates must be positive");
  }
  if (batch_sizes.empty()) out.push_back("finetune.batch_sizes must not be empty");
  for (int b : batch_sizes) {
    if (b < 1) out.push_back("finetune.batch_sizes must be >= 1");
  }
  if (epochs < 1) out.push_back("finetune.epochs must be >= 1");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0) out.push_back("finetune.warmup_frac must lie in [0, 1)");
  if (weight_decay < 0.0) out.push_back("finetune.weight_decay must be >= 0");
  if (clip_norm < 0.0) out.push_back("finetune.clip_norm must be >= 0");
  if (max_answer_len < 1) out.push_back("finetune.max_answer_len must be >= 1");
  return out;
}

Json to_json(const FinetuneConfig& c) {
  return Json{{"learning_rates", c.learning_rates}, {"batch_sizes", c.batch_sizes},
              {"epochs", c.epochs},                 {"warmup_frac", c.warmup_frac},
              {"weight_decay", c.weight_decay},     {"clip_norm", c.clip_norm},
              {"max_answer_len", c.max_answer_len}, {"seed", c.seed}};
}

FinetuneConfig finetune_config_from_json(const Json& j) {
  FinetuneConfig c;
  std::vector<std::string> problems;
  FieldReader r(j, "finetune", problems);
  r.read("learning_rates", c.learning_rates);
  r.read("batch_sizes", c.batch_sizes);
  r.read("epochs", c.epochs);
  r.read("warmup_frac", c.warmup_frac);
  r.read("weight_decay", c.weight_decay);
  r.read("clip_norm", c.clip_norm);
  r.read("max_answer_len", c.max_answer_len);
  r.read("seed", c.seed);
  r.reject_unknown();
  for (auto& p : c.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ValidationError("invalid finetune config", problems);
  return c;
}

Json to_json(const MarkerTaskConfig& c) {
  return Json{{"num_train", c.num_train},
              {"num_dev", c.num_dev},
              {"context_len", c.context_len},
              {"min_answer", c.min_answer},
              {"max_answer", c.max_answer},
              {"unanswerable_rate", c.unanswerable_rate},
              {"seed", c.seed},
              {"open_marker", c.open_marker},
              {"close_marker", c.close_marker}};
}

MarkerTaskConfig marker_task_config_from_json(const Json& j) {
  MarkerTaskConfig c;
  std::vector<std::string> problems;
  FieldReader r(j, "task", problems);
  r.read("num_train", c.num_train);
  r.read("num_dev", c.num_dev);
  r.read("context_len", c.context_len);
  r.read("min_answer", c.min_answer);
  r.read("max_answer", c.max_answer);
  r.read("unanswerable_rate", c.unanswerable_rate);
  r.read("seed", c.seed);
  r.read("open_marker", c.open_marker);
  r.read("close_marker", c.close_marker);
  r.reject_unknown();
  for (auto& p : c.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ValidationError("invalid marker task config", problems);
  return c;
}

// ---------------------------------------------------------------- fine-tuning

namespace {

GridPointResult train_grid_point(Model<float>& model, const std::vector<SpanSelectExample>& train,
                                 const std::vector<SpanSelectExample>& dev, const FinetuneConfig& cfg,
                                 double lr, int batch_size) {
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((train.size() + bs - 1) / bs);
  const std::int64_t total = steps_per_epoch * cfg.epochs;
  const auto warmup = static_cast<std::int64_t>(std::llround(cfg.warmup_frac * static_cast<double>(total)));
  const Schedule schedule{std::clamp<std::int64_t>(warmup, 1, std::max<std::int64_t>(1, total - 1)), lr, total};
  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  auto state = OptimizerState<float>::zeros_for(model.params(), adam);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  double last_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = keyed_rng(cfg.seed, {stream::kBatch, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t i = 0; i < order.size(); i += bs) {
      std::vector<SpanSelectExample> batch;
      for (std::size_t k = i; k < std::min(order.size(), i + bs); ++k) batch.push_back(train[order[k]]);
      ++step;
      Rng dropout_rng = keyed_rng(cfg.seed, {stream::kDropout, static_cast<std::uint64_t>(step)});
      auto res = model.span_select_loss(batch, EvalOptions{true, &dropout_rng, true});
      if (!std::isfinite(res.mean())) throw NonFiniteError("span_select", "non-finite fine-tuning loss");
      if (cfg.clip_norm > 0.0) clip_global_norm(res.grads, cfg.clip_norm);
      optimizer_step(model.params(), res.grads, state, total >= 2 ? lr_at(schedule, step) : lr);
      last_loss = res.mean();
    }
  }
  GridPointResult out;
  out.learning_rate = lr;
  out.batch_size = batch_size;
  out.final_loss = last_loss;
  out.train = evaluate_span_select(model, train, cfg.max_answer_len);
  out.dev = evaluate_span_select(model, dev, cfg.max_answer_len);
  return out;
}

}  // namespace

FinetuneResult finetune_span(const Model<float>& pretrained, const std::vector<QaExample>& train,
                             const std::vector<QaExample>& dev, const FinetuneConfig& cfg, const SpecialIds& specials) {
  if (auto p = cfg.problems(); !p.empty()) throw ValidationError("invalid finetune config", p);
  const auto max_len = static_cast<std::size_t>(pretrained.config().max_positions);
  FinetuneResult result{{}, 0, 0, pretrained};
  auto pack_all = [&](const std::vector<QaExample>& in) {
    std::vector<SpanSelectExample> out;
    for (const auto& ex : in) {
      if (auto packed = pack_qa_example(ex, specials, max_len)) {
        out.push_back(std::move(*packed));
      } else {
        ++result.rejected;
      }
    }
    return out;
  };
  const auto train_packed = pack_all(train);
  const auto dev_packed = pack_all(dev);
  if (train_packed.empty()) throw ValidationError("no fine-tuning example fits the model's sequence length");

  for (double lr : cfg.learning_rates) {
    for (int bs : cfg.batch_sizes) {
      Model<float> model = pretrained;
      GridPointResult point = train_grid_point(model, train_packed, dev_packed, cfg, lr, bs);
      result.grid.push_back(point);
      const auto& best = result.grid[result.best];
      const bool better = result.grid.size() == 1 || point.dev.f1 > best.dev.f1 ||
                          (point.dev.f1 == best.dev.f1 && point.dev.exact_match > best.dev.exact_match);
      if (better) {
        result.best = result.grid.size() - 1;
        result.best_model = std::move(model);
      }
    }
  }
  return result;
}

}  // namespace spanlab
