#include "spanlab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace spanlab {

// ---------------------------------------------------------------- data

const std::vector<std::vector<TokenSpan>>* PretrainData::spans_for(MaskingScheme scheme) const {
  if (scheme == MaskingScheme::kNamedEntity) return &entity_spans;
  if (scheme == MaskingScheme::kNounPhrase) return &noun_phrase_spans;
  return nullptr;
}

PretrainData make_pretrain_data(const std::vector<std::string>& docs, Vocabulary vocab) {
  PretrainData data;
  data.docs = tokenize_documents(docs, vocab);
  data.vocab = std::move(vocab);
  return data;
}

PretrainData load_pretrain_data(const TrainRunConfig& cfg) {
  if (cfg.data.corpus.empty()) throw ValidationError("data.corpus is not set");
  const auto docs = read_documents(cfg.data.corpus);
  if (docs.empty()) throw ValidationError("corpus " + cfg.data.corpus + " holds no documents");
  Vocabulary vocab = cfg.data.vocab.empty() ? build_vocab(docs, cfg.data.vocab_size)
                                            : Vocabulary::load(cfg.data.vocab, cfg.data.counts);
  PretrainData data = make_pretrain_data(docs, std::move(vocab));
  if (!cfg.data.entity_annotations.empty() && cfg.masking.scheme == MaskingScheme::kNamedEntity) {
    data.entity_spans = annotation_token_spans(data.docs, read_annotations(cfg.data.entity_annotations));
  }
  if (!cfg.data.noun_phrase_annotations.empty() && cfg.masking.scheme == MaskingScheme::kNounPhrase) {
    data.noun_phrase_spans = annotation_token_spans(data.docs, read_annotations(cfg.data.noun_phrase_annotations));
  }
  return data;
}

// ---------------------------------------------------------------- example stream

namespace {

MaskedExample mask_unit(const TrainRunConfig& cfg, const PretrainData& data, const Block& unit,
                        UnigramSampler& unigram, std::uint64_t epoch, std::uint64_t unit_index) {
  Rng rng = keyed_rng(cfg.seed, {stream::kMask, epoch, unit_index});
  std::vector<TokenSpan> ann;
  const std::vector<TokenSpan>* ann_ptr = nullptr;
  if (const auto* doc_spans = data.spans_for(cfg.masking.scheme)) {
    ann = annotations_for_block(unit, *doc_spans);
    ann_ptr = &ann;
  }
  return sample_mask(unit, cfg.masking, ann_ptr, unigram, data.vocab.specials(), rng);
}

std::vector<Block> epoch_units(const TrainRunConfig& cfg, const PretrainData& data,
                               const std::vector<Block>& blocks, std::uint64_t epoch) {
  if (cfg.pipeline == Pipeline::kSingleSequence) return blocks;
  std::vector<Block> units;
  for (const auto& pair : sample_epoch_pairs(data.docs, static_cast<std::size_t>(cfg.n_max), cfg.seed, epoch)) {
    units.push_back(make_pair_block(pair, data.vocab.specials()));
  }
  return units;
}

}  // namespace

ExampleStream::ExampleStream(const TrainRunConfig& cfg, const PretrainData& data)
    : cfg_(&cfg), data_(&data), unigram_(data.vocab) {
  if (cfg.pipeline == Pipeline::kSingleSequence) {
    blocks_ = segment_blocks(data.docs, static_cast<std::size_t>(cfg.n_max), data.vocab.specials());
  }
  start_epoch(0);
}

void ExampleStream::start_epoch(std::uint64_t epoch) {
  epoch_ = epoch;
  units_ = epoch_units(*cfg_, *data_, blocks_, epoch);
  if (units_.empty()) throw ValidationError("corpus yields no training examples");
  order_.resize(units_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng = keyed_rng(cfg_->seed, {stream::kBatch, epoch});
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

MaskedExample ExampleStream::next() {
  if (cursor_ == order_.size()) start_epoch(epoch_ + 1);
  const std::size_t unit = order_[cursor_++];
  ++consumed_;
  return mask_unit(*cfg_, *data_, units_[unit], unigram_, epoch_, unit);
}

MaskedBatch ExampleStream::next_batch(std::size_t size) {
  MaskedBatch batch;
  batch.reserve(size);
  for (std::size_t i = 0; i < size; ++i) batch.push_back(next());
  return batch;
}

MaskedBatch mask_epoch(const TrainRunConfig& cfg, const PretrainData& data, std::uint64_t epoch) {
  UnigramSampler unigram(data.vocab);
  std::vector<Block> blocks;
  if (cfg.pipeline == Pipeline::kSingleSequence) {
    blocks = segment_blocks(data.docs, static_cast<std::size_t>(cfg.n_max), data.vocab.specials());
  }
  const auto units = epoch_units(cfg, data, blocks, epoch);
  MaskedBatch out;
  for (std::size_t i = 0; i < units.size(); ++i) out.push_back(mask_unit(cfg, data, units[i], unigram, epoch, i));
  return out;
}

// ---------------------------------------------------------------- metrics

std::string metrics_line(const MetricsRecord& r, const Objectives& objectives) {
  auto value_or_null = [](bool on, double v) { return on ? Json(v) : Json(nullptr); };
  Json j{{"step", r.step},
         {"lr", r.lr},
         {"mlm_loss", value_or_null(objectives.mlm, r.losses.mlm_mean())},
         {"sbo_loss", value_or_null(objectives.sbo, r.losses.sbo_mean())},
         {"nsp_loss", value_or_null(objectives.nsp, r.losses.nsp_mean())},
         {"total_loss", r.losses.total()},
         {"tokens", r.tokens},
         {"tokens_per_sec", r.tokens_per_sec ? Json(*r.tokens_per_sec) : Json(nullptr)}};
  return j.dump();
}

// ---------------------------------------------------------------- pretrain

ModelConfig resolve_model_config(const TrainRunConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  if (m.vocab_size == 0) m.vocab_size = vocab.size();
  if (m.vocab_size != vocab.size()) {
    throw ValidationError("model.vocab_size " + std::to_string(m.vocab_size) + " does not match vocabulary size " +
                          std::to_string(vocab.size()));
  }
  m.sbo_max_span = cfg.masking.l_max;
  m.validate();
  return m;
}

PretrainResult pretrain(const TrainRunConfig& cfg, const PretrainData& data, const PretrainOptions& opts) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();

  PretrainResult result{Model<float>(resolve_model_config(cfg, data.vocab)), {}, 0, 0.0};
  Model<float>& model = result.model;
  model.init(cfg.seed);
  auto state = OptimizerState<float>::zeros_for(model.params(), cfg.optimizer);
  ExampleStream examples(cfg, data);

  std::ofstream log_file;
  const std::string ckpt_dir = opts.out_dir.empty() ? std::string() : opts.out_dir + "/checkpoint";
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!log_file) throw RuntimeError("cannot write " + opts.out_dir + "/metrics.jsonl");
  }
  const Json run_json = to_json(cfg);
  auto checkpoint = [&](std::int64_t step) {
    if (ckpt_dir.empty()) return;
    CheckpointMeta meta{step, run_json, Json{{"seed", cfg.seed}, {"examples_consumed", examples.consumed()},
                                              {"epoch", examples.epoch()}}};
    save_checkpoint(ckpt_dir, model, meta);
  };

  LossBreakdown interval;
  std::int64_t interval_tokens = 0;
  auto interval_start = Clock::now();
  for (std::int64_t step = 1; step <= cfg.schedule.total_steps; ++step) {
    const MaskedBatch batch = examples.next_batch(static_cast<std::size_t>(cfg.batch_size));
    Rng dropout_rng = keyed_rng(cfg.seed, {stream::kDropout, static_cast<std::uint64_t>(step)});
    LossResult<float> res;
    try {
      res = model.loss(batch, cfg.objectives, EvalOptions{true, &dropout_rng, true});
      if (!std::isfinite(res.breakdown.total())) throw NonFiniteError("loss", "non-finite training loss");
      clip_global_norm(res.grads, cfg.clip_norm);
      optimizer_step(model.params(), res.grads, state, lr_at(cfg.schedule, step));
    } catch (const NonFiniteError& e) {
      if (log_file) log_file.flush();
      throw RuntimeError("training diverged at step " + std::to_string(step) + " (" + e.what() +
                         "); last good checkpoint kept");
    }
    result.steps_run = step;
    interval += res.breakdown;
    for (const auto& ex : batch) interval_tokens += static_cast<std::int64_t>(ex.input_ids.size());

    const bool last = step == cfg.schedule.total_steps;
    if (step % cfg.log_every == 0 || last) {
      MetricsRecord rec{step, lr_at(cfg.schedule, step), interval, interval_tokens, std::nullopt};
      if (!cfg.deterministic) {
        const double secs = std::chrono::duration<double>(Clock::now() - interval_start).count();
        rec.tokens_per_sec = secs > 0 ? static_cast<double>(interval_tokens) / secs : 0.0;
      }
      result.log.push_back(rec);
      if (log_file) log_file << metrics_line(rec, cfg.objectives) << '\n' << std::flush;
      if (opts.on_log) opts.on_log(rec);
      interval = LossBreakdown{};
      interval_tokens = 0;
      interval_start = Clock::now();
      if (opts.stop_below && rec.losses.total() < *opts.stop_below) {
        checkpoint(step);
        break;
      }
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) checkpoint(step);
    if (last) checkpoint(step);
  }
  result.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return result;
}

LossBreakdown evaluate_pretrain(const Model<float>& model, const TrainRunConfig& cfg, const PretrainData& data,
                                std::uint64_t epoch_key) {
  const MaskedBatch batch = mask_epoch(cfg, data, epoch_key);
  LossBreakdown total;
  // chunks keep peak memory flat; the breakdown is additive
  for (std::size_t i = 0; i < batch.size(); i += 64) {
    MaskedBatch chunk(batch.begin() + static_cast<std::ptrdiff_t>(i),
                      batch.begin() + static_cast<std::ptrdiff_t>(std::min(batch.size(), i + 64)));
    total += model.loss(chunk, cfg.objectives, EvalOptions{false, nullptr, false}).breakdown;
  }
  return total;
}

}  // namespace spanlab
