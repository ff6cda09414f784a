#include "spanlab/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "spanlab/checkpoint.hpp"
#include "spanlab/evalsuite.hpp"
#include "spanlab/finetune.hpp"
#include "spanlab/training.hpp"

namespace spanlab {

namespace fs = std::filesystem;

Json RunManifest::to_json() const {
  Json j{{"tool", "spanlab"},
         {"version", kToolVersion},
         {"command", command},
         {"argv", argv},
         {"seed", seed},
         {"config", config},
         {"artifacts", Json::object()},
         {"timings_sec", Json::object()},
         {"started_at", started_at},
         {"finished_at", finished_at}};
  for (const auto& [k, v] : artifacts) j["artifacts"][k] = v;
  for (const auto& [k, v] : timings) j["timings_sec"][k] = v;
  return j;
}

void write_run_manifest(const std::string& dir, const RunManifest& manifest) {
  write_file_atomic(dir + "/manifest.json", manifest.to_json().dump(2) + "\n");
}

std::uint64_t default_seed(std::uint64_t fallback) {
  const char* env = std::getenv(kSeedEnvVar);
  if (env == nullptr || *env == '\0') return fallback;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::strlen(env)) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ValidationError(std::string(kSeedEnvVar) + "='" + env + "' is not an unsigned integer");
  }
}

namespace {

using Clock = std::chrono::steady_clock;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path);
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(std::string(what) + ": '" + item + "' is not a number");
    }
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (double v : parse_double_list(s, "--seeds")) {
    if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v))) {
      throw ValidationError("--seeds expects non-negative integers");
    }
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

/// Flags shared by every command that assembles a run config.
struct RunConfigFlags {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::string objectives;
  std::string pipeline;
  std::string scheme;
  std::int64_t seed = -1;
  std::int64_t steps = -1;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "JSON run config file");
    app->add_option("--preset", preset, "Named preset: spanbert, bert-baseline, bert-1seq, paper-scale, overfit");
    app->add_option("--set", sets, "Override a config key, e.g. --set masking.geo_p=0.3 (repeatable)");
    app->add_option("--objectives", objectives, "Comma list of mlm, sbo, nsp");
    app->add_option("--pipeline", pipeline, "1seq or 2seq");
    app->add_option("--scheme", scheme, "subword, whole_word, named_entity, noun_phrase, geometric_span");
    app->add_option("--seed", seed, "Master seed (default: config, else $SPANLAB_SEED)");
    app->add_option("--steps", steps, "Override schedule.total_steps");
  }

  Json assemble() const {
    if (!config.empty() && !preset.empty()) throw ValidationError("--config and --preset are mutually exclusive");
    Json j;
    bool seed_from_file = false;
    if (!config.empty()) {
      j = read_json_file(config);
      seed_from_file = j.is_object() && j.contains("seed");
    } else {
      j = preset_json(preset.empty() ? "spanbert" : preset);
    }
    if (!seed_from_file) j["seed"] = default_seed(j.value("seed", std::uint64_t{1234}));
    for (const auto& s : sets) apply_override(j, s);
    if (!objectives.empty()) j["objectives"] = objectives;
    if (!pipeline.empty()) j["pipeline"] = pipeline;
    if (!scheme.empty()) j["masking"]["scheme"] = scheme;
    if (seed >= 0) j["seed"] = seed;
    if (steps >= 0) j["schedule"]["total_steps"] = steps;
    return j;
  }
};

void print_problems(const ValidationError& e) {
  std::cerr << "error: " << e.what() << '\n';
  for (const auto& p : e.problems()) std::cerr << "  - " << p << '\n';
}

void print_checks(const std::vector<CheckResult>& checks) {
  for (const auto& c : checks) std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
}

// ---------------------------------------------------------------- commands

int cmd_build_vocab(const std::string& corpus, int size, const std::string& out, const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  RunManifest m{"build-vocab", argv, Json{{"corpus", corpus}, {"size", size}}, 0, {}, {}, utc_now(), {}};
  if (!fs::exists(corpus)) throw ValidationError("corpus file " + corpus + " does not exist");
  const auto docs = read_documents(corpus);
  const Vocabulary vocab = build_vocab(docs, size);
  fs::create_directories(out);
  vocab.save(out + "/vocab.txt", out + "/counts.tsv");
  m.artifacts = {{"vocab", out + "/vocab.txt"}, {"counts", out + "/counts.tsv"}};
  m.timings["build_vocab"] = seconds_since(t0);
  m.finished_at = utc_now();
  write_run_manifest(out, m);
  std::cout << "wrote " << vocab.size() << " entries to " << out << "/vocab.txt\n";
  return kExitOk;
}

int cmd_pretrain(const RunConfigFlags& flags, const std::string& out, bool quiet, const std::vector<std::string>& argv) {
  const Json j = flags.assemble();
  const TrainRunConfig cfg = train_config_from_json(j);
  RunManifest m{"pretrain", argv, to_json(cfg), cfg.seed, {}, {}, utc_now(), {}};
  auto t0 = Clock::now();
  const PretrainData data = load_pretrain_data(cfg);
  m.timings["load_data"] = seconds_since(t0);
  fs::create_directories(out);
  data.vocab.save(out + "/vocab.txt", out + "/counts.tsv");
  PretrainOptions opts;
  opts.out_dir = out;
  if (!quiet) opts.on_log = [&](const MetricsRecord& r) { std::cout << metrics_line(r, cfg.objectives) << '\n'; };
  t0 = Clock::now();
  const PretrainResult res = pretrain(cfg, data, opts);
  m.timings["pretrain"] = seconds_since(t0);
  m.artifacts = {{"metrics", out + "/metrics.jsonl"},
                 {"checkpoint", out + "/checkpoint"},
                 {"vocab", out + "/vocab.txt"},
                 {"counts", out + "/counts.tsv"}};
  std::int64_t tokens = 0;
  for (const auto& r : res.log) tokens += r.tokens;
  m.timings["throughput_tokens_per_sec"] = res.wall_seconds > 0 ? static_cast<double>(tokens) / res.wall_seconds : 0.0;
  m.finished_at = utc_now();
  write_run_manifest(out, m);
  if (!res.log.empty()) {
    std::cout << "final combined loss " << res.log.back().losses.total() << " after " << res.steps_run << " steps\n";
  }
  return kExitOk;
}

struct FinetuneFlags {
  std::string checkpoint;
  std::string train;
  std::string dev;
  std::string vocab;
  std::string counts;
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> task_sets;
  std::string lrs;
  std::string batch_sizes;
  int epochs = -1;
  std::int64_t seed = -1;
  std::string out;
};

int cmd_finetune(const FinetuneFlags& f, const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  const LoadedCheckpoint ckpt = load_checkpoint(f.checkpoint);
  const std::string parent = fs::path(f.checkpoint).lexically_normal().parent_path().string();
  const std::string vocab_path = f.vocab.empty() ? parent + "/vocab.txt" : f.vocab;
  const std::string counts_path = f.counts.empty() && f.vocab.empty() ? parent + "/counts.tsv" : f.counts;
  const Vocabulary vocab = Vocabulary::load(vocab_path, counts_path);
  if (vocab.size() != ckpt.model.config().vocab_size) {
    throw ValidationError("vocabulary " + vocab_path + " has " + std::to_string(vocab.size()) +
                          " entries but the checkpoint expects " + std::to_string(ckpt.model.config().vocab_size));
  }

  Json ft_json = f.config.empty() ? to_json(FinetuneConfig{}) : read_json_file(f.config);
  for (const auto& s : f.sets) apply_override(ft_json, s);
  if (!f.lrs.empty()) ft_json["learning_rates"] = parse_double_list(f.lrs, "--lrs");
  if (!f.batch_sizes.empty()) {
    std::vector<int> bs;
    for (double v : parse_double_list(f.batch_sizes, "--batch-sizes")) bs.push_back(static_cast<int>(v));
    ft_json["batch_sizes"] = bs;
  }
  if (f.epochs >= 0) ft_json["epochs"] = f.epochs;
  ft_json["seed"] = f.seed >= 0 ? static_cast<std::uint64_t>(f.seed) : default_seed(ft_json.value("seed", std::uint64_t{1}));
  const FinetuneConfig ft = finetune_config_from_json(ft_json);

  std::vector<QaExample> train, dev;
  Json task_json = nullptr;
  if (!f.train.empty()) {
    train = read_qa_dataset(f.train, vocab);
    if (!f.dev.empty()) dev = read_qa_dataset(f.dev, vocab);
  } else {
    task_json = to_json(MarkerTaskConfig{});
    for (const auto& s : f.task_sets) apply_override(task_json, s);
    const MarkerTask task = make_marker_task(vocab, marker_task_config_from_json(task_json));
    train = task.train;
    dev = task.dev;
  }
  const FinetuneResult res = finetune_span(ckpt.model, train, dev, ft, vocab.specials());

  Json grid = Json::array();
  for (const auto& g : res.grid) {
    grid.push_back({{"learning_rate", g.learning_rate},
                    {"batch_size", g.batch_size},
                    {"final_loss", g.final_loss},
                    {"train_em", g.train.exact_match},
                    {"train_f1", g.train.f1},
                    {"dev_em", g.dev.exact_match},
                    {"dev_f1", g.dev.f1}});
  }
  const auto& best = res.best_point();
  Json report{{"grid", grid},
              {"best", grid[res.best]},
              {"rejected", res.rejected},
              {"train_examples", train.size()},
              {"dev_examples", dev.size()}};
  std::cout << "best lr " << best.learning_rate << " batch " << best.batch_size << ": dev EM " << best.dev.exact_match
            << " F1 " << best.dev.f1 << ", train EM " << best.train.exact_match << "; rejected " << res.rejected
            << '\n';
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_file_atomic(f.out + "/finetune.json", report.dump(2) + "\n");
    save_checkpoint(f.out + "/checkpoint", res.best_model, CheckpointMeta{0, to_json(ft), Json{{"seed", ft.seed}}});
    RunManifest m{"finetune", argv,
                  Json{{"finetune", to_json(ft)}, {"task", task_json}, {"checkpoint", f.checkpoint},
                       {"train", f.train}, {"dev", f.dev}},
                  ft.seed, {{"report", f.out + "/finetune.json"}, {"checkpoint", f.out + "/checkpoint"}},
                  {{"finetune", seconds_since(t0)}}, utc_now(), utc_now()};
    write_run_manifest(f.out, m);
  } else {
    std::cout << report.dump(2) << '\n';
  }
  return kExitOk;
}

int cmd_mask_stats(const RunConfigFlags& flags, std::uint64_t draws, std::size_t blocks, std::size_t maskable,
                   const std::string& out, const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  const TrainRunConfig cfg = train_config_from_json(flags.assemble());
  const auto texts = read_documents(cfg.data.corpus);
  const Vocabulary vocab = build_vocab(texts, std::max(cfg.data.vocab_size, min_vocab_size(texts)));
  const auto docs = tokenize_documents(texts, vocab);
  MaskStatsConfig mc{cfg.masking, draws, blocks, maskable, cfg.seed};
  const auto sample = stats_blocks(docs, maskable, std::min<std::size_t>(blocks, 256), vocab.specials());
  const MaskStatsReport report = mask_stats(mc, sample, vocab);
  const std::string csv = report.to_csv();
  if (!out.empty()) {
    fs::create_directories(out);
    write_file_atomic(out + "/mask_stats.csv", csv);
    write_file_atomic(out + "/mask_stats.json", report.to_json().dump(2) + "\n");
    RunManifest m{"mask-stats", argv,
                  Json{{"run", to_json(cfg)}, {"draws", draws}, {"blocks", blocks}, {"block_maskable", maskable}},
                  cfg.seed, {{"csv", out + "/mask_stats.csv"}, {"json", out + "/mask_stats.json"}},
                  {{"mask_stats", seconds_since(t0)}}, utc_now(), utc_now()};
    write_run_manifest(out, m);
  }
  std::cout << csv;
  return report.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_grad_check(GradCheckConfig cfg, const std::string& objectives, double threshold, const std::string& out,
                   const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  if (!objectives.empty()) cfg.objectives = parse_objectives(objectives);
  const GradCheckReport r = grad_check(cfg);
  for (const auto& t : r.tensors) {
    std::cout << std::left << std::setw(32) << t.name << " rel_err " << t.rel_error << '\n';
  }
  std::cout << "max relative error " << r.max_rel_error << " (" << r.worst_tensor << ") over " << r.coordinates
            << " coordinates; threshold " << threshold << '\n';
  if (!out.empty()) {
    Json tensors = Json::array();
    for (const auto& t : r.tensors) {
      tensors.push_back({{"name", t.name},
                         {"rel_error", t.rel_error},
                         {"max_abs_analytic", t.max_abs_analytic},
                         {"max_abs_numeric", t.max_abs_numeric}});
    }
    fs::create_directories(out);
    const Json report{{"max_rel_error", r.max_rel_error}, {"worst_tensor", r.worst_tensor},
                      {"threshold", threshold},           {"passed", r.max_rel_error < threshold},
                      {"tensors", tensors}};
    write_file_atomic(out + "/grad_check.json", report.dump(2) + "\n");
    RunManifest m{"grad-check", argv,
                  Json{{"model", to_json(cfg.model)}, {"objectives", to_string(cfg.objectives)}, {"step", cfg.step},
                       {"trials", cfg.trials}, {"train_mode", cfg.train_mode}},
                  cfg.seed, {{"report", out + "/grad_check.json"}}, {{"grad_check", seconds_since(t0)}}, utc_now(),
                  utc_now()};
    write_run_manifest(out, m);
  }
  return r.max_rel_error < threshold ? kExitOk : kExitCheckFailed;
}

int cmd_ablate(const RunConfigFlags& flags, const std::string& grid, const std::string& seeds,
               const std::string& finetune_config, const std::vector<std::string>& task_sets, const std::string& out,
               const std::vector<std::string>& argv) {
  const auto t0 = Clock::now();
  const Json base = flags.assemble();
  AblationConfig cfg;
  cfg.rows = grid_preset(grid, base);
  if (!seeds.empty()) cfg.seeds = parse_seed_list(seeds);
  if (!finetune_config.empty()) cfg.finetune = finetune_config_from_json(read_json_file(finetune_config));
  Json task_json = to_json(MarkerTaskConfig{});
  for (const auto& s : task_sets) apply_override(task_json, s);
  cfg.task = marker_task_config_from_json(task_json);
  const AblationReport report = run_ablation(cfg, [](const std::string& msg) { std::cerr << "running " << msg << '\n'; });
  std::cout << report.summary_table();
  if (!out.empty()) {
    fs::create_directories(out);
    write_file_atomic(out + "/ablation.csv", report.to_csv());
    write_file_atomic(out + "/ablation.jsonl", report.to_jsonl());
    RunManifest m{"ablate", argv,
                  Json{{"grid", grid}, {"base", base}, {"seeds", cfg.seeds}, {"finetune", to_json(cfg.finetune)},
                       {"task", task_json}},
                  cfg.seeds.front(), {{"csv", out + "/ablation.csv"}, {"jsonl", out + "/ablation.jsonl"}},
                  {{"ablate", seconds_since(t0)}}, utc_now(), utc_now()};
    write_run_manifest(out, m);
  }
  for (const auto& row : report.rows) {
    for (const auto& r : row.runs) {
      if (!r.ok) return kExitRuntime;
    }
  }
  return kExitOk;
}

int cmd_inspect(const std::string& dir, bool full) {
  const Json manifest = read_manifest(dir);
  if (full) {
    std::cout << manifest.dump(2) << '\n';
    return kExitOk;
  }
  std::int64_t scalars = 0;
  for (const auto& t : manifest.at("tensors")) {
    std::int64_t n = 1;
    std::string shape;
    for (const auto& d : t.at("shape")) {
      n *= d.get<std::int64_t>();
      shape += (shape.empty() ? "" : "x") + std::to_string(d.get<std::int64_t>());
    }
    scalars += n;
    std::cout << std::left << std::setw(32) << t.at("name").get<std::string>() << ' ' << shape << '\n';
  }
  std::cout << "step " << manifest.at("step") << ", " << manifest.at("tensors").size() << " tensors, " << scalars
            << " parameters, dtype " << manifest.at("dtype").get<std::string>() << '\n';
  std::cout << "model " << manifest.at("model_config").dump() << '\n';
  return kExitOk;
}

int cmd_check_invariants(const std::string& suite, const std::string& corpus, std::int64_t seed) {
  InvariantOptions opts;
  opts.corpus = corpus;
  opts.seed = seed >= 0 ? static_cast<std::uint64_t>(seed) : default_seed(opts.seed);
  const auto checks = assert_invariants(suite, opts);
  print_checks(checks);
  return all_passed(checks) ? kExitOk : kExitCheckFailed;
}

int cmd_make_task(const std::string& vocab_path, const std::string& counts, const std::vector<std::string>& sets,
                  const std::string& out, const std::vector<std::string>& argv) {
  const Vocabulary vocab = Vocabulary::load(vocab_path, counts);
  Json task_json = to_json(MarkerTaskConfig{});
  task_json["seed"] = default_seed(task_json.value("seed", std::uint64_t{7}));
  for (const auto& s : sets) apply_override(task_json, s);
  const MarkerTaskConfig cfg = marker_task_config_from_json(task_json);
  const MarkerTask task = make_marker_task(vocab, cfg);
  fs::create_directories(out);
  write_qa_dataset(out + "/train.jsonl", task.train);
  write_qa_dataset(out + "/dev.jsonl", task.dev);
  RunManifest m{"make-task", argv, task_json, cfg.seed,
                {{"train", out + "/train.jsonl"}, {"dev", out + "/dev.jsonl"}}, {}, utc_now(), utc_now()};
  write_run_manifest(out, m);
  std::cout << "wrote " << task.train.size() << " train and " << task.dev.size() << " dev examples to " << out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"spanlab: span-masking language model pre-training lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::function<int()> action;

  auto* bv = app.add_subcommand("build-vocab", "Build a subword vocabulary and unigram counts from a corpus");
  std::string bv_corpus, bv_out;
  int bv_size = 200;
  bv->add_option("--corpus", bv_corpus, "Corpus text file (blank-line separated documents)")->required();
  bv->add_option("--size", bv_size, "Target vocabulary size");
  bv->add_option("--out", bv_out, "Output directory")->required();
  bv->callback([&] { action = [&] { return cmd_build_vocab(bv_corpus, bv_size, bv_out, args); }; });

  auto* pt = app.add_subcommand("pretrain", "Pre-train a model; writes metrics, checkpoint and manifest");
  RunConfigFlags pt_flags;
  std::string pt_out;
  bool pt_quiet = false;
  pt_flags.add_to(pt);
  pt->add_option("--out", pt_out, "Output directory")->required();
  pt->add_flag("--quiet", pt_quiet, "Do not echo metrics to stdout");
  pt->callback([&] { action = [&] { return cmd_pretrain(pt_flags, pt_out, pt_quiet, args); }; });

  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on a span-selection task with a grid search");
  FinetuneFlags ff;
  ft->add_option("--checkpoint", ff.checkpoint, "Checkpoint directory")->required();
  ft->add_option("--train", ff.train, "Train JSONL (default: generated marker task)");
  ft->add_option("--dev", ff.dev, "Dev JSONL");
  ft->add_option("--vocab", ff.vocab, "Vocabulary file (default: next to the checkpoint)");
  ft->add_option("--counts", ff.counts, "Unigram counts file");
  ft->add_option("--config", ff.config, "JSON fine-tuning config");
  ft->add_option("--set", ff.sets, "Override a fine-tuning key, e.g. --set epochs=8");
  ft->add_option("--task-set", ff.task_sets, "Override a marker task key, e.g. --task-set num_train=256");
  ft->add_option("--lrs", ff.lrs, "Comma list of learning rates");
  ft->add_option("--batch-sizes", ff.batch_sizes, "Comma list of batch sizes");
  ft->add_option("--epochs", ff.epochs, "Epochs per grid point");
  ft->add_option("--seed", ff.seed, "Seed (default: config, else $SPANLAB_SEED)");
  ft->add_option("--out", ff.out, "Output directory");
  ft->callback([&] { action = [&] { return cmd_finetune(ff, args); }; });

  auto* ms = app.add_subcommand("mask-stats", "Span-length and masking statistics with pass/fail checks");
  RunConfigFlags ms_flags;
  std::uint64_t ms_draws = 1'000'000;
  std::size_t ms_blocks = 10'000, ms_maskable = 510;
  std::string ms_out;
  ms_flags.add_to(ms);
  ms->add_option("--draws", ms_draws, "Span-length draws (>= 10000)");
  ms->add_option("--blocks", ms_blocks, "Masked blocks for budget/replacement/boundary statistics");
  ms->add_option("--block-tokens", ms_maskable, "Maskable tokens per block");
  ms->add_option("--out", ms_out, "Output directory for CSV/JSON reports");
  ms->callback([&] {
    action = [&] { return cmd_mask_stats(ms_flags, ms_draws, ms_blocks, ms_maskable, ms_out, args); };
  });

  auto* gc = app.add_subcommand("grad-check", "Compare analytic gradients with central finite differences");
  GradCheckConfig gcfg;
  std::string gc_objectives, gc_out;
  double gc_threshold = 1e-4;
  gc->add_option("--layers", gcfg.model.num_layers, "Encoder layers");
  gc->add_option("--hidden", gcfg.model.hidden_dim, "Hidden size");
  gc->add_option("--heads", gcfg.model.num_heads, "Attention heads");
  gc->add_option("--ffn", gcfg.model.ffn_dim, "Feed-forward size");
  gc->add_option("--vocab", gcfg.model.vocab_size, "Vocabulary size");
  gc->add_option("--batch", gcfg.batch, "Examples per batch");
  gc->add_option("--tokens", gcfg.body_len, "Body tokens per example");
  gc->add_option("--trials", gcfg.trials, "Independent random batches");
  gc->add_option("--step", gcfg.step, "Finite-difference step");
  gc->add_option("--objectives", gc_objectives, "Comma list of mlm, sbo, nsp");
  gc->add_flag("--train-mode", gcfg.train_mode, "Enable dropout with a fixed mask");
  gc->add_option("--seed", gcfg.seed, "Seed");
  gc->add_option("--threshold", gc_threshold, "Pass threshold on the max relative error");
  gc->add_option("--out", gc_out, "Output directory");
  gc->callback([&] {
    action = [&] { return cmd_grad_check(gcfg, gc_objectives, gc_threshold, gc_out, args); };
  });

  auto* ab = app.add_subcommand("ablate", "Run a masking/objective ablation grid on the marker task");
  RunConfigFlags ab_flags;
  std::string ab_grid = "table8", ab_seeds, ab_ft, ab_out;
  std::vector<std::string> ab_task_sets;
  ab_flags.add_to(ab);
  ab->add_option("--grid", ab_grid, "Grid preset: table7 or table8");
  ab->add_option("--seeds", ab_seeds, "Comma list of seeds (default 1,2,3,4,5)");
  ab->add_option("--finetune-config", ab_ft, "JSON fine-tuning config");
  ab->add_option("--task-set", ab_task_sets, "Override a marker task key");
  ab->add_option("--out", ab_out, "Output directory for CSV/JSONL reports");
  ab->callback([&] {
    action = [&] { return cmd_ablate(ab_flags, ab_grid, ab_seeds, ab_ft, ab_task_sets, ab_out, args); };
  });

  auto* ic = app.add_subcommand("inspect-checkpoint", "Summarize a checkpoint manifest");
  std::string ic_dir;
  bool ic_full = false;
  ic->add_option("dir", ic_dir, "Checkpoint directory")->required();
  ic->add_flag("--json", ic_full, "Print the full manifest");
  ic->callback([&] { action = [&] { return cmd_inspect(ic_dir, ic_full); }; });

  auto* ci = app.add_subcommand("check-invariants", "Run invariant suites as machine checks");
  std::string ci_suite = "all", ci_corpus;
  std::int64_t ci_seed = -1;
  ci->add_option("--suite", ci_suite, "masking, sbo, loss, schedule, optimizer, nsp or all");
  ci->add_option("--corpus", ci_corpus, "Corpus for data-driven checks (default: bundled toy corpus)");
  ci->add_option("--seed", ci_seed, "Seed");
  ci->callback([&] { action = [&] { return cmd_check_invariants(ci_suite, ci_corpus, ci_seed); }; });

  auto* mt = app.add_subcommand("make-task", "Write a synthetic marker-task dataset as JSONL");
  std::string mt_vocab, mt_counts, mt_out;
  std::vector<std::string> mt_sets;
  mt->add_option("--vocab", mt_vocab, "Vocabulary file")->required();
  mt->add_option("--counts", mt_counts, "Unigram counts file");
  mt->add_option("--set", mt_sets, "Override a marker task key");
  mt->add_option("--out", mt_out, "Output directory")->required();
  mt->callback([&] { action = [&] { return cmd_make_task(mt_vocab, mt_counts, mt_sets, mt_out, args); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  try {
    return action ? action() : kExitValidation;
  } catch (const ValidationError& e) {
    print_problems(e);
    return kExitValidation;
  } catch (const RuntimeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace spanlab
