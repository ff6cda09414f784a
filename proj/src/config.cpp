#include "spanlab/config.hpp"

#include "spanlab/field_reader.hpp"

namespace spanlab {

namespace {

void read_masking(const Json& j, MaskingConfig& c, std::vector<std::string>& problems) {
  FieldReader r(j, "masking", problems);
  if (const Json* s = r.take("scheme")) {
    try {
      c.scheme = parse_masking_scheme(s->get<std::string>());
    } catch (const std::exception& e) {
      problems.push_back(std::string("masking.scheme: ") + e.what());
    }
  }
  r.read("budget_rate", c.budget_rate);
  r.read("geo_p", c.geo_p);
  r.read("l_max", c.l_max);
  r.read("mask_prob", c.mask_prob);
  r.read("random_prob", c.random_prob);
  r.read("keep_prob", c.keep_prob);
  r.read("max_attempts", c.max_attempts);
  r.read("annotation_prob", c.annotation_prob);
  r.reject_unknown();
}

void read_model(const Json& j, ModelConfig& c, std::vector<std::string>& problems) {
  FieldReader r(j, "model", problems);
  r.read("vocab_size", c.vocab_size);
  r.read("hidden_dim", c.hidden_dim);
  r.read("num_layers", c.num_layers);
  r.read("num_heads", c.num_heads);
  r.read("ffn_dim", c.ffn_dim);
  r.read("max_positions", c.max_positions);
  r.read("sbo_pos_dim", c.sbo_pos_dim);
  r.read("sbo_hidden_dim", c.sbo_hidden_dim);
  r.read("sbo_max_span", c.sbo_max_span);
  r.read("dropout_rate", c.dropout_rate);
  r.read("init_std", c.init_std);
  r.read("mlm_transform", c.mlm_transform);
  r.reject_unknown();
}

}  // namespace

const std::string& DataConfig::annotations_for(MaskingScheme scheme) const {
  static const std::string kNone;
  if (scheme == MaskingScheme::kNamedEntity) return entity_annotations;
  if (scheme == MaskingScheme::kNounPhrase) return noun_phrase_annotations;
  return kNone;
}

std::string_view to_string(Pipeline p) { return p == Pipeline::kSingleSequence ? "1seq" : "2seq"; }

Pipeline parse_pipeline(std::string_view name) {
  if (name == "1seq" || name == "single_sequence") return Pipeline::kSingleSequence;
  if (name == "2seq" || name == "bisequence_nsp") return Pipeline::kBiSequence;
  throw ValidationError("unknown pipeline '" + std::string(name) + "' (expected 1seq or 2seq)");
}

std::vector<std::string> TrainRunConfig::problems() const {
  std::vector<std::string> out = masking.problems();
  auto model_problems = model.problems();
  for (auto& p : model_problems) {
    if (model.vocab_size == 0 && p.rfind("model.vocab_size", 0) == 0) continue;
    out.push_back(std::move(p));
  }
  for (auto& p : optimizer.problems()) out.push_back(std::move(p));
  for (auto& p : schedule.problems()) out.push_back(std::move(p));
  if (!objectives.mlm && !objectives.sbo && !objectives.nsp) out.push_back("objectives must enable at least one of mlm, sbo, nsp");
  if (pipeline == Pipeline::kSingleSequence && objectives.nsp) {
    out.push_back("objective nsp requires the 2seq pipeline (single-sequence training has no second segment)");
  }
  if (batch_size < 1) out.push_back("batch_size must be >= 1");
  if (n_max < (pipeline == Pipeline::kBiSequence ? 5 : 3)) out.push_back("n_max is too small for the pipeline's special tokens");
  if (model.max_positions < n_max) out.push_back("model.max_positions must be >= n_max");
  if (log_every < 1) out.push_back("log_every must be >= 1");
  if (checkpoint_every < 0) out.push_back("checkpoint_every must be >= 0");
  if (clip_norm < 0.0) out.push_back("clip_norm must be >= 0");
  if (masking.scheme == MaskingScheme::kNamedEntity && data.entity_annotations.empty()) {
    out.push_back("masking scheme named_entity requires data.entity_annotations");
  }
  if (masking.scheme == MaskingScheme::kNounPhrase && data.noun_phrase_annotations.empty()) {
    out.push_back("masking scheme noun_phrase requires data.noun_phrase_annotations");
  }
  return out;
}

void TrainRunConfig::validate() const {
  auto p = problems();
  if (!p.empty()) throw ValidationError("invalid run config", std::move(p));
}

Json to_json(const MaskingConfig& c) {
  return Json{{"scheme", std::string(to_string(c.scheme))},
              {"budget_rate", c.budget_rate},
              {"geo_p", c.geo_p},
              {"l_max", c.l_max},
              {"mask_prob", c.mask_prob},
              {"random_prob", c.random_prob},
              {"keep_prob", c.keep_prob},
              {"max_attempts", c.max_attempts},
              {"annotation_prob", c.annotation_prob}};
}

Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size},       {"hidden_dim", c.hidden_dim},
              {"num_layers", c.num_layers},       {"num_heads", c.num_heads},
              {"ffn_dim", c.ffn_dim},             {"max_positions", c.max_positions},
              {"sbo_pos_dim", c.sbo_pos_dim},     {"sbo_hidden_dim", c.sbo_hidden_dim},
              {"sbo_max_span", c.sbo_max_span},   {"dropout_rate", c.dropout_rate},
              {"init_std", c.init_std},           {"mlm_transform", c.mlm_transform}};
}

Json to_json(const TrainRunConfig& c) {
  Json objectives = Json::array();
  if (c.objectives.mlm) objectives.push_back("mlm");
  if (c.objectives.sbo) objectives.push_back("sbo");
  if (c.objectives.nsp) objectives.push_back("nsp");
  return Json{{"seed", c.seed},
              {"pipeline", std::string(to_string(c.pipeline))},
              {"objectives", objectives},
              {"masking", to_json(c.masking)},
              {"model", to_json(c.model)},
              {"optimizer",
               {{"beta1", c.optimizer.beta1},
                {"beta2", c.optimizer.beta2},
                {"epsilon", c.optimizer.epsilon},
                {"weight_decay", c.optimizer.weight_decay}}},
              {"clip_norm", c.clip_norm},
              {"schedule",
               {{"warmup_steps", c.schedule.warmup_steps},
                {"peak_lr", c.schedule.peak_lr},
                {"total_steps", c.schedule.total_steps}}},
              {"batch_size", c.batch_size},
              {"n_max", c.n_max},
              {"log_every", c.log_every},
              {"checkpoint_every", c.checkpoint_every},
              {"deterministic", c.deterministic},
              {"data",
               {{"corpus", c.data.corpus},
                {"vocab", c.data.vocab},
                {"counts", c.data.counts},
                {"vocab_size", c.data.vocab_size},
                {"entity_annotations", c.data.entity_annotations},
                {"noun_phrase_annotations", c.data.noun_phrase_annotations}}}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  std::vector<std::string> problems;
  read_model(j, c, problems);
  for (auto& p : c.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ValidationError("invalid model config", std::move(problems));
  return c;
}

TrainRunConfig train_config_from_json(const Json& j) {
  TrainRunConfig c;
  std::vector<std::string> problems;
  FieldReader r(j, "", problems);
  r.read("seed", c.seed);
  if (const Json* p = r.take("pipeline")) {
    try {
      c.pipeline = parse_pipeline(p->get<std::string>());
    } catch (const std::exception& e) {
      problems.push_back(std::string("pipeline: ") + e.what());
    }
  }
  if (const Json* o = r.take("objectives")) {
    try {
      if (o->is_string()) {
        c.objectives = parse_objectives(o->get<std::string>());
      } else {
        std::string joined;
        for (const auto& item : *o) joined += item.get<std::string>() + ",";
        c.objectives = parse_objectives(joined);
      }
    } catch (const std::exception& e) {
      problems.push_back(std::string("objectives: ") + e.what());
    }
  }
  if (const Json* m = r.take("masking")) read_masking(*m, c.masking, problems);
  if (const Json* m = r.take("model")) read_model(*m, c.model, problems);
  if (const Json* o = r.take("optimizer")) {
    FieldReader orr(*o, "optimizer", problems);
    orr.read("beta1", c.optimizer.beta1);
    orr.read("beta2", c.optimizer.beta2);
    orr.read("epsilon", c.optimizer.epsilon);
    orr.read("weight_decay", c.optimizer.weight_decay);
    orr.reject_unknown();
  }
  r.read("clip_norm", c.clip_norm);
  if (const Json* s = r.take("schedule")) {
    FieldReader sr(*s, "schedule", problems);
    sr.read("warmup_steps", c.schedule.warmup_steps);
    sr.read("peak_lr", c.schedule.peak_lr);
    sr.read("total_steps", c.schedule.total_steps);
    sr.reject_unknown();
  }
  r.read("batch_size", c.batch_size);
  r.read("n_max", c.n_max);
  r.read("log_every", c.log_every);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("deterministic", c.deterministic);
  if (const Json* d = r.take("data")) {
    FieldReader dr(*d, "data", problems);
    dr.read("corpus", c.data.corpus);
    dr.read("vocab", c.data.vocab);
    dr.read("counts", c.data.counts);
    dr.read("vocab_size", c.data.vocab_size);
    dr.read("entity_annotations", c.data.entity_annotations);
    dr.read("noun_phrase_annotations", c.data.noun_phrase_annotations);
    dr.reject_unknown();
  }
  r.reject_unknown();
  // The SBO position table always has one row per admissible span length.
  c.model.sbo_max_span = c.masking.l_max;
  for (auto& p : c.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ValidationError("invalid run config", std::move(problems));
  return c;
}

void apply_override(Json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ValidationError("override '" + std::string(assignment) + "' must look like key.path=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError("override path '" + path + "' has an empty component");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::vector<std::string> preset_names() { return {"spanbert", "bert-baseline", "bert-1seq", "paper-scale", "overfit"}; }

Json preset_json(std::string_view name) {
  Json base = to_json(TrainRunConfig{});
  const std::string data_dir = std::string(SPANLAB_SOURCE_DIR) + "/data/";
  base["data"]["corpus"] = data_dir + "toy_corpus.txt";
  base["data"]["entity_annotations"] = data_dir + "toy_entities.jsonl";
  base["data"]["noun_phrase_annotations"] = data_dir + "toy_noun_phrases.jsonl";
  if (name == "spanbert") {
    base["pipeline"] = "1seq";
    base["objectives"] = {"mlm", "sbo"};
    base["masking"]["scheme"] = "geometric_span";
  } else if (name == "bert-baseline") {
    base["pipeline"] = "2seq";
    base["objectives"] = {"mlm", "nsp"};
    base["masking"]["scheme"] = "subword";
  } else if (name == "bert-1seq") {
    base["pipeline"] = "1seq";
    base["objectives"] = {"mlm"};
    base["masking"]["scheme"] = "subword";
  } else if (name == "paper-scale") {
    // Reference values of the original large-scale run; far beyond desk scale.
    base["pipeline"] = "1seq";
    base["objectives"] = {"mlm", "sbo"};
    base["n_max"] = 512;
    base["batch_size"] = 256;
    base["model"] = to_json(ModelConfig{0, 1024, 24, 16, 4096, 512, 200, 1024, 10, 0.1, 0.02, true});
    base["schedule"] = {{"warmup_steps", 10000}, {"peak_lr", 1e-4}, {"total_steps", 2400000}};
    base["data"]["vocab_size"] = 28996;
  } else if (name == "overfit") {
    base["pipeline"] = "1seq";
    base["objectives"] = {"mlm", "sbo"};
    base["n_max"] = 128;
    base["batch_size"] = 16;
    base["model"]["hidden_dim"] = 64;
    base["model"]["num_layers"] = 2;
    base["model"]["num_heads"] = 4;
    base["model"]["ffn_dim"] = 128;
    base["model"]["sbo_hidden_dim"] = 64;
    base["model"]["dropout_rate"] = 0.0;
    base["optimizer"]["weight_decay"] = 0.0;
    base["schedule"] = {{"warmup_steps", 200}, {"peak_lr", 3e-3}, {"total_steps", 5000}};
    base["log_every"] = 100;
  } else {
    throw ValidationError("unknown preset '" + std::string(name) + "'");
  }
  return base;
}

std::vector<GridRow> grid_preset(std::string_view name, const Json& base) {
  std::vector<GridRow> rows;
  auto row = [&](std::string label, const char* scheme, const char* pipeline, std::vector<std::string> objectives) {
    Json cfg = base;
    cfg["masking"]["scheme"] = scheme;
    cfg["pipeline"] = pipeline;
    cfg["objectives"] = objectives;
    rows.push_back({std::move(label), std::move(cfg)});
  };
  if (name == "table7") {
    row("Subword Tokens", "subword", "2seq", {"mlm", "nsp"});
    row("Whole Words", "whole_word", "2seq", {"mlm", "nsp"});
    row("Named Entities", "named_entity", "2seq", {"mlm", "nsp"});
    row("Noun Phrases", "noun_phrase", "2seq", {"mlm", "nsp"});
    row("Geometric Spans", "geometric_span", "2seq", {"mlm", "nsp"});
  } else if (name == "table8") {
    row("Span Masking (2seq) + NSP", "geometric_span", "2seq", {"mlm", "nsp"});
    row("Span Masking (1seq)", "geometric_span", "1seq", {"mlm"});
    row("Span Masking (1seq) + SBO", "geometric_span", "1seq", {"mlm", "sbo"});
  } else {
    throw ValidationError("unknown grid preset '" + std::string(name) + "' (expected table7 or table8)");
  }
  return rows;
}

}  // namespace spanlab
