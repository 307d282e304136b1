#pragma once

// Config-driven experiment recipes: one JSON config describes corpus, model,
// training, surgery, fine-tuning and hallucination settings; each command
// writes its artifacts under the output directory and appends a RunRecord
// to runs.jsonl.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pslab/checkpoint.hpp"
#include "pslab/corpus.hpp"
#include "pslab/error.hpp"
#include "pslab/finetune.hpp"
#include "pslab/halluc.hpp"
#include "pslab/model.hpp"
#include "pslab/stats.hpp"
#include "pslab/surgery.hpp"

namespace pslab {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

struct SurgeryConfig {
  std::uint64_t seed = 1;  // irrelevant-concept sampling
  std::vector<double> ratios = default_mask_ratios();
  std::size_t related = 10;
  std::size_t irrelevant_concepts = 5;
  std::optional<std::size_t> skip_layers;
  PositionSelector selector = PositionSelector::kAnswer;
  McqMode mcq_mode = McqMode::kLoglik;
  std::size_t shots = 0;  // generative mode demonstrations
  bool held_out = false;
  std::vector<std::size_t> concepts;  // empty: every pretraining concept
  bool all_checkpoints = false;       // sweep every saved checkpoint, not just the last
};

struct FinetuneConfig {
  std::vector<FtVariant> variants{FtVariant::kFull, FtVariant::kPrecise, FtVariant::kComplement, FtVariant::kRandom};
  double ratio = 0.5;
  std::uint64_t seed = 1;  // FT-RV row choice
  PositionSelector selector = PositionSelector::kAnswer;
  FtRanking ranking = FtRanking::kContrastive;
  TrainConfig train = [] {
    TrainConfig t;
    t.steps = 300;
    t.batch_size = 16;
    t.lr = 1e-3;
    return t;
  }();
  std::string checkpoint;  // empty: last pretraining checkpoint
};

enum class QuestionSet : std::uint8_t { kNew = 0, kPretraining = 1, kAll = 2 };

inline QuestionSet parse_question_set(std::string_view name) {
  if (name == "new") return QuestionSet::kNew;
  if (name == "pretraining") return QuestionSet::kPretraining;
  if (name == "all") return QuestionSet::kAll;
  throw ConfigError("unknown question set '" + std::string(name) + "' (expected new, pretraining or all)");
}

inline std::string_view to_string(QuestionSet q) {
  switch (q) {
    case QuestionSet::kNew: return "new";
    case QuestionSet::kPretraining: return "pretraining";
    case QuestionSet::kAll: return "all";
  }
  return "unknown";
}

struct HallucConfig {
  SamplingOptions sampling;
  std::size_t neighbours = 20;
  LidAggregate aggregate = LidAggregate::kMean;
  QuestionSet questions = QuestionSet::kNew;
  std::vector<std::string> checkpoints;  // empty: last pretraining checkpoint plus any fine-tuned models
};

struct ExperimentConfig {
  std::string output_dir = "runs/default";
  CorpusConfig corpus;
  ModelConfig model;  // vocab_size is taken from the corpus
  TrainConfig train = [] {
    TrainConfig t;
    t.steps = 2000;
    t.decay = LrDecay::kCosine;
    return t;
  }();
  std::vector<std::size_t> checkpoints;  // training steps to save; the final step is always saved
  SurgeryConfig surgery;
  FinetuneConfig finetune;
  HallucConfig halluc;

  std::vector<std::size_t> checkpoint_schedule() const {
    std::vector<std::size_t> s = checkpoints;
    s.push_back(train.steps);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }

  void validate() const {
    corpus.validate();
    ModelConfig m = model;
    m.vocab_size = std::max<std::size_t>(1, m.vocab_size);
    m.validate();
    train.validate();
    validate_checkpoint_schedule(checkpoints, train.steps);
    if (surgery.ratios.empty()) throw ConfigError("surgery.ratios must not be empty");
    for (double r : surgery.ratios) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("surgery.ratios entries must lie in [0, 1]");
    }
    if (surgery.related < 1) throw ConfigError("surgery.related must be positive");
    if (surgery.irrelevant_concepts < 1) throw ConfigError("surgery.irrelevant_concepts must be positive");
    if (finetune.variants.empty()) throw ConfigError("finetune.variants must not be empty");
    if (!(finetune.ratio >= 0.0 && finetune.ratio <= 8.0)) throw ConfigError("finetune.ratio must lie in [0, 8]");
    finetune.train.validate();
    if (halluc.sampling.n_samples < 2) throw ConfigError("halluc.n_samples must be at least 2");
    if (!(halluc.sampling.temperature >= 0.0)) throw ConfigError("halluc.temperature must be non-negative");
    if (halluc.neighbours < 2) throw ConfigError("halluc.neighbours must be at least 2");
  }
};

namespace detail {

// Reads one JSON object section, naming the offending field on any error
// and rejecting keys it does not know.
class Section {
 public:
  Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError("field '" + prefix_ + "' must be an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    read(obj_.at(key), name(key), out);
  }

  template <typename V, typename Parse>
  void get_enum(const std::string& key, V& out, Parse parse) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    std::string s;
    read(obj_.at(key), name(key), s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError("field '" + name(key) + "': " + e.what());
    }
  }

  std::optional<Section> sub(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) return std::nullopt;
    return Section(obj_.at(key), name(key));
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown field '" + name(key) + "'");
    }
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

 private:
  static void read(const json& v, const std::string& field, std::size_t& out) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError("field '" + field + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  static void read(const json& v, const std::string& field, double& out) {
    if (!v.is_number()) throw ConfigError("field '" + field + "' must be a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& field, bool& out) {
    if (!v.is_boolean()) throw ConfigError("field '" + field + "' must be true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& field, std::string& out) {
    if (!v.is_string()) throw ConfigError("field '" + field + "' must be a string");
    out = v.get<std::string>();
  }
  template <typename E>
  static void read(const json& v, const std::string& field, std::optional<E>& out) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    E e{};
    read(v, field, e);
    out = e;
  }
  template <typename E>
  static void read(const json& v, const std::string& field, std::vector<E>& out) {
    if (!v.is_array()) throw ConfigError("field '" + field + "' must be an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      E e{};
      read(v[i], field + "[" + std::to_string(i) + "]", e);
      out.push_back(std::move(e));
    }
  }
  template <typename E, std::size_t N>
  static void read(const json& v, const std::string& field, std::array<E, N>& out) {
    if (!v.is_array() || v.size() != N) {
      throw ConfigError("field '" + field + "' must be an array of " + std::to_string(N) + " entries");
    }
    for (std::size_t i = 0; i < N; ++i) read(v[i], field + "[" + std::to_string(i) + "]", out[i]);
  }

  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

inline void read_train(Section& s, TrainConfig& t) {
  s.get("seed", t.seed);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("lr", t.lr);
  s.get("warmup_fraction", t.warmup_fraction);
  s.get_enum("decay", t.decay, parse_lr_decay);
  s.get("min_lr_fraction", t.min_lr_fraction);
  s.get("weight_decay", t.weight_decay);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("eps", t.eps);
  s.get("clip_norm", t.clip_norm);
}

inline json train_json(const TrainConfig& t) {
  return {{"seed", t.seed},
          {"steps", t.steps},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"warmup_fraction", t.warmup_fraction},
          {"decay", to_string(t.decay)},
          {"min_lr_fraction", t.min_lr_fraction},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"clip_norm", t.clip_norm}};
}

inline std::string_view activation_name(ActivationKind a) {
  switch (a) {
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kGelu: return "gelu";
    case ActivationKind::kSilu: return "silu-gated";
  }
  return "unknown";
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const json& doc) {
  ExperimentConfig c;
  detail::Section root(doc, "");
  root.get("output_dir", c.output_dir);
  if (auto s = root.sub("corpus")) {
    s->get("seed", c.corpus.seed);
    s->get("n_concepts", c.corpus.n_concepts);
    s->get("tier_ratios", c.corpus.tier_ratios);
    s->get("repetitions", c.corpus.repetitions);
    s->get("n_relations", c.corpus.n_relations);
    s->get("n_new_concepts", c.corpus.n_new_concepts);
    s->get("new_repetitions", c.corpus.new_repetitions);
    s->get("name_syllables", c.corpus.name_syllables);
    s->get("syllable_pool", c.corpus.syllable_pool);
    s->finish();
  }
  if (auto s = root.sub("model")) {
    s->get("n_layers", c.model.n_layers);
    s->get("d_model", c.model.d_model);
    s->get("d_mlp", c.model.d_mlp);
    s->get("n_heads", c.model.n_heads);
    s->get("max_seq", c.model.max_seq);
    s->get_enum("activation", c.model.activation, parse_activation);
    s->get_enum("mlp_style", c.model.mlp_style, parse_mlp_style);
    s->finish();
  }
  if (auto s = root.sub("train")) {
    detail::read_train(*s, c.train);
    s->get("checkpoints", c.checkpoints);
    s->finish();
  }
  if (auto s = root.sub("surgery")) {
    s->get("seed", c.surgery.seed);
    s->get("ratios", c.surgery.ratios);
    s->get("related", c.surgery.related);
    s->get("irrelevant_concepts", c.surgery.irrelevant_concepts);
    s->get("skip_layers", c.surgery.skip_layers);
    s->get_enum("selector", c.surgery.selector, parse_position_selector);
    s->get_enum("mcq_mode", c.surgery.mcq_mode, parse_mcq_mode);
    s->get("shots", c.surgery.shots);
    s->get("held_out", c.surgery.held_out);
    s->get("concepts", c.surgery.concepts);
    s->get("all_checkpoints", c.surgery.all_checkpoints);
    s->finish();
  }
  if (auto s = root.sub("finetune")) {
    if (const json* v = s->raw("variants")) {
      if (!v->is_array()) throw ConfigError("field 'finetune.variants' must be an array");
      c.finetune.variants.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string field = "finetune.variants[" + std::to_string(i) + "]";
        if (!(*v)[i].is_string()) throw ConfigError("field '" + field + "' must be a string");
        try {
          c.finetune.variants.push_back(parse_ft_variant((*v)[i].get<std::string>()));
        } catch (const ConfigError& e) {
          throw ConfigError("field '" + field + "': " + e.what());
        }
      }
    }
    s->get("ratio", c.finetune.ratio);
    s->get("selection_seed", c.finetune.seed);
    s->get_enum("selector", c.finetune.selector, parse_position_selector);
    s->get_enum("ranking", c.finetune.ranking, parse_ft_ranking);
    s->get("checkpoint", c.finetune.checkpoint);
    detail::read_train(*s, c.finetune.train);
    s->finish();
  }
  if (auto s = root.sub("halluc")) {
    s->get("seed", c.halluc.sampling.seed);
    s->get("n_samples", c.halluc.sampling.n_samples);
    s->get("temperature", c.halluc.sampling.temperature);
    s->get("token_budget", c.halluc.sampling.token_budget);
    s->get("neighbours", c.halluc.neighbours);
    s->get_enum("aggregate", c.halluc.aggregate, parse_lid_aggregate);
    s->get_enum("questions", c.halluc.questions, parse_question_set);
    s->get("checkpoints", c.halluc.checkpoints);
    s->finish();
  }
  root.finish();
  c.validate();
  return c;
}

// Every field, defaults included; object keys come out sorted, so the dump is canonical.
inline json to_json(const ExperimentConfig& c) {
  json ft_variants = json::array();
  for (auto v : c.finetune.variants) ft_variants.push_back(to_string(v));
  json train = detail::train_json(c.train);
  train["checkpoints"] = c.checkpoints;
  json finetune = detail::train_json(c.finetune.train);
  finetune["variants"] = ft_variants;
  finetune["ratio"] = c.finetune.ratio;
  finetune["selection_seed"] = c.finetune.seed;
  finetune["selector"] = to_string(c.finetune.selector);
  finetune["ranking"] = c.finetune.ranking == FtRanking::kContrastive ? "contrastive" : "magnitude";
  finetune["checkpoint"] = c.finetune.checkpoint;
  return {
      {"output_dir", c.output_dir},
      {"corpus",
       {{"seed", c.corpus.seed},
        {"n_concepts", c.corpus.n_concepts},
        {"tier_ratios", c.corpus.tier_ratios},
        {"repetitions", c.corpus.repetitions},
        {"n_relations", c.corpus.n_relations},
        {"n_new_concepts", c.corpus.n_new_concepts},
        {"new_repetitions", c.corpus.new_repetitions},
        {"name_syllables", c.corpus.name_syllables},
        {"syllable_pool", c.corpus.syllable_pool}}},
      {"model",
       {{"n_layers", c.model.n_layers},
        {"d_model", c.model.d_model},
        {"d_mlp", c.model.d_mlp},
        {"n_heads", c.model.n_heads},
        {"max_seq", c.model.max_seq},
        {"activation", detail::activation_name(c.model.activation)},
        {"mlp_style", to_string(c.model.mlp_style)}}},
      {"train", train},
      {"surgery",
       {{"seed", c.surgery.seed},
        {"ratios", c.surgery.ratios},
        {"related", c.surgery.related},
        {"irrelevant_concepts", c.surgery.irrelevant_concepts},
        {"skip_layers", c.surgery.skip_layers ? json(*c.surgery.skip_layers) : json(nullptr)},
        {"selector", to_string(c.surgery.selector)},
        {"mcq_mode", to_string(c.surgery.mcq_mode)},
        {"shots", c.surgery.shots},
        {"held_out", c.surgery.held_out},
        {"concepts", c.surgery.concepts},
        {"all_checkpoints", c.surgery.all_checkpoints}}},
      {"finetune", finetune},
      {"halluc",
       {{"seed", c.halluc.sampling.seed},
        {"n_samples", c.halluc.sampling.n_samples},
        {"temperature", c.halluc.sampling.temperature},
        {"token_budget", c.halluc.sampling.token_budget},
        {"neighbours", c.halluc.neighbours},
        {"aggregate", c.halluc.aggregate == LidAggregate::kMean ? "mean" : "median"},
        {"questions", to_string(c.halluc.questions)},
        {"checkpoints", c.halluc.checkpoints}}},
  };
}

// Parses a config file; PSLAB_OUTPUT_DIR, when set, replaces output_dir.
inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = experiment_config_from_json(doc);
  if (const char* dir = std::getenv("PSLAB_OUTPUT_DIR"); dir != nullptr && *dir != '\0') c.output_dir = dir;
  return c;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Identifies a run by everything except where its files go.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

// ---------------------------------------------------------------- output helpers

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_num(std::optional<double> v) { return v ? fmt_num(*v) : std::string(); }

// Quotes a CSV field when it holds a separator, quote or newline.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw DimensionError("csv row has the wrong number of fields");
    rows_.push_back(std::move(row));
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) out += ',';
        out += csv_field(r[i]);
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  std::size_t size() const noexcept { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string jsonl(std::span<const json> records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + '\n';
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunRecord {
  std::string config_hash;
  std::string command;
  std::string started;
  std::string finished;
  std::vector<json> metrics;
  std::vector<std::string> artifacts;

  json to_json() const {
    return {{"config_hash", config_hash}, {"command", command}, {"started", started},
            {"finished", finished},       {"metrics", metrics}, {"artifacts", artifacts}};
  }
};

inline void append_run_record(const fs::path& dir, const RunRecord& r) {
  fs::create_directories(dir);
  std::ofstream out(dir / "runs.jsonl", std::ios::app | std::ios::binary);
  if (!out) throw InputError("cannot append to " + (dir / "runs.jsonl").string());
  out << r.to_json().dump() << '\n';
}

// ---------------------------------------------------------------- layout

struct RunPaths {
  fs::path root;
  fs::path corpus() const { return root / "corpus"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path checkpoint(std::size_t step) const { return checkpoints() / ("step_" + std::to_string(step) + ".ckpt"); }
  fs::path state(std::size_t step) const { return checkpoints() / ("step_" + std::to_string(step) + ".state"); }
  fs::path finetuned() const { return root / "finetune"; }
  fs::path finetuned(FtVariant v) const { return finetuned() / (std::string(to_string(v)) + ".ckpt"); }
};

// Saved checkpoint steps, ascending.
inline std::vector<std::size_t> saved_checkpoint_steps(const RunPaths& paths) {
  std::vector<std::size_t> steps;
  if (!fs::exists(paths.checkpoints())) return steps;
  static const std::regex pattern(R"(step_(\d+)\.ckpt)");
  for (const auto& entry : fs::directory_iterator(paths.checkpoints())) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) steps.push_back(std::stoull(m[1].str()));
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

inline std::size_t final_checkpoint_step(const RunPaths& paths) {
  const auto steps = saved_checkpoint_steps(paths);
  if (steps.empty()) throw InputError("no checkpoints under " + paths.checkpoints().string() + " (run train first)");
  return steps.back();
}

inline Corpus experiment_corpus(const ExperimentConfig& c) { return generate_corpus(c.corpus); }

inline ModelConfig experiment_model(const ExperimentConfig& c, const Corpus& corpus) {
  ModelConfig m = c.model;
  m.vocab_size = corpus.vocab.size();
  m.validate();
  return m;
}

// ---------------------------------------------------------------- gen-data

inline RunRecord cmd_gen_data(const ExperimentConfig& c) {
  RunRecord rec{config_hash(c), "gen-data", utc_timestamp(), "", {}, {}};
  const RunPaths paths{c.output_dir};
  const Corpus corpus = experiment_corpus(c);
  write_corpus_files(corpus, paths.corpus());
  for (const auto& entry : fs::directory_iterator(paths.corpus())) rec.artifacts.push_back(entry.path().string());
  std::sort(rec.artifacts.begin(), rec.artifacts.end());
  rec.metrics.push_back({{"concepts", corpus.concepts.size()},
                         {"vocab_size", corpus.vocab.size()},
                         {"training_sentences", corpus.training.size()},
                         {"new_fact_sentences", corpus.new_facts.size()}});
  rec.finished = utc_timestamp();
  append_run_record(paths.root, rec);
  return rec;
}

// ---------------------------------------------------------------- train

struct TrainCommandOptions {
  bool resume = false;                    // continue from the latest saved optimizer state
  std::optional<std::size_t> stop_after;  // stop once this (scheduled) checkpoint is written
  std::function<void(std::size_t, double)> on_step;
};

inline RunRecord cmd_train(const ExperimentConfig& c, const TrainCommandOptions& opts = {}) {
  RunRecord rec{config_hash(c), "train", utc_timestamp(), "", {}, {}};
  const RunPaths paths{c.output_dir};
  const Corpus corpus = experiment_corpus(c);
  const ModelConfig model = experiment_model(c, corpus);
  const auto schedule = c.checkpoint_schedule();
  if (opts.stop_after && !std::binary_search(schedule.begin(), schedule.end(), *opts.stop_after)) {
    throw UsageError("--stop-after " + std::to_string(*opts.stop_after) + " is not a scheduled checkpoint");
  }
  fs::create_directories(paths.checkpoints());

  auto weights = TransformerWeights<float>::initialized(model, c.train.seed);
  std::optional<TrainState<float>> state;
  std::size_t start = 0;
  if (opts.resume) {
    for (auto it = schedule.rbegin(); it != schedule.rend(); ++it) {
      if (fs::exists(paths.checkpoint(*it)) && fs::exists(paths.state(*it))) {
        weights = load_checkpoint(paths.checkpoint(*it));
        if (!(weights.config() == model)) throw ConfigError("checkpoint model does not match the config");
        state = deserialize_train_state(io::read_file(paths.state(*it)), weights);
        start = *it;
        break;
      }
    }
  }

  const fs::path log_path = paths.root / "train_log.csv";
  std::vector<std::string> log_lines;
  if (start > 0 && fs::exists(log_path)) {
    std::istringstream in(io::read_file(log_path));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (std::stoull(line.substr(0, line.find(','))) <= start) log_lines.push_back(line);
    }
  }

  Trainer<float> trainer(weights, corpus.training, c.train, std::nullopt, std::move(state));
  while (!trainer.done()) {
    const double loss = trainer.step_once();
    const std::size_t s = trainer.step();
    log_lines.push_back(std::to_string(s) + "," + fmt_num(learning_rate(c.train, s - 1)) + "," + fmt_num(loss));
    if (opts.on_step) opts.on_step(s, loss);
    if (std::binary_search(schedule.begin(), schedule.end(), s)) {
      save_checkpoint(weights, paths.checkpoint(s));
      io::write_file(paths.state(s), serialize_train_state(trainer.state(), weights));
      rec.artifacts.push_back(paths.checkpoint(s).string());
      if (opts.stop_after && s == *opts.stop_after) break;
    }
  }
  std::string log = "step,lr,loss\n";
  for (const auto& l : log_lines) log += l + '\n';
  io::write_file(log_path, log);
  rec.artifacts.push_back(log_path.string());

  json final_loss = nullptr;
  if (!log_lines.empty()) final_loss = std::stod(log_lines.back().substr(log_lines.back().rfind(',') + 1));
  rec.metrics.push_back({{"resumed_from", start}, {"step", trainer.step()}, {"final_loss", final_loss}});
  rec.finished = utc_timestamp();
  append_run_record(paths.root, rec);
  return rec;
}

// ---------------------------------------------------------------- pss

namespace detail {

inline std::vector<ProbeQuestion> shot_questions(const Corpus& corpus, std::size_t count) {
  // Demonstrations come from the highest-id pretraining concept.
  const auto ids = corpus.pretraining_concepts();
  if (count == 0 || ids.empty()) return {};
  return concept_probes(corpus, ids.back(), std::min(count, corpus.concept_at(ids.back()).attributes.size()));
}

inline SurgeryOptions surgery_options(const ExperimentConfig& c, const Corpus& corpus) {
  SurgeryOptions o;
  o.skip_layers = c.surgery.skip_layers;
  o.selector = c.surgery.selector;
  o.held_out = c.surgery.held_out;
  o.mcq.mode = c.surgery.mcq_mode;
  if (c.surgery.mcq_mode == McqMode::kGenerative) o.mcq.shots = shot_questions(corpus, c.surgery.shots);
  return o;
}

inline std::vector<ConceptProbeSet> probe_sets(const ExperimentConfig& c, const Corpus& corpus,
                                               std::span<const std::size_t> ids) {
  ProbeSetOptions po;
  po.related = c.surgery.related;
  po.irrelevant_concepts = c.surgery.irrelevant_concepts;
  std::vector<ConceptProbeSet> out;
  for (std::size_t id : ids) {
    if (id >= corpus.concepts.size()) throw ConfigError("surgery.concepts: no concept with id " + std::to_string(id));
    out.push_back(build_probe_set(corpus, id, c.surgery.seed, po));
  }
  return out;
}

}  // namespace detail

// Per-tier mean of per-concept PSS over usable concepts.
inline std::map<Tier, double> tier_pss(const Corpus& corpus, const SweepResult& sweep) {
  std::map<Tier, std::vector<double>> by_tier;
  for (const auto& cp : sweep.concepts) {
    if (cp.usable) by_tier[corpus.concept_at(cp.concept_id).tier].push_back(cp.mean_pss);
  }
  std::map<Tier, double> out;
  for (const auto& [tier, v] : by_tier) out[tier] = mean(v);
  return out;
}

// Mean accuracy on the related questions of the swept concepts, before surgery.
inline double sweep_accuracy(const SweepResult& sweep) {
  std::map<std::size_t, double> per_concept;
  for (const auto& r : sweep.reports) per_concept[r.concept_id] = r.specific_before;
  double s = 0.0;
  for (const auto& [id, acc] : per_concept) s += acc;
  return s / static_cast<double>(per_concept.size());
}

struct PssOutputs {
  CsvTable reports{{"checkpoint", "step", "concept", "tier", "ratio", "masked_per_layer", "specific_before",
                    "irrelevant_before", "base", "specific_after", "general_after", "difference", "pss", "usable"}};
  CsvTable curve{{"checkpoint", "step", "ratio", "mean_general", "mean_specific", "mean_difference", "concepts"}};
  CsvTable concepts{{"checkpoint", "step", "concept", "tier", "mean_pss", "usable"}};
  CsvTable summary{{"checkpoint", "step", "aggregate_pss", "accuracy", "pss_high", "pss_medium", "pss_low", "pss_new",
                    "usable_concepts", "concepts"}};
  std::vector<json> records;
};

inline json summary_record(const std::string& label, std::size_t step, const Corpus& corpus, const SweepResult& sweep,
                           const std::string& hash) {
  json tiers = json::object();
  for (const auto& [tier, v] : tier_pss(corpus, sweep)) tiers[std::string(to_string(tier))] = v;
  const auto usable = std::count_if(sweep.concepts.begin(), sweep.concepts.end(), [](const ConceptPss& c) { return c.usable; });
  return {{"type", "summary"},   {"checkpoint", label},           {"step", step},
          {"aggregate", sweep.aggregate}, {"accuracy", sweep_accuracy(sweep)}, {"tier_pss", tiers},
          {"usable_concepts", usable},    {"concepts", sweep.concepts.size()}, {"config_hash", hash}};
}

inline void add_sweep(PssOutputs& out, const std::string& label, std::size_t step, const Corpus& corpus,
                      const SweepResult& sweep, const std::string& hash) {
  const std::string st = std::to_string(step);
  for (const auto& r : sweep.reports) {
    const std::string tier(to_string(corpus.concept_at(r.concept_id).tier));
    out.reports.add({label, st, std::to_string(r.concept_id), tier, fmt_num(r.ratio), std::to_string(r.masked_per_layer),
                     fmt_num(r.specific_before), fmt_num(r.irrelevant_before), fmt_num(r.general_before),
                     fmt_num(r.specific_after), fmt_num(r.general_after), fmt_num(r.difference()), fmt_num(r.pss),
                     r.usable ? "1" : "0"});
    out.records.push_back({{"type", "report"},
                           {"checkpoint", label},
                           {"step", step},
                           {"concept", r.concept_id},
                           {"tier", tier},
                           {"ratio", r.ratio},
                           {"masked_per_layer", r.masked_per_layer},
                           {"specific_before", r.specific_before},
                           {"irrelevant_before", r.irrelevant_before},
                           {"base", r.general_before},
                           {"specific_after", r.specific_after},
                           {"general_after", r.general_after},
                           {"difference", r.difference()},
                           {"pss", r.pss},
                           {"usable", r.usable}});
  }
  for (const auto& p : sweep.curve) {
    out.curve.add({label, st, fmt_num(p.ratio), fmt_num(p.mean_general), fmt_num(p.mean_specific),
                   fmt_num(p.mean_difference), std::to_string(p.concepts)});
    out.records.push_back({{"type", "curve"},
                           {"checkpoint", label},
                           {"step", step},
                           {"ratio", p.ratio},
                           {"mean_general", p.mean_general},
                           {"mean_specific", p.mean_specific},
                           {"mean_difference", p.mean_difference},
                           {"concepts", p.concepts}});
  }
  for (const auto& cp : sweep.concepts) {
    const std::string tier(to_string(corpus.concept_at(cp.concept_id).tier));
    out.concepts.add({label, st, std::to_string(cp.concept_id), tier, cp.usable ? fmt_num(cp.mean_pss) : "",
                      cp.usable ? "1" : "0"});
    out.records.push_back({{"type", "concept"},
                           {"checkpoint", label},
                           {"step", step},
                           {"concept", cp.concept_id},
                           {"tier", tier},
                           {"mean_pss", cp.usable ? json(cp.mean_pss) : json(nullptr)},
                           {"usable", cp.usable}});
  }
  const json s = summary_record(label, step, corpus, sweep, hash);
  auto tier_cell = [&](const char* name) {
    return s["tier_pss"].contains(name) ? fmt_num(s["tier_pss"][name].get<double>()) : std::string();
  };
  out.summary.add({label, st, fmt_num(sweep.aggregate), fmt_num(s["accuracy"].get<double>()), tier_cell("high"),
                   tier_cell("medium"), tier_cell("low"), tier_cell("new"), std::to_string(s["usable_concepts"].get<long>()),
                   std::to_string(sweep.concepts.size())});
  out.records.push_back(s);
}

inline RunRecord cmd_pss(const ExperimentConfig& c) {
  RunRecord rec{config_hash(c), "pss", utc_timestamp(), "", {}, {}};
  const RunPaths paths{c.output_dir};
  const Corpus corpus = experiment_corpus(c);
  std::vector<std::size_t> steps = saved_checkpoint_steps(paths);
  if (steps.empty()) throw InputError("no checkpoints under " + paths.checkpoints().string() + " (run train first)");
  if (!c.surgery.all_checkpoints) steps = {steps.back()};
  const std::vector<std::size_t> ids = c.surgery.concepts.empty() ? corpus.pretraining_concepts() : c.surgery.concepts;
  const auto sets = detail::probe_sets(c, corpus, ids);
  const auto options = detail::surgery_options(c, corpus);

  PssOutputs out;
  for (std::size_t step : steps) {
    const auto weights = load_checkpoint(paths.checkpoint(step));
    const auto sweep = pss_sweep(weights, corpus.vocab, std::span<const ConceptProbeSet>(sets),
                                 std::span<const double>(c.surgery.ratios), options);
    const std::string label = "step_" + std::to_string(step);
    add_sweep(out, label, step, corpus, sweep, rec.config_hash);
    rec.metrics.push_back(out.records.back());
  }
  const std::vector<std::pair<std::string, std::string>> files{{"pss_reports.csv", out.reports.str()},
                                                               {"pss_curve.csv", out.curve.str()},
                                                               {"pss_concepts.csv", out.concepts.str()},
                                                               {"pss_summary.csv", out.summary.str()},
                                                               {"pss.jsonl", jsonl(out.records)}};
  for (const auto& [name, body] : files) {
    io::write_file(paths.root / name, body);
    rec.artifacts.push_back((paths.root / name).string());
  }
  rec.finished = utc_timestamp();
  append_run_record(paths.root, rec);
  return rec;
}

// ---------------------------------------------------------------- finetune

inline std::vector<ProbeQuestion> questions_for(const Corpus& corpus, std::span<const std::size_t> ids, std::size_t t,
                                                ProbeKind kind) {
  std::vector<ProbeQuestion> out;
  for (std::size_t id : ids) {
    auto qs = concept_probes(corpus, id, std::min(t, corpus.concept_at(id).attributes.size()), kind);
    out.insert(out.end(), qs.begin(), qs.end());
  }
  return out;
}

inline RunRecord cmd_finetune(const ExperimentConfig& c) {
  RunRecord rec{config_hash(c), "finetune", utc_timestamp(), "", {}, {}};
  const RunPaths paths{c.output_dir};
  const Corpus corpus = experiment_corpus(c);
  const auto new_ids = corpus.concepts_in_tier(Tier::kNew);
  if (new_ids.empty() || corpus.new_facts.empty()) {
    throw ConfigError("corpus.n_new_concepts must be positive for fine-tuning");
  }
  const fs::path base_path =
      c.finetune.checkpoint.empty() ? paths.checkpoint(final_checkpoint_step(paths)) : fs::path(c.finetune.checkpoint);
  const auto base = load_checkpoint(base_path);

  const auto sets = detail::probe_sets(c, corpus, new_ids);
  std::vector<ProbeQuestion> new_qs;
  std::vector<ProbeQuestion> irrelevant_qs;
  for (const auto& s : sets) {
    new_qs.insert(new_qs.end(), s.related.begin(), s.related.end());
    irrelevant_qs.insert(irrelevant_qs.end(), s.irrelevant.begin(), s.irrelevant.end());
  }
  const auto new_oeg = questions_for(corpus, new_ids, c.surgery.related, ProbeKind::kOeg);
  const auto old_ids = corpus.pretraining_concepts();
  const auto old_qs = questions_for(corpus, old_ids, c.surgery.related, ProbeKind::kMcq);
  const auto options = detail::surgery_options(c, corpus);

  CsvTable table{{"variant", "trainable_rows", "new_mcq", "new_oeg", "new_pss", "retained_mcq", "final_loss"}};
  std::vector<json> records;
  fs::create_directories(paths.finetuned());
  for (FtVariant v : c.finetune.variants) {
    FtSelection sel;
    sel.variant = v;
    sel.ratio = c.finetune.ratio;
    sel.seed = c.finetune.seed;
    sel.skip_layers = c.surgery.skip_layers;
    sel.selector = c.finetune.selector;
    sel.ranking = c.finetune.ranking;
    const GradientMask mask = select_ft_columns(base, corpus.vocab, new_qs, irrelevant_qs, sel);
    double last_loss = 0.0;
    const auto tuned = finetune(base, corpus.new_facts, mask, c.finetune.train, [&](std::size_t, double l) { last_loss = l; });
    save_checkpoint(tuned, paths.finetuned(v));
    rec.artifacts.push_back(paths.finetuned(v).string());

    const double mcq = evaluate_mcq(tuned, corpus.vocab, new_qs, nullptr, options.mcq).accuracy;
    const double oeg = evaluate_oeg(tuned, corpus.vocab, new_oeg).accuracy;
    const double retained = evaluate_mcq(tuned, corpus.vocab, old_qs, nullptr, options.mcq).accuracy;
    std::optional<double> pss;
    try {
      pss = pss_sweep(tuned, corpus.vocab, std::span<const ConceptProbeSet>(sets),
                      std::span<const double>(c.surgery.ratios), options)
                .aggregate;
    } catch (const SweepError&) {
      // no new concept answered correctly: PSS undefined
    }
    const std::string name(to_string(v));
    table.add({name, std::to_string(mask.total_selected()), fmt_num(mcq), fmt_num(oeg), fmt_num(pss), fmt_num(retained),
               fmt_num(last_loss)});
    records.push_back({{"type", "finetune"},
                       {"variant", name},
                       {"base", base_path.string()},
                       {"trainable_rows", mask.total_selected()},
                       {"new_mcq", mcq},
                       {"new_oeg", oeg},
                       {"new_pss", pss ? json(*pss) : json(nullptr)},
                       {"retained_mcq", retained},
                       {"final_loss", last_loss},
                       {"config_hash", rec.config_hash}});
    rec.metrics.push_back(records.back());
  }
  io::write_file(paths.root / "finetune.csv", table.str());
  io::write_file(paths.root / "finetune.jsonl", jsonl(records));
  rec.artifacts.push_back((paths.root / "finetune.csv").string());
  rec.artifacts.push_back((paths.root / "finetune.jsonl").string());
  rec.finished = utc_timestamp();
  append_run_record(paths.root, rec);
  return rec;
}

// ---------------------------------------------------------------- hallucination

inline std::vector<fs::path> halluc_models(const ExperimentConfig& c, const RunPaths& paths) {
  std::vector<fs::path> out;
  if (!c.halluc.checkpoints.empty()) {
    for (const auto& p : c.halluc.checkpoints) out.emplace_back(p);
    return out;
  }
  out.push_back(paths.checkpoint(final_checkpoint_step(paths)));
  for (FtVariant v : {FtVariant::kFull, FtVariant::kPrecise, FtVariant::kComplement, FtVariant::kRandom}) {
    if (fs::exists(paths.finetuned(v))) out.push_back(paths.finetuned(v));
  }
  return out;
}

inline RunRecord cmd_hallucination(const ExperimentConfig& c) {
  RunRecord rec{config_hash(c), "hallucination", utc_timestamp(), "", {}, {}};
  const RunPaths paths{c.output_dir};
  const Corpus corpus = experiment_corpus(c);
  std::vector<std::size_t> ids;
  if (c.halluc.questions != QuestionSet::kPretraining) ids = corpus.concepts_in_tier(Tier::kNew);
  if (c.halluc.questions != QuestionSet::kNew) {
    const auto old = corpus.pretraining_concepts();
    ids.insert(ids.end(), old.begin(), old.end());
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ConfigError("halluc.questions selects no concepts (is corpus.n_new_concepts zero?)");
  const auto questions = questions_for(corpus, ids, c.surgery.related, ProbeKind::kOeg);

  CsvTable per_q{{"model", "question", "concept", "tier", "relation", "gold", "greedy_answer", "correct",
                  "clusters", "semantic_entropy", "lid"}};
  CsvTable summary{{"model", "questions", "oeg_accuracy", "mean_semantic_entropy", "lid", "lid_neighbours",
                    "lid_excluded"}};
  std::vector<json> records;
  for (const auto& model_path : halluc_models(c, paths)) {
    const auto weights = load_checkpoint(model_path);
    const std::string label = model_path.stem().string();
    const auto acts = answer_activations(weights, corpus.vocab, std::span<const ProbeQuestion>(questions), nullptr,
                                         c.halluc.sampling.token_budget);
    const auto lid = lid_summary(acts.cloud, c.halluc.neighbours, c.halluc.aggregate);
    std::vector<double> entropies;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < questions.size(); ++i) {
      const auto& q = questions[i];
      SamplingOptions so = c.halluc.sampling;
      so.seed = derive_seed(c.halluc.sampling.seed, i);
      const auto samples = sample_answers(weights, corpus.vocab, q, so);
      const double h = semantic_entropy(std::span<const AnswerSample>(samples));
      std::vector<std::string> texts;
      for (const auto& s : samples) texts.push_back(s.text);
      const std::size_t n_clusters = cluster_answers(texts).size();
      entropies.push_back(h);
      const std::string greedy = corpus.vocab.detokenize(acts.answers[i]);
      const std::string gold = corpus.vocab.detokenize(q.gold);
      const bool ok = oeg_match(greedy, gold);
      correct += ok ? 1 : 0;
      const auto& point = lid.points[i];
      per_q.add({label, std::to_string(i), std::to_string(q.concept_id),
                 std::string(to_string(corpus.concept_at(q.concept_id).tier)), corpus.relations[q.relation].name, gold,
                 greedy, ok ? "1" : "0", std::to_string(n_clusters), fmt_num(h), fmt_num(point.value)});
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(questions.size());
    const double mean_h = mean(entropies);
    summary.add({label, std::to_string(questions.size()), fmt_num(acc), fmt_num(mean_h), fmt_num(lid.value),
                 std::to_string(lid.neighbours), std::to_string(lid.excluded)});
    records.push_back({{"type", "hallucination"},
                       {"model", label},
                       {"path", model_path.string()},
                       {"questions", questions.size()},
                       {"oeg_accuracy", acc},
                       {"mean_semantic_entropy", mean_h},
                       {"lid", lid.value},
                       {"lid_neighbours", lid.neighbours},
                       {"lid_excluded", lid.excluded},
                       {"config_hash", rec.config_hash}});
    rec.metrics.push_back(records.back());
  }
  io::write_file(paths.root / "hallucination.csv", per_q.str());
  io::write_file(paths.root / "hallucination_summary.csv", summary.str());
  io::write_file(paths.root / "hallucination.jsonl", jsonl(records));
  for (const char* f : {"hallucination.csv", "hallucination_summary.csv", "hallucination.jsonl"}) {
    rec.artifacts.push_back((paths.root / f).string());
  }
  rec.finished = utc_timestamp();
  append_run_record(paths.root, rec);
  return rec;
}

// ---------------------------------------------------------------- report

struct ModelPoint {
  std::string label;
  std::size_t step = 0;
  double pss = 0.0;
  double accuracy = 0.0;
  std::map<std::string, double> tier_pss;
};

struct Report {
  std::vector<ModelPoint> models;                           // last checkpoint of each input
  std::map<std::string, std::vector<ModelPoint>> series;    // every checkpoint, per input
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::string notice;  // why a correlation is missing
};

// Summary records from a pss.jsonl file, or from <dir>/pss.jsonl.
inline std::vector<ModelPoint> read_pss_summaries(const fs::path& input) {
  const fs::path file = fs::is_directory(input) ? input / "pss.jsonl" : input;
  std::istringstream in(io::read_file(file));
  std::vector<ModelPoint> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.value("type", "") != "summary") continue;
    ModelPoint p;
    p.label = fs::is_directory(input) ? input.string() : input.parent_path().string();
    p.step = j.at("step").get<std::size_t>();
    p.pss = j.at("aggregate").get<double>();
    p.accuracy = j.at("accuracy").get<double>();
    for (const auto& [tier, v] : j.at("tier_pss").items()) p.tier_pss[tier] = v.get<double>();
    out.push_back(std::move(p));
  }
  if (out.empty()) throw InputError("no PSS summary records in " + file.string());
  std::stable_sort(out.begin(), out.end(), [](const ModelPoint& a, const ModelPoint& b) { return a.step < b.step; });
  return out;
}

inline Report build_report(std::span<const std::vector<ModelPoint>> inputs) {
  Report r;
  for (const auto& series : inputs) {
    if (series.empty()) continue;
    r.models.push_back(series.back());
    r.series[series.back().label] = series;
  }
  std::vector<double> pss;
  std::vector<double> acc;
  for (const auto& m : r.models) {
    pss.push_back(m.pss);
    acc.push_back(m.accuracy);
  }
  if (r.models.size() < 3) {
    r.notice = "correlation omitted: " + std::to_string(r.models.size()) + " model(s), need at least 3";
  } else {
    r.pearson = pearson(pss, acc);
    r.spearman = spearman(pss, acc);
    if (!r.pearson || !r.spearman) r.notice = "correlation undefined: PSS or accuracy is constant across models";
  }
  return r;
}

inline json report_json(const Report& r) {
  json models = json::array();
  for (const auto& m : r.models) {
    models.push_back({{"label", m.label}, {"step", m.step}, {"pss", m.pss}, {"accuracy", m.accuracy}, {"tier_pss", m.tier_pss}});
  }
  json series = json::object();
  for (const auto& [label, pts] : r.series) {
    json arr = json::array();
    for (const auto& p : pts) arr.push_back({{"step", p.step}, {"pss", p.pss}, {"accuracy", p.accuracy}});
    series[label] = arr;
  }
  return {{"models", models},
          {"series", series},
          {"pearson", r.pearson ? json(*r.pearson) : json(nullptr)},
          {"spearman", r.spearman ? json(*r.spearman) : json(nullptr)},
          {"notice", r.notice}};
}

inline std::string report_text(const Report& r) {
  std::ostringstream os;
  os << "models: " << r.models.size() << '\n';
  if (r.pearson && r.spearman) {
    os << "pearson(pss, accuracy)  = " << fmt_num(*r.pearson) << '\n';
    os << "spearman(pss, accuracy) = " << fmt_num(*r.spearman) << '\n';
  }
  if (!r.notice.empty()) os << r.notice << '\n';
  os << "\nper-tier PSS\nmodel,high,medium,low,new\n";
  for (const auto& m : r.models) {
    os << csv_field(m.label);
    for (const char* t : {"high", "medium", "low", "new"}) {
      os << ',';
      if (auto it = m.tier_pss.find(t); it != m.tier_pss.end()) os << fmt_num(it->second);
    }
    os << '\n';
  }
  os << "\nper-checkpoint series\nmodel,step,pss,accuracy\n";
  for (const auto& [label, pts] : r.series) {
    for (const auto& p : pts) os << csv_field(label) << ',' << p.step << ',' << fmt_num(p.pss) << ',' << fmt_num(p.accuracy) << '\n';
  }
  return os.str();
}

// Reads each input's PSS summaries and writes report.json, report_models.csv
// and report_series.csv into `out_dir`.
inline Report cmd_report(std::span<const fs::path> inputs, const fs::path& out_dir) {
  if (inputs.empty()) throw UsageError("report: no inputs");
  std::vector<std::vector<ModelPoint>> all;
  for (const auto& in : inputs) all.push_back(read_pss_summaries(in));
  Report r = build_report(all);
  fs::create_directories(out_dir);
  CsvTable models{{"model", "step", "pss", "accuracy", "pss_high", "pss_medium", "pss_low", "pss_new"}};
  for (const auto& m : r.models) {
    std::vector<std::string> row{m.label, std::to_string(m.step), fmt_num(m.pss), fmt_num(m.accuracy)};
    for (const char* t : {"high", "medium", "low", "new"}) {
      auto it = m.tier_pss.find(t);
      row.push_back(it == m.tier_pss.end() ? std::string() : fmt_num(it->second));
    }
    models.add(std::move(row));
  }
  CsvTable series{{"model", "step", "pss", "accuracy"}};
  for (const auto& [label, pts] : r.series) {
    for (const auto& p : pts) series.add({label, std::to_string(p.step), fmt_num(p.pss), fmt_num(p.accuracy)});
  }
  io::write_file(out_dir / "report.json", report_json(r).dump(2) + "\n");
  io::write_file(out_dir / "report_models.csv", models.str());
  io::write_file(out_dir / "report_series.csv", series.str());
  return r;
}

}  // namespace pslab
