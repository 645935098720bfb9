#include "seqdens/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "seqdens/error.hpp"

namespace seqdens {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read_field(const json& j, const char* key, T* out) {
  if (j.contains(key)) {
    try {
      *out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

json task_to_json(const TaskSpec& t) {
  json j;
  j["kind"] = t.kind;
  j["vocab_size"] = t.vocab_size;
  j["min_len"] = t.min_len;
  j["max_len"] = t.max_len;
  j["synonym_fanout"] = t.synonym_fanout;
  j["reference_cap"] = t.reference_cap;
  j["seed"] = t.seed;
  j["n_train"] = t.n_train;
  j["n_dev"] = t.n_dev;
  j["n_test"] = t.n_test;
  return j;
}

TaskSpec task_from_json(const json& j) {
  reject_unknown(j,
                 {"kind", "vocab_size", "min_len", "max_len", "synonym_fanout",
                  "reference_cap", "seed", "n_train", "n_dev", "n_test"},
                 "task");
  TaskSpec t;
  read_field(j, "kind", &t.kind);
  read_field(j, "vocab_size", &t.vocab_size);
  read_field(j, "min_len", &t.min_len);
  read_field(j, "max_len", &t.max_len);
  read_field(j, "synonym_fanout", &t.synonym_fanout);
  read_field(j, "reference_cap", &t.reference_cap);
  read_field(j, "seed", &t.seed);
  read_field(j, "n_train", &t.n_train);
  read_field(j, "n_dev", &t.n_dev);
  read_field(j, "n_test", &t.n_test);
  return t;
}

json schedule_to_json(const TrainSchedule& s) {
  json j;
  j["steps"] = s.steps;
  j["batch_size"] = s.batch_size;
  j["kl_warm_steps"] = s.kl_warm_steps;
  j["kl_ramp_steps"] = s.kl_ramp_steps;
  j["warmup"] = s.warmup;
  j["alpha"] = s.alpha;
  j["dropout"] = s.dropout;
  j["eval_every"] = s.eval_every;
  j["patience"] = s.patience;
  j["dev_is_samples"] = s.dev_is_samples;
  j["max_eval_sentences"] = s.max_eval_sentences;
  j["divergence_limit"] = s.divergence_limit;
  return j;
}

TrainSchedule schedule_from_json(const json& j) {
  reject_unknown(j,
                 {"steps", "batch_size", "kl_warm_steps", "kl_ramp_steps",
                  "warmup", "alpha", "dropout", "eval_every", "patience",
                  "dev_is_samples", "max_eval_sentences", "divergence_limit"},
                 "training");
  TrainSchedule s;
  read_field(j, "steps", &s.steps);
  read_field(j, "batch_size", &s.batch_size);
  read_field(j, "kl_warm_steps", &s.kl_warm_steps);
  read_field(j, "kl_ramp_steps", &s.kl_ramp_steps);
  read_field(j, "warmup", &s.warmup);
  read_field(j, "alpha", &s.alpha);
  read_field(j, "dropout", &s.dropout);
  read_field(j, "eval_every", &s.eval_every);
  read_field(j, "patience", &s.patience);
  read_field(j, "dev_is_samples", &s.dev_is_samples);
  read_field(j, "max_eval_sentences", &s.max_eval_sentences);
  read_field(j, "divergence_limit", &s.divergence_limit);
  return s;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["task"] = task_to_json(c.task);
  j["model_family"] = c.model_family;
  j["model_size"] = c.model_size;
  j["data_variant"] = c.data_variant;
  j["training"] = schedule_to_json(c.training);
  j["beam_width"] = c.beam_width;
  j["refine_steps"] = c.refine_steps;
  j["length_mode"] = c.length_mode;
  j["candidates"] = c.candidates;
  j["is_samples"] = c.is_samples;
  j["speed_repetitions"] = c.speed_repetitions;
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schema_version != 1)
    throw ConfigError("unsupported schema_version " +
                      std::to_string(schema_version));
  task.validate();
  if (model_family != "ar" && model_family != "gauss" && model_family != "flow")
    throw ConfigError("model_family must be ar, gauss or flow");
  if (data_variant != "raw" && data_variant != "distilled")
    throw ConfigError("data_variant must be raw or distilled");
  if (length_mode != "predicted" && length_mode != "ground-truth")
    throw ConfigError("length_mode must be predicted or ground-truth");
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (is_samples < 1) throw ConfigError("is_samples must be >= 1");
  for (int k : refine_steps)
    if (k < 0) throw ConfigError("refine_steps entries must be >= 0");
  resolve_model_config(*this).validate();
}

ExperimentConfig ExperimentConfig::parse(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"schema_version", "seed", "task", "model_family", "model_size",
                  "data_variant", "training", "beam_width", "refine_steps",
                  "length_mode", "candidates", "is_samples",
                  "speed_repetitions"},
                 "config");
  ExperimentConfig c;
  read_field(j, "schema_version", &c.schema_version);
  read_field(j, "seed", &c.seed);
  if (j.contains("task")) c.task = task_from_json(j.at("task"));
  read_field(j, "model_family", &c.model_family);
  read_field(j, "model_size", &c.model_size);
  read_field(j, "data_variant", &c.data_variant);
  if (j.contains("training")) c.training = schedule_from_json(j.at("training"));
  read_field(j, "beam_width", &c.beam_width);
  read_field(j, "refine_steps", &c.refine_steps);
  read_field(j, "length_mode", &c.length_mode);
  read_field(j, "candidates", &c.candidates);
  read_field(j, "is_samples", &c.is_samples);
  read_field(j, "speed_repetitions", &c.speed_repetitions);
  c.validate();
  return c;
}

std::string ExperimentConfig::serialize() const {
  return config_to_json(*this).dump(2);
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write config file " + path);
  out << serialize() << "\n";
}

std::string fnv1a_hex(const std::string& text) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(serialize()); }

std::string ExperimentConfig::task_hash() const {
  return fnv1a_hex(task_to_json(task).dump());
}

ModelConfig resolve_model_config(const ExperimentConfig& config) {
  ModelConfig mc = config_registry(config.model_size);
  mc.vocab_size = config.task.vocab_size;
  mc.max_len = 64;
  mc.dropout_rate = config.training.dropout;
  return mc;
}

std::unique_ptr<DensityEstimator> build_model(const ExperimentConfig& config) {
  ModelConfig mc = resolve_model_config(config);
  if (config.model_family == "ar")
    return std::make_unique<ArModel>(mc, config.seed);
  if (config.model_family == "gauss")
    return std::make_unique<LvmModel>(mc, PriorKind::gaussian, config.seed);
  if (config.model_family == "flow")
    return std::make_unique<LvmModel>(mc, PriorKind::flow, config.seed);
  throw ConfigError("unknown model family " + config.model_family);
}

}  // namespace seqdens
