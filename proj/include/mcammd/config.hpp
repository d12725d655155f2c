#pragma once

// TrainConfig and its JSON form. Every field is optional and falls back to
// the defaults below; unknown keys are rejected. Example:
//
//   {
//     "dataset":   {"kind": "synthetic", "num_classes": 100, "per_class": 40,
//                   "input_dim": 16, "class_spread": 3.0, "noise": 1.0},
//     "model":     {"input_dim": 16, "encoder_widths": [64, 64], "activation": "tanh",
//                   "feature_dim": 16, "head_widths": [], "decoder": "linear",
//                   "decoder_widths": [32], "aggregation": "prototype", "pooling": "mean"},
//     "episode":   {"ways": 5, "shots": 1, "queries": 15},
//     "objective": {"mode": "mmd", "samples": 10, "mmd_samples": 32, "bandwidth": "median",
//                   "estimator": "biased", "query_mix": 0.5},
//     "schedule":  {"kind": "cyclical", "beta_max": 1.0, "cycles": 4, "ramp_ratio": 0.5,
//                   "total_steps": 2000},
//     "optimizer": {"lr": 0.0001, "tasks_per_batch": 16, "steps": 2000,
//                   "eval_interval": 200, "eval_tasks": 100},
//     "seed": 0
//   }
//
// schedule.total_steps defaults to optimizer.steps. A dataset of kind "fsds"
// takes {"kind": "fsds", "path": "<file>"} instead of the synthetic fields.
//
// The learning rate and tasks per batch follow the published protocol
// (Adam, 1e-4, 16 tasks). Step count, feature size, L and the schedule
// shape are not published and are assumptions.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcammd/divergences.hpp"
#include "mcammd/episodes.hpp"
#include "mcammd/errors.hpp"
#include "mcammd/model.hpp"
#include "mcammd/objectives.hpp"
#include "mcammd/schedules.hpp"

namespace mcammd {

using Json = nlohmann::json;

enum class DatasetKind { synthetic, fsds };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  SyntheticSpec synthetic;
  std::string path;  // fsds only

  bool operator==(const DatasetConfig&) const = default;
};

struct OptimizerConfig {
  double lr = 1e-4;
  std::size_t tasks_per_batch = 16;
  std::size_t steps = 2000;
  std::size_t eval_interval = 200;  // 0 disables validation during training
  std::size_t eval_tasks = 100;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  DatasetConfig dataset;
  ModelConfig model;
  EpisodeShape episode;
  ObjectiveConfig objective;
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (dataset.kind == DatasetKind::synthetic) {
      dataset.synthetic.validate();
      if (dataset.synthetic.input_dim != model.input_dim) {
        throw ConfigError("model.input_dim (" + std::to_string(model.input_dim) +
                          ") must equal dataset.input_dim (" + std::to_string(dataset.synthetic.input_dim) + ")");
      }
      if (dataset.synthetic.per_class < episode.shots + episode.queries) {
        throw ConfigError("dataset.per_class must be at least episode.shots + episode.queries");
      }
      const auto splits = default_splits(dataset.synthetic.num_classes);
      auto count = [&splits](Split s) { return static_cast<std::size_t>(std::count(splits.begin(), splits.end(), s)); };
      if (count(Split::train) < episode.ways) {
        throw ConfigError("dataset.num_classes gives " + std::to_string(count(Split::train)) +
                          " train classes, fewer than episode.ways");
      }
      if (optimizer.eval_interval > 0 && count(Split::val) < episode.ways) {
        throw ConfigError("dataset.num_classes gives " + std::to_string(count(Split::val)) +
                          " val classes, fewer than episode.ways");
      }
    } else if (dataset.path.empty()) {
      throw ConfigError("dataset.path is required for kind 'fsds'");
    }
    model.validate();
    episode.validate();
    objective.validate();
    schedule.validate();
    if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
    if (optimizer.tasks_per_batch == 0) throw ConfigError("optimizer.tasks_per_batch must be positive");
    if (optimizer.eval_interval > 0 && optimizer.eval_tasks == 0) {
      throw ConfigError("optimizer.eval_tasks must be positive when eval_interval is set");
    }
  }
};

namespace detail {

// Reads fields of one JSON object, remembering which keys were consumed so
// that leftovers can be reported as unknown.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  void read_size(const char* key, std::size_t& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(field(key) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }

  void read_sizes(const char* key, std::vector<std::size_t>& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(field(key) + ": expected an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) throw ConfigError(field(key) + ": expected an array of integers");
      out.push_back(e.get<std::size_t>());
    }
  }

  template <class E, std::size_t N>
  void read_enum(const char* key, E& out, const std::pair<const char*, E> (&names)[N]) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    if (v.is_string()) {
      for (const auto& [name, value] : names) {
        if (v.get<std::string>() == name) {
          out = value;
          return;
        }
      }
    }
    std::string options;
    for (const auto& [name, value] : names) options += (options.empty() ? "" : ", ") + std::string(name);
    throw ConfigError(field(key) + ": expected one of " + options);
  }

  const Json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string field(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline constexpr std::pair<const char*, Activation> kActivations[] = {
    {"tanh", Activation::tanh}, {"relu", Activation::relu}, {"identity", Activation::identity}};
inline constexpr std::pair<const char*, DecoderKind> kDecoders[] = {{"linear", DecoderKind::linear},
                                                                    {"mlp", DecoderKind::mlp}};
inline constexpr std::pair<const char*, AggregationKind> kAggregations[] = {
    {"prototype", AggregationKind::prototype}, {"labelled_r", AggregationKind::labelled_r}};
inline constexpr std::pair<const char*, Pooling> kPoolings[] = {{"mean", Pooling::mean}, {"sum", Pooling::sum}};
inline constexpr std::pair<const char*, RegularizerKind> kRegularizers[] = {
    {"none", RegularizerKind::none}, {"kl", RegularizerKind::kl}, {"mmd", RegularizerKind::mmd}};
inline constexpr std::pair<const char*, MmdEstimator> kEstimators[] = {{"biased", MmdEstimator::biased},
                                                                       {"unbiased", MmdEstimator::unbiased}};
inline constexpr std::pair<const char*, ScheduleKind> kSchedules[] = {{"constant", ScheduleKind::constant},
                                                                      {"monotonic", ScheduleKind::monotonic},
                                                                      {"cyclical", ScheduleKind::cyclical}};
inline constexpr std::pair<const char*, DatasetKind> kDatasets[] = {{"synthetic", DatasetKind::synthetic},
                                                                    {"fsds", DatasetKind::fsds}};

template <class E, std::size_t N>
const char* enum_name(E value, const std::pair<const char*, E> (&names)[N]) {
  for (const auto& [name, v] : names) {
    if (v == value) return name;
  }
  return "?";
}

}  // namespace detail

inline TrainConfig config_from_json(const Json& j) {
  using detail::FieldReader;
  TrainConfig cfg;
  FieldReader root(j, "config");
  bool explicit_total_steps = false;

  if (const Json* d = root.child("dataset")) {
    FieldReader r(*d, "config.dataset");
    r.read_enum("kind", cfg.dataset.kind, detail::kDatasets);
    if (cfg.dataset.kind == DatasetKind::synthetic) {
      r.read_size("num_classes", cfg.dataset.synthetic.num_classes);
      r.read_size("per_class", cfg.dataset.synthetic.per_class);
      r.read_size("input_dim", cfg.dataset.synthetic.input_dim);
      r.read("class_spread", cfg.dataset.synthetic.class_spread);
      r.read("noise", cfg.dataset.synthetic.noise);
    } else {
      r.read("path", cfg.dataset.path);
    }
    r.finish();
  }
  if (const Json* m = root.child("model")) {
    FieldReader r(*m, "config.model");
    r.read_size("input_dim", cfg.model.input_dim);
    r.read_sizes("encoder_widths", cfg.model.encoder_widths);
    r.read_enum("activation", cfg.model.activation, detail::kActivations);
    r.read_size("feature_dim", cfg.model.feature_dim);
    r.read_sizes("head_widths", cfg.model.head_widths);
    r.read_enum("decoder", cfg.model.decoder, detail::kDecoders);
    r.read_sizes("decoder_widths", cfg.model.decoder_widths);
    r.read_enum("aggregation", cfg.model.aggregation, detail::kAggregations);
    r.read_enum("pooling", cfg.model.pooling, detail::kPoolings);
    r.finish();
  }
  if (const Json* e = root.child("episode")) {
    FieldReader r(*e, "config.episode");
    r.read_size("ways", cfg.episode.ways);
    r.read_size("shots", cfg.episode.shots);
    r.read_size("queries", cfg.episode.queries);
    r.finish();
  }
  if (const Json* o = root.child("objective")) {
    FieldReader r(*o, "config.objective");
    auto& reg = cfg.objective.regularizer;
    r.read_enum("mode", reg.kind, detail::kRegularizers);
    r.read_size("samples", cfg.objective.samples);
    r.read_size("mmd_samples", reg.mmd_samples);
    r.read_enum("estimator", reg.estimator, detail::kEstimators);
    r.read("query_mix", reg.query_mix);
    if (const Json* bw = r.child("bandwidth")) {
      if (bw->is_string() && bw->get<std::string>() == "median") {
        reg.kernel = KernelConfig::median();
      } else if (bw->is_number()) {
        reg.kernel = KernelConfig::fixed(bw->get<double>());
      } else {
        throw ConfigError("config.objective.bandwidth: expected \"median\" or a positive number");
      }
    }
    r.finish();
  }
  if (const Json* s = root.child("schedule")) {
    FieldReader r(*s, "config.schedule");
    r.read_enum("kind", cfg.schedule.kind, detail::kSchedules);
    r.read("beta_max", cfg.schedule.beta_max);
    r.read_size("cycles", cfg.schedule.cycles);
    r.read("ramp_ratio", cfg.schedule.ramp_ratio);
    explicit_total_steps = s->contains("total_steps");
    r.read_size("total_steps", cfg.schedule.total_steps);
    r.finish();
  }
  if (const Json* o = root.child("optimizer")) {
    FieldReader r(*o, "config.optimizer");
    r.read("lr", cfg.optimizer.lr);
    r.read_size("tasks_per_batch", cfg.optimizer.tasks_per_batch);
    r.read_size("steps", cfg.optimizer.steps);
    r.read_size("eval_interval", cfg.optimizer.eval_interval);
    r.read_size("eval_tasks", cfg.optimizer.eval_tasks);
    r.finish();
  }
  if (const Json* s = root.child("seed")) {
    if (!s->is_number_unsigned()) throw ConfigError("config.seed: expected a non-negative integer");
    cfg.seed = s->get<std::uint64_t>();
  }
  root.finish();

  if (!explicit_total_steps) cfg.schedule.total_steps = std::max<std::size_t>(cfg.optimizer.steps, 1);
  cfg.validate();
  return cfg;
}

inline Json config_to_json(const TrainConfig& cfg) {
  using detail::enum_name;
  Json dataset = {{"kind", enum_name(cfg.dataset.kind, detail::kDatasets)}};
  if (cfg.dataset.kind == DatasetKind::synthetic) {
    const auto& s = cfg.dataset.synthetic;
    dataset["num_classes"] = s.num_classes;
    dataset["per_class"] = s.per_class;
    dataset["input_dim"] = s.input_dim;
    dataset["class_spread"] = s.class_spread;
    dataset["noise"] = s.noise;
  } else {
    dataset["path"] = cfg.dataset.path;
  }
  const auto& reg = cfg.objective.regularizer;
  Json bandwidth = reg.kernel.bandwidth ? Json(*reg.kernel.bandwidth) : Json("median");
  return Json{
      {"dataset", dataset},
      {"model",
       {{"input_dim", cfg.model.input_dim},
        {"encoder_widths", cfg.model.encoder_widths},
        {"activation", enum_name(cfg.model.activation, detail::kActivations)},
        {"feature_dim", cfg.model.feature_dim},
        {"head_widths", cfg.model.head_widths},
        {"decoder", enum_name(cfg.model.decoder, detail::kDecoders)},
        {"decoder_widths", cfg.model.decoder_widths},
        {"aggregation", enum_name(cfg.model.aggregation, detail::kAggregations)},
        {"pooling", enum_name(cfg.model.pooling, detail::kPoolings)}}},
      {"episode", {{"ways", cfg.episode.ways}, {"shots", cfg.episode.shots}, {"queries", cfg.episode.queries}}},
      {"objective",
       {{"mode", enum_name(reg.kind, detail::kRegularizers)},
        {"samples", cfg.objective.samples},
        {"mmd_samples", reg.mmd_samples},
        {"bandwidth", bandwidth},
        {"estimator", enum_name(reg.estimator, detail::kEstimators)},
        {"query_mix", reg.query_mix}}},
      {"schedule",
       {{"kind", enum_name(cfg.schedule.kind, detail::kSchedules)},
        {"beta_max", cfg.schedule.beta_max},
        {"cycles", cfg.schedule.cycles},
        {"ramp_ratio", cfg.schedule.ramp_ratio},
        {"total_steps", cfg.schedule.total_steps}}},
      {"optimizer",
       {{"lr", cfg.optimizer.lr},
        {"tasks_per_batch", cfg.optimizer.tasks_per_batch},
        {"steps", cfg.optimizer.steps},
        {"eval_interval", cfg.optimizer.eval_interval},
        {"eval_tasks", cfg.optimizer.eval_tasks}}},
      {"seed", cfg.seed},
  };
}

// Parses JSON text; syntax errors become ConfigError with line and column.
inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::size_t line = 1, column = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ConfigError(source + ": JSON parse error at line " + std::to_string(line) + ", column " +
                      std::to_string(column) + ": " + e.what());
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  return config_from_json(parse_json_text(read_text_file(path), path.string()));
}

}  // namespace mcammd
