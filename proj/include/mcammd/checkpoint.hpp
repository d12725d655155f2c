#pragma once

// Checkpoint JSON:
//
//   {
//     "format": "mcammd-checkpoint",
//     "version": 1,
//     "config": { ...TrainConfig, see config.hpp... },
//     "ways": 5,
//     "seed": 0,
//     "step": 2000,
//     "parameters": [ {"name": "encoder.0.weight", "shape": [16, 64], "data": [...]}, ... ]
//   }
//
// Parameter names and order are those of ModelParams::named().

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "mcammd/config.hpp"
#include "mcammd/model.hpp"

namespace mcammd {

inline constexpr const char* kCheckpointFormat = "mcammd-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

inline Json checkpoint_to_json(const Checkpoint& ck) {
  Json params = Json::array();
  for (const auto& nt : ck.params.named()) {
    params.push_back({{"name", nt.name},
                      {"shape", nt.tensor.shape()},
                      {"data", std::vector<double>(nt.tensor.data().begin(), nt.tensor.data().end())}});
  }
  return Json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"config", config_to_json(ck.config)},
              {"ways", ck.params.ways},
              {"seed", ck.seed},
              {"step", ck.step},
              {"parameters", params}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.value("format", std::string()) != kCheckpointFormat) {
      throw ConfigError("checkpoint: missing or wrong 'format' tag");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw ConfigError("checkpoint: unsupported version " + j.at("version").dump());
    }
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.step = j.at("step").get<std::size_t>();
    Rng unused(0);
    ck.params = ModelParams::init(ck.config.model, j.at("ways").get<std::size_t>(), unused);

    const auto& stored = j.at("parameters");
    auto named = ck.params.named();
    if (stored.size() != named.size()) {
      throw ConfigError("checkpoint: expected " + std::to_string(named.size()) + " parameter tensors, found " +
                        std::to_string(stored.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& entry = stored.at(i);
      if (entry.at("name").get<std::string>() != named[i].name) {
        throw ConfigError("checkpoint: parameter " + std::to_string(i) + " is '" +
                          entry.at("name").get<std::string>() + "', expected '" + named[i].name + "'");
      }
      if (entry.at("shape").get<Shape>() != named[i].tensor.shape()) {
        throw ConfigError("checkpoint: shape mismatch for " + named[i].name);
      }
      const auto values = entry.at("data").get<std::vector<double>>();
      auto dst = named[i].tensor.mutable_data();
      if (values.size() != dst.size()) throw ConfigError("checkpoint: data size mismatch for " + named[i].name);
      std::copy(values.begin(), values.end(), dst.begin());
    }
    return ck;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(ck).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(parse_json_text(read_text_file(path), path.string()));
}

}  // namespace mcammd
