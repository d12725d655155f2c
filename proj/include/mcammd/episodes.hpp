#pragma once

// Few-shot datasets and the C-way k-shot episode sampler.
//
// FSDS binary layout (little-endian):
//
//   offset  size  field
//   0       4     magic "FSDS"
//   4       4     u32 version (= 1)
//   8       4     u32 num_classes
//   12      4     u32 per_class
//   16      4     u32 height
//   20      4     u32 width
//   24      4     u32 channels
//   28      ...   num_classes * per_class * height * width * channels u8
//                 intensities, class-major then example-major
//
// Intensities are scaled to [0, 1] on load. Split assignments come from an
// optional sidecar `<file>.splits.json` of the form
// {"train": [class ids], "val": [...], "test": [...]}; without it classes are
// split 70/10/20 by index.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcammd/autodiff.hpp"
#include "mcammd/errors.hpp"
#include "mcammd/random.hpp"

namespace mcammd {

enum class Split : std::uint8_t { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

struct ImageGeometry {
  std::uint32_t height = 1;
  std::uint32_t width = 1;
  std::uint32_t channels = 1;
  bool operator==(const ImageGeometry&) const = default;
};

using Example = std::vector<double>;

struct Dataset {
  std::vector<std::vector<Example>> examples;  // [class][example] -> input vector
  std::vector<Split> splits;                   // one tag per class
  std::size_t input_dim = 0;
  std::optional<ImageGeometry> geometry;       // set for image-backed data

  std::size_t num_classes() const { return examples.size(); }

  std::vector<std::size_t> classes_in(Split split) const {
    std::vector<std::size_t> ids;
    for (std::size_t c = 0; c < splits.size(); ++c) {
      if (splits[c] == split) ids.push_back(c);
    }
    return ids;
  }

  bool operator==(const Dataset&) const = default;
};

inline std::vector<Split> default_splits(std::size_t num_classes) {
  const std::size_t n_train = num_classes * 7 / 10;
  const std::size_t n_val = num_classes / 10;
  std::vector<Split> splits(num_classes, Split::test);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (c < n_train) splits[c] = Split::train;
    else if (c < n_train + n_val) splits[c] = Split::val;
  }
  return splits;
}

struct SyntheticSpec {
  std::size_t num_classes = 100;
  std::size_t per_class = 40;
  std::size_t input_dim = 16;
  double class_spread = 3.0;  // std-dev of class means around the origin
  double noise = 1.0;         // within-class std-dev

  bool operator==(const SyntheticSpec&) const = default;

  void validate() const {
    if (num_classes == 0 || per_class == 0 || input_dim == 0) {
      throw ConfigError("synthetic dataset: num_classes, per_class and input_dim must be positive");
    }
    if (!(class_spread >= 0.0) || !std::isfinite(class_spread)) {
      throw ConfigError("synthetic dataset: class_spread must be finite and non-negative");
    }
    if (!(noise > 0.0) || !std::isfinite(noise)) {
      throw ConfigError("synthetic dataset: noise must be finite and positive");
    }
  }
};

// Gaussian class clusters: means m_c ~ N(0, spread^2 I), examples ~ N(m_c, noise^2 I).
inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.input_dim = spec.input_dim;
  ds.splits = default_splits(spec.num_classes);
  ds.examples.resize(spec.num_classes);
  for (auto& cls : ds.examples) {
    Example centre(spec.input_dim);
    for (auto& v : centre) v = spec.class_spread * normal(rng);
    cls.resize(spec.per_class, Example(spec.input_dim));
    for (auto& x : cls) {
      for (std::size_t j = 0; j < spec.input_dim; ++j) x[j] = centre[j] + spec.noise * normal(rng);
    }
  }
  return ds;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t offset, const char* field) {
  if (buf.size() < offset + 4) {
    throw FormatError(std::string("FSDS: truncated while reading ") + field, buf.size());
  }
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(buf[offset + i]);
  return v;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".splits.json";
  return p;
}

}  // namespace detail

inline constexpr std::uint32_t kFsdsVersion = 1;
inline constexpr std::size_t kFsdsHeaderSize = 28;

// Serialises pixel data. Every value must lie in [0, 1]; values are stored
// as round(255 * v), so data loaded from FSDS round-trips exactly.
inline std::string encode_fsds(const Dataset& ds) {
  if (ds.examples.empty()) throw ContractError("FSDS: dataset has no classes");
  const std::size_t per_class = ds.examples.front().size();
  const ImageGeometry geom =
      ds.geometry.value_or(ImageGeometry{1, static_cast<std::uint32_t>(ds.input_dim), 1});
  if (static_cast<std::size_t>(geom.height) * geom.width * geom.channels != ds.input_dim) {
    throw ContractError("FSDS: geometry does not match input_dim " + std::to_string(ds.input_dim));
  }
  std::ostringstream os(std::ios::binary);
  os.write("FSDS", 4);
  detail::put_u32(os, kFsdsVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(ds.num_classes()));
  detail::put_u32(os, static_cast<std::uint32_t>(per_class));
  detail::put_u32(os, geom.height);
  detail::put_u32(os, geom.width);
  detail::put_u32(os, geom.channels);
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    if (ds.examples[c].size() != per_class) {
      throw ContractError("FSDS: class " + std::to_string(c) + " has a different example count");
    }
    for (const auto& x : ds.examples[c]) {
      if (x.size() != ds.input_dim) throw ContractError("FSDS: example of wrong dimension");
      for (double v : x) {
        if (!(v >= 0.0 && v <= 1.0)) {
          throw ContractError("FSDS: value " + std::to_string(v) + " outside [0, 1]");
        }
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return std::move(os).str();
}

// Parses FSDS bytes. Splits default to 70/10/20 by class index.
inline Dataset decode_fsds(const std::string& buf) {
  if (buf.size() < 4 || buf.compare(0, 4, "FSDS") != 0) {
    throw FormatError("FSDS: bad magic", 0);
  }
  const auto version = detail::get_u32(buf, 4, "version");
  if (version != kFsdsVersion) {
    throw FormatError("FSDS: unsupported version " + std::to_string(version), 4);
  }
  const auto num_classes = detail::get_u32(buf, 8, "num_classes");
  const auto per_class = detail::get_u32(buf, 12, "per_class");
  ImageGeometry geom{detail::get_u32(buf, 16, "height"), detail::get_u32(buf, 20, "width"),
                     detail::get_u32(buf, 24, "channels")};
  if (num_classes == 0 || per_class == 0 || geom.height == 0 || geom.width == 0 || geom.channels == 0) {
    throw FormatError("FSDS: zero-sized header field", 8);
  }
  const std::size_t dim = static_cast<std::size_t>(geom.height) * geom.width * geom.channels;
  const std::size_t payload = static_cast<std::size_t>(num_classes) * per_class * dim;
  if (buf.size() < kFsdsHeaderSize + payload) {
    throw FormatError("FSDS: truncated pixel data, expected " + std::to_string(payload) + " bytes",
                      buf.size());
  }
  if (buf.size() > kFsdsHeaderSize + payload) {
    throw FormatError("FSDS: trailing bytes after pixel data", kFsdsHeaderSize + payload);
  }
  Dataset ds;
  ds.input_dim = dim;
  ds.geometry = geom;
  ds.splits = default_splits(num_classes);
  ds.examples.resize(num_classes);
  std::size_t offset = kFsdsHeaderSize;
  for (auto& cls : ds.examples) {
    cls.resize(per_class, Example(dim));
    for (auto& x : cls) {
      for (auto& v : x) v = static_cast<unsigned char>(buf[offset++]) / 255.0;
    }
  }
  return ds;
}

inline void apply_split_sidecar(Dataset& ds, const nlohmann::json& j) {
  std::vector<std::optional<Split>> assigned(ds.num_classes());
  for (auto it = j.begin(); it != j.end(); ++it) {
    const Split split = parse_split(it.key());
    for (const auto& id : it.value()) {
      const auto c = id.get<std::size_t>();
      if (c >= ds.num_classes()) {
        throw ConfigError("split sidecar: class id " + std::to_string(c) + " out of range");
      }
      if (assigned[c]) throw ConfigError("split sidecar: class " + std::to_string(c) + " listed twice");
      assigned[c] = split;
    }
  }
  for (std::size_t c = 0; c < assigned.size(); ++c) {
    if (!assigned[c]) throw ConfigError("split sidecar: class " + std::to_string(c) + " unassigned");
    ds.splits[c] = *assigned[c];
  }
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Dataset ds = decode_fsds(buf);
  const auto sidecar = detail::sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    std::ifstream sj(sidecar);
    apply_split_sidecar(ds, nlohmann::json::parse(sj));
  }
  return ds;
}

// Writes the FSDS file, plus a split sidecar when the splits differ from the
// index-based default.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const std::string bytes = encode_fsds(ds);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  const auto sidecar = detail::sidecar_path(path);
  if (ds.splits != default_splits(ds.num_classes())) {
    nlohmann::json j = {{"train", ds.classes_in(Split::train)},
                        {"val", ds.classes_in(Split::val)},
                        {"test", ds.classes_in(Split::test)}};
    std::ofstream(sidecar) << j.dump(2) << '\n';
  } else if (std::filesystem::exists(sidecar)) {
    std::filesystem::remove(sidecar);
  }
}

struct EpisodeShape {
  std::size_t ways = 5;     // C
  std::size_t shots = 1;    // k support examples per class
  std::size_t queries = 15; // M query examples per class

  bool operator==(const EpisodeShape&) const = default;

  void validate() const {
    if (ways < 1 || shots < 1 || queries < 1) {
      throw ConfigError("episode: ways, shots and queries must all be at least 1");
    }
  }
};

// Identifies an example as (dataset class, index within class).
struct ExampleRef {
  std::size_t cls = 0;
  std::size_t index = 0;
  auto operator<=>(const ExampleRef&) const = default;
};

// One task. Labels are episode-local, 0-based and assigned in the order the
// classes were drawn; class_map[label] is the dataset class id. Support and
// query rows are grouped by label.
struct Episode {
  std::vector<Example> support_x;
  std::vector<std::size_t> support_y;
  std::vector<ExampleRef> support_refs;
  std::vector<Example> query_x;
  std::vector<std::size_t> query_y;
  std::vector<ExampleRef> query_refs;
  std::vector<std::size_t> class_map;

  std::size_t ways() const { return class_map.size(); }
};

inline Episode sample_episode(const Dataset& ds, Split split, const EpisodeShape& shape, Rng& rng) {
  shape.validate();
  std::vector<std::size_t> pool = ds.classes_in(split);
  if (pool.size() < shape.ways) {
    throw ContractError(std::string("sample_episode: split '") + split_name(split) + "' has " +
                        std::to_string(pool.size()) + " classes, " + std::to_string(shape.ways) +
                        " needed");
  }
  const std::size_t per_task = shape.shots + shape.queries;
  // Partial Fisher-Yates: the first `ways` entries become the drawn classes.
  auto draw_prefix = [&rng](std::vector<std::size_t>& v, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
      std::swap(v[i], v[pick(rng)]);
    }
  };
  draw_prefix(pool, shape.ways);

  Episode ep;
  ep.class_map.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shape.ways));
  for (std::size_t label = 0; label < shape.ways; ++label) {
    const auto cls = ep.class_map[label];
    if (ds.examples[cls].size() < per_task) {
      throw ContractError("sample_episode: class " + std::to_string(cls) + " has " +
                          std::to_string(ds.examples[cls].size()) + " examples, " +
                          std::to_string(per_task) + " needed");
    }
  }
  for (std::size_t label = 0; label < shape.ways; ++label) {
    const auto cls = ep.class_map[label];
    std::vector<std::size_t> idx(ds.examples[cls].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    draw_prefix(idx, per_task);
    for (std::size_t i = 0; i < per_task; ++i) {
      const bool support = i < shape.shots;
      auto& xs = support ? ep.support_x : ep.query_x;
      auto& ys = support ? ep.support_y : ep.query_y;
      auto& refs = support ? ep.support_refs : ep.query_refs;
      xs.push_back(ds.examples[cls][idx[i]]);
      ys.push_back(label);
      refs.push_back({cls, idx[i]});
    }
  }
  return ep;
}

// Stacks examples into an (n x D) tensor without gradient.
inline Tensor stack_rows(const std::vector<Example>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no examples");
  const std::size_t d = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw ShapeError("stack_rows: examples have different dimensions");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), d}, std::move(data));
}

}  // namespace mcammd
