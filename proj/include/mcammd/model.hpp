#pragma once

// Amortized few-shot classifier: a shared MLP encoder, per-class context
// aggregation, Gaussian amortization heads, reparameterized weight sampling
// and a linear or MLP decoder.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcammd/autodiff.hpp"
#include "mcammd/episodes.hpp"
#include "mcammd/errors.hpp"
#include "mcammd/ops.hpp"
#include "mcammd/random.hpp"

namespace mcammd {

// Variance floor added after the softplus of the variance head.
inline constexpr double kMinVariance = 1e-6;

enum class Activation { tanh, relu, identity };
enum class DecoderKind { linear, mlp };
enum class AggregationKind { prototype, labelled_r };
enum class Pooling { mean, sum };

struct ModelConfig {
  std::size_t input_dim = 16;
  std::vector<std::size_t> encoder_widths{64, 64};
  Activation activation = Activation::tanh;
  std::size_t feature_dim = 16;                  // d
  std::vector<std::size_t> head_widths{};        // hidden layers of the amortization heads
  DecoderKind decoder = DecoderKind::linear;
  std::vector<std::size_t> decoder_widths{32};   // hidden layers of the MLP decoder
  AggregationKind aggregation = AggregationKind::prototype;
  Pooling pooling = Pooling::mean;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (input_dim == 0) throw ConfigError("model.input_dim must be positive");
    if (feature_dim == 0) throw ConfigError("model.feature_dim must be positive");
    for (auto w : encoder_widths) {
      if (w == 0) throw ConfigError("model.encoder_widths entries must be positive");
    }
    for (auto w : head_widths) {
      if (w == 0) throw ConfigError("model.head_widths entries must be positive");
    }
    for (auto w : decoder_widths) {
      if (w == 0) throw ConfigError("model.decoder_widths entries must be positive");
    }
  }
};

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
    case Activation::identity: return x;
  }
  return x;
}

// Affine layer x * W + b with W of shape (in x out).
struct Dense {
  Tensor weight;
  Tensor bias;

  Tensor forward(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

struct Mlp {
  std::vector<Dense> layers;
  Activation hidden = Activation::tanh;
  Activation output = Activation::identity;

  // Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)), zero biases.
  static Mlp init(std::size_t in, const std::vector<std::size_t>& widths, std::size_t out,
                  Activation hidden, Activation output, Rng& rng) {
    Mlp m{{}, hidden, output};
    std::size_t fan_in = in;
    auto add_layer = [&](std::size_t fan_out) {
      const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-s, s);
      std::vector<double> w(fan_in * fan_out);
      for (auto& v : w) v = u(rng);
      m.layers.push_back({Tensor({fan_in, fan_out}, std::move(w), true),
                          Tensor::zeros({fan_out}, true)});
      fan_in = fan_out;
    };
    for (auto w : widths) add_layer(w);
    add_layer(out);
    return m;
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = activate(layers[i].forward(h), i + 1 == layers.size() ? output : hidden);
    }
    return h;
  }

  std::size_t in_dim() const { return layers.front().weight.shape()[0]; }
  std::size_t out_dim() const { return layers.back().weight.shape()[1]; }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  ModelConfig config;
  std::size_t ways = 0;  // C; fixes the label width of the r-network input
  Mlp encoder;
  Mlp mean_head;
  Mlp variance_head;
  std::optional<Mlp> aggregator;  // labelled_r only
  std::optional<Mlp> decoder;     // mlp decoder only

  static ModelParams init(const ModelConfig& cfg, std::size_t ways, Rng& rng) {
    cfg.validate();
    if (ways == 0) throw ConfigError("model: ways must be positive");
    ModelParams p;
    p.config = cfg;
    p.ways = ways;
    const auto d = cfg.feature_dim;
    p.encoder = Mlp::init(cfg.input_dim, cfg.encoder_widths, d, cfg.activation, cfg.activation, rng);
    p.mean_head = Mlp::init(d, cfg.head_widths, d, cfg.activation, Activation::identity, rng);
    p.variance_head = Mlp::init(d, cfg.head_widths, d, cfg.activation, Activation::identity, rng);
    if (cfg.aggregation == AggregationKind::labelled_r) {
      p.aggregator = Mlp::init(d + ways, {}, d, Activation::identity, Activation::identity, rng);
    }
    if (cfg.decoder == DecoderKind::mlp) {
      p.decoder = Mlp::init(2 * d, cfg.decoder_widths, 1, cfg.activation, Activation::identity, rng);
    }
    return p;
  }

  // Same architecture with every weight and bias set to zero.
  static ModelParams zeros(const ModelConfig& cfg, std::size_t ways) {
    Rng rng(0);
    ModelParams p = init(cfg, ways, rng);
    for (auto& nt : p.named()) {
      for (auto& v : nt.tensor.mutable_data()) v = 0.0;
    }
    return p;
  }

  // Handles to every trainable tensor, in a fixed order with stable names.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    auto add_mlp = [&out](const std::string& prefix, const Mlp& m) {
      for (std::size_t i = 0; i < m.layers.size(); ++i) {
        out.push_back({prefix + "." + std::to_string(i) + ".weight", m.layers[i].weight});
        out.push_back({prefix + "." + std::to_string(i) + ".bias", m.layers[i].bias});
      }
    };
    add_mlp("encoder", encoder);
    add_mlp("mean_head", mean_head);
    add_mlp("variance_head", variance_head);
    if (aggregator) add_mlp("aggregator", *aggregator);
    if (decoder) add_mlp("decoder", *decoder);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& nt : named()) out.push_back(nt.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& nt : named()) n += nt.tensor.size();
    return n;
  }

  // Deep copy: the clone's tensors share no storage with this one.
  ModelParams clone() const {
    ModelParams p = *this;
    auto clone_mlp = [](Mlp& m) {
      for (auto& l : m.layers) {
        l.weight = l.weight.clone();
        l.bias = l.bias.clone();
      }
    };
    clone_mlp(p.encoder);
    clone_mlp(p.mean_head);
    clone_mlp(p.variance_head);
    if (p.aggregator) clone_mlp(*p.aggregator);
    if (p.decoder) clone_mlp(*p.decoder);
    return p;
  }
};

// Per-class diagonal Gaussian: mu and sigma2 are both (C x d).
struct GaussianPosterior {
  Tensor mu;
  Tensor sigma2;

  std::size_t ways() const { return mu.rows(); }
  std::size_t dim() const { return mu.cols(); }
};

// Feature map h(x) for every row of an (n x D) input batch.
inline Tensor encode(const Tensor& x, const ModelParams& params) {
  if (x.rank() != 2 || x.cols() != params.config.input_dim) {
    throw ShapeError("encode: expected inputs of width " + std::to_string(params.config.input_dim) +
                     ", got " + shape_string(x.shape()));
  }
  return params.encoder.forward(x);
}

// Pools a (k x d) block of features into a (1 x d) class representation.
inline Tensor pool_prototype(const Tensor& features, Pooling pooling) {
  if (features.rank() != 2) throw ShapeError("pool_prototype: expected (k x d), got " +
                                             shape_string(features.shape()));
  const auto k = features.rows();
  const double w = pooling == Pooling::mean ? 1.0 / static_cast<double>(k) : 1.0;
  return matmul(Tensor::filled({1, k}, w), features);
}

// (C x n) matrix whose row c pools the rows labelled c.
inline Tensor pooling_matrix(std::span<const std::size_t> labels, std::size_t ways, Pooling pooling) {
  std::vector<std::size_t> counts(ways, 0);
  for (auto y : labels) {
    if (y >= ways) throw ContractError("label " + std::to_string(y) + " outside 0.." + std::to_string(ways - 1));
    ++counts[y];
  }
  std::string missing;
  for (std::size_t c = 0; c < ways; ++c) {
    if (counts[c] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!missing.empty()) throw ContractError("aggregate_context: no support examples for class(es) " + missing);
  std::vector<double> m(ways * labels.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = labels[i];
    m[c * labels.size() + i] = pooling == Pooling::mean ? 1.0 / static_cast<double>(counts[c]) : 1.0;
  }
  return Tensor({ways, labels.size()}, std::move(m));
}

inline Tensor one_hot(std::span<const std::size_t> labels, std::size_t ways) {
  std::vector<double> m(labels.size() * ways, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= ways) throw ContractError("one_hot: label out of range");
    m[i * ways + labels[i]] = 1.0;
  }
  return Tensor({labels.size(), ways}, std::move(m));
}

// Per-example context vectors before pooling: h itself in prototype mode,
// r(concat(h, onehot(y))) in labelled_r mode. A missing label (unlabelled
// rows) is encoded as an all-zero label slot.
inline Tensor context_vectors(const Tensor& features, const Tensor& label_block, const ModelParams& params) {
  if (params.config.aggregation == AggregationKind::prototype) return features;
  return params.aggregator->forward(concat({features, label_block}));
}

// (C x d) representation of each class from already-encoded support features.
inline Tensor aggregate_features(const Tensor& support_features, std::span<const std::size_t> labels,
                                 const ModelParams& params) {
  if (support_features.rows() != labels.size()) {
    throw ShapeError("aggregate_context: " + std::to_string(labels.size()) + " labels for " +
                     shape_string(support_features.shape()) + " features");
  }
  const Tensor pool = pooling_matrix(labels, params.ways, params.config.pooling);
  Tensor vectors = support_features;
  if (params.config.aggregation == AggregationKind::labelled_r) {
    vectors = context_vectors(support_features, one_hot(labels, params.ways), params);
  }
  return matmul(pool, vectors);
}

inline Tensor aggregate_context(const Tensor& support_x, std::span<const std::size_t> labels,
                                const ModelParams& params) {
  return aggregate_features(encode(support_x, params), labels, params);
}

inline Tensor aggregate_context(const Episode& ep, const ModelParams& params) {
  return aggregate_context(stack_rows(ep.support_x), ep.support_y, params);
}

// Maps each class representation to (mu_c, sigma2_c); sigma2 = softplus(raw) + 1e-6.
inline GaussianPosterior amortize(const Tensor& rep, const ModelParams& params) {
  if (rep.rank() != 2 || rep.cols() != params.config.feature_dim) {
    throw ShapeError("amortize: expected (C x " + std::to_string(params.config.feature_dim) + "), got " +
                     shape_string(rep.shape()));
  }
  Tensor mu = params.mean_head.forward(rep);
  Tensor raw = params.variance_head.forward(rep);
  Tensor sigma2 = add(softplus(raw), Tensor::filled(raw.shape(), kMinVariance));
  return {std::move(mu), std::move(sigma2)};
}

// Standard deviation of a posterior, differentiable in sigma2.
inline Tensor posterior_stddev(const GaussianPosterior& post) { return sqrt_positive(post.sigma2); }

// phi_l = mu + sqrt(sigma2) * eps_l, eps_l ~ N(0, I); L tensors of shape (C x d).
inline std::vector<Tensor> sample_weights(const GaussianPosterior& post, std::size_t L, Rng& rng) {
  if (L == 0) throw ContractError("sample_weights: L must be at least 1");
  const Tensor sd = posterior_stddev(post);
  std::vector<Tensor> out;
  out.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    Tensor eps(post.mu.shape(), standard_normal(post.mu.size(), rng));
    out.push_back(add(post.mu, mul(sd, eps)));
  }
  return out;
}

// Logits (Q x C) for every query feature row against one weight sample
// phi (C x d). Linear: phi_c . h. MLP: shared net on concat(phi_c, h).
inline Tensor decode_logits(const Tensor& phi, const Tensor& h_query, const ModelParams& params) {
  const Tensor h = h_query.rank() == 1 ? reshape(h_query, {1, h_query.size()}) : h_query;
  if (phi.rank() != 2 || h.cols() != phi.cols()) {
    throw ShapeError("decode_logits: weights " + shape_string(phi.shape()) + " incompatible with features " +
                     shape_string(h_query.shape()));
  }
  if (params.config.decoder == DecoderKind::linear) return matmul(h, transpose(phi));

  const std::size_t q = h.rows(), c = phi.rows();
  std::vector<std::size_t> phi_idx(q * c), h_idx(q * c);
  for (std::size_t i = 0; i < q * c; ++i) {
    phi_idx[i] = i % c;
    h_idx[i] = i / c;
  }
  Tensor pairs = concat({gather_rows(phi, std::move(phi_idx)), gather_rows(h, std::move(h_idx))});
  return reshape(params.decoder->forward(pairs), {q, c});
}

}  // namespace mcammd
