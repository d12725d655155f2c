#pragma once

// Training objectives: Monte-Carlo predictive NLL, the posterior regularizer
// (closed-form KL or sample MMD between the query-conditioned and the
// context-only posteriors), and their beta-weighted sum.
//
// RNG protocol: every loss draws one seed per episode from the caller's
// generator, in episode order, before any other sampling. Each episode then
// draws its predictive samples first and its regularizer samples second from
// its own stream. The NLL part of a loss is therefore identical whether or
// not a regularizer is computed.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcammd/autodiff.hpp"
#include "mcammd/divergences.hpp"
#include "mcammd/episodes.hpp"
#include "mcammd/model.hpp"
#include "mcammd/ops.hpp"
#include "mcammd/random.hpp"

namespace mcammd {

enum class RegularizerKind { none, kl, mmd };

struct RegularizerMode {
  RegularizerKind kind = RegularizerKind::mmd;
  std::size_t mmd_samples = 32;  // draws per posterior
  KernelConfig kernel = KernelConfig::median();
  MmdEstimator estimator = MmdEstimator::biased;
  // Weight of the pooled query representation when building the
  // query-conditioned posterior: rep_full = (1 - a) rep_ctx + a * mean_j g(x_j).
  double query_mix = 0.5;

  bool operator==(const RegularizerMode&) const = default;

  void validate() const {
    if (kind == RegularizerKind::mmd && mmd_samples < 2) {
      throw ConfigError("objective.mmd_samples must be at least 2");
    }
    if (!(query_mix >= 0.0 && query_mix <= 1.0)) throw ConfigError("objective.query_mix must lie in [0, 1]");
  }
};

struct ObjectiveConfig {
  RegularizerMode regularizer;
  std::size_t samples = 10;  // L, Monte-Carlo weight samples per task

  bool operator==(const ObjectiveConfig&) const = default;

  void validate() const {
    if (samples == 0) throw ConfigError("objective.samples must be at least 1");
    regularizer.validate();
  }
};

// Everything computed once per episode and shared by the loss terms.
struct TaskForward {
  Tensor support_features;  // (N x d)
  Tensor query_features;    // (Q x d)
  Tensor context_rep;       // (C x d)
  GaussianPosterior context;
};

inline TaskForward forward_task(const Episode& ep, const ModelParams& params) {
  if (ep.ways() != params.ways) {
    throw ContractError("episode has " + std::to_string(ep.ways()) + " classes, model expects " +
                        std::to_string(params.ways));
  }
  TaskForward f;
  f.support_features = encode(stack_rows(ep.support_x), params);
  f.query_features = encode(stack_rows(ep.query_x), params);
  f.context_rep = aggregate_features(f.support_features, ep.support_y, params);
  f.context = amortize(f.context_rep, params);
  return f;
}

// log((1/L) sum_l softmax(decode(phi_l, h))[y]) for each query row; (Q x 1).
// Evaluated as log-sum-exp over per-sample class log-probabilities minus log L.
inline Tensor predictive_log_prob(std::span<const Tensor> phi_samples, const Tensor& h_query,
                                  std::span<const std::size_t> labels, const ModelParams& params) {
  if (phi_samples.empty()) throw ContractError("predictive_log_prob: need at least one weight sample");
  const std::size_t ways = phi_samples.front().rows();
  const Tensor h = h_query.rank() == 1 ? reshape(h_query, {1, h_query.size()}) : h_query;
  if (labels.size() != h.rows()) throw ContractError("predictive_log_prob: one label per query required");
  for (auto y : labels) {
    if (y >= ways) {
      throw ContractError("predictive_log_prob: class index " + std::to_string(y) + " outside 0.." +
                          std::to_string(ways - 1));
    }
  }
  const Tensor target = one_hot(labels, ways);
  const Tensor pick = Tensor::filled({ways, 1}, 1.0);
  std::vector<Tensor> per_sample;
  per_sample.reserve(phi_samples.size());
  for (const auto& phi : phi_samples) {
    per_sample.push_back(matmul(mul(log_softmax(decode_logits(phi, h, params)), target), pick));
  }
  const double log_l = std::log(static_cast<double>(phi_samples.size()));
  const Tensor lse = log_sum_exp(per_sample.size() == 1 ? per_sample.front() : concat(per_sample));
  return sub(lse, Tensor::filled(lse.shape(), log_l));
}

// Sum over the episode's queries of the predictive log-probability.
inline Tensor episode_log_likelihood(const Episode& ep, const TaskForward& f, const ModelParams& params,
                                     std::size_t L, Rng& rng) {
  const auto phi = sample_weights(f.context, L, rng);
  return sum(predictive_log_prob(phi, f.query_features, ep.query_y, params));
}

namespace detail {

inline std::vector<std::uint64_t> episode_seeds(std::size_t count, Rng& rng) {
  std::vector<std::uint64_t> seeds(count);
  for (auto& s : seeds) s = rng();
  return seeds;
}

inline std::size_t total_queries(std::span<const Episode> episodes) {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.query_y.size();
  return n;
}

// -(sum of per-episode log-likelihoods) / total query count.
inline Tensor nll_from_sums(const std::vector<Tensor>& sums, std::size_t total) {
  Tensor acc = sums.front();
  for (std::size_t t = 1; t < sums.size(); ++t) acc = add(acc, sums[t]);
  return scale(acc, -1.0 / static_cast<double>(total));
}

}  // namespace detail

// Negative mean predictive log-probability over every query of every episode.
inline Tensor nll_loss(std::span<const Episode> episodes, const ModelParams& params, std::size_t L, Rng& rng) {
  if (episodes.empty()) throw ContractError("nll_loss: empty batch");
  const auto seeds = detail::episode_seeds(episodes.size(), rng);
  std::vector<Tensor> sums;
  sums.reserve(episodes.size());
  for (std::size_t t = 0; t < episodes.size(); ++t) {
    Rng task_rng(seeds[t]);
    const TaskForward f = forward_task(episodes[t], params);
    sums.push_back(episode_log_likelihood(episodes[t], f, params, L, task_rng));
  }
  return detail::nll_from_sums(sums, detail::total_queries(episodes));
}

// The query-conditioned posterior: the context representation mixed with the
// pooled, unlabelled query representation.
inline GaussianPosterior full_posterior(const TaskForward& f, const ModelParams& params, double query_mix) {
  const std::size_t q = f.query_features.rows();
  const Tensor unlabeled = Tensor::zeros({q, params.ways});
  const Tensor vectors = context_vectors(f.query_features, unlabeled, params);
  const Tensor summary = pool_prototype(vectors, Pooling::mean);
  const Tensor rep = add_row(scale(f.context_rep, 1.0 - query_mix), scale(summary, query_mix));
  return amortize(rep, params);
}

// Flattened draws (S x C*d) from a posterior by reparameterization, one per
// row of the standard-normal block `eps` (S x C*d).
inline Tensor flat_draws(const GaussianPosterior& post, const Tensor& eps) {
  const std::size_t width = post.mu.size();
  if (eps.rank() != 2 || eps.cols() != width) {
    throw ShapeError("flat_draws: noise " + shape_string(eps.shape()) + " for a posterior of " +
                     std::to_string(width) + " entries");
  }
  const Tensor sd = reshape(posterior_stddev(post), {1, width});
  const Tensor mu = reshape(post.mu, {1, width});
  return add_row(mul(eps, gather_rows(sd, std::vector<std::size_t>(eps.rows(), 0))), mu);
}

inline Tensor flat_draws(const GaussianPosterior& post, std::size_t S, Rng& rng) {
  return flat_draws(post, Tensor({S, post.mu.size()}, standard_normal(S * post.mu.size(), rng)));
}

struct RegularizerResult {
  Tensor value;            // scalar
  double bandwidth = 0.0;  // mmd mode only
  Tensor full_draws;       // mmd mode only: samples from the query-conditioned posterior
  Tensor context_draws;    // mmd mode only: samples from the context posterior
};

// Divergence between the query-conditioned and the context-only posterior of
// one task. `bandwidth_override` > 0 replaces the kernel's bandwidth.
inline RegularizerResult regularizer_term(const TaskForward& f, const ModelParams& params,
                                          const RegularizerMode& mode, Rng& rng,
                                          double bandwidth_override = 0.0) {
  if (mode.kind == RegularizerKind::none) {
    throw ContractError("regularizer: mode 'none' has no regularizer; skip the call");
  }
  const GaussianPosterior full = full_posterior(f, params, mode.query_mix);
  RegularizerResult r;
  if (mode.kind == RegularizerKind::kl) {
    r.value = gaussian_kl(full, f.context);
    return r;
  }
  // Both posteriors are sampled with the same noise, so identical posteriors
  // give identical draws and an MMD of exactly zero.
  const std::size_t width = full.mu.size();
  const Tensor eps({mode.mmd_samples, width}, standard_normal(mode.mmd_samples * width, rng));
  r.full_draws = flat_draws(full, eps);
  r.context_draws = flat_draws(f.context, eps);
  r.bandwidth = bandwidth_override > 0.0 ? bandwidth_override
                                         : resolve_bandwidth(mode.kernel, r.full_draws, r.context_draws);
  r.value = mmd2_at(r.full_draws, r.context_draws, r.bandwidth, mode.estimator);
  return r;
}

// Regularizer of a single episode, drawing from `rng` directly.
inline RegularizerResult regularizer(const Episode& ep, const ModelParams& params, const RegularizerMode& mode,
                                     Rng& rng) {
  return regularizer_term(forward_task(ep, params), params, mode, rng);
}

struct TaskLoss {
  std::size_t task = 0;
  double nll = 0.0;  // mean over the task's queries
  double reg = 0.0;
  double bandwidth = 0.0;
};

struct LossBreakdown {
  Tensor loss;  // differentiable total
  double nll = 0.0;
  double reg = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::vector<TaskLoss> per_task;
};

struct LossOptions {
  // Per-task MMD bandwidths to use instead of the kernel config; empty for
  // none. Lets a caller hold the median-heuristic bandwidth fixed while
  // perturbing parameters.
  std::vector<double> bandwidths;
};

// nll + beta * (mean over tasks of the regularizer). With beta == 0 or mode
// none the regularizer is not evaluated, reg is 0 and total is the NLL tensor.
inline LossBreakdown total_loss(std::span<const Episode> episodes, const ModelParams& params, double beta,
                                const ObjectiveConfig& objective, Rng& rng, const LossOptions& options = {}) {
  if (episodes.empty()) throw ContractError("total_loss: empty batch");
  if (!(beta >= 0.0)) throw ContractError("total_loss: beta must be non-negative");
  if (!options.bandwidths.empty() && options.bandwidths.size() != episodes.size()) {
    throw ContractError("total_loss: one override bandwidth per task required");
  }
  const bool regularize = beta > 0.0 && objective.regularizer.kind != RegularizerKind::none;
  const auto seeds = detail::episode_seeds(episodes.size(), rng);

  LossBreakdown out;
  out.beta = beta;
  std::vector<Tensor> sums, regs;
  sums.reserve(episodes.size());
  for (std::size_t t = 0; t < episodes.size(); ++t) {
    Rng task_rng(seeds[t]);
    const TaskForward f = forward_task(episodes[t], params);
    sums.push_back(episode_log_likelihood(episodes[t], f, params, objective.samples, task_rng));
    TaskLoss tl;
    tl.task = t;
    tl.nll = -sums.back().item() / static_cast<double>(episodes[t].query_y.size());
    if (regularize) {
      const double override_bw = options.bandwidths.empty() ? 0.0 : options.bandwidths[t];
      auto r = regularizer_term(f, params, objective.regularizer, task_rng, override_bw);
      tl.reg = r.value.item();
      tl.bandwidth = r.bandwidth;
      regs.push_back(std::move(r.value));
    }
    out.per_task.push_back(tl);
  }

  const Tensor nll = detail::nll_from_sums(sums, detail::total_queries(episodes));
  out.nll = nll.item();
  if (!regularize) {
    out.loss = nll;
    out.total = out.nll;
    return out;
  }
  Tensor reg = regs.front();
  for (std::size_t t = 1; t < regs.size(); ++t) reg = add(reg, regs[t]);
  reg = scale(reg, 1.0 / static_cast<double>(regs.size()));
  out.reg = reg.item();
  out.loss = add(nll, scale(reg, beta));
  out.total = out.loss.item();
  return out;
}

}  // namespace mcammd
