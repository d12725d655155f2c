#pragma once

// Episodic meta-training with Adam, evaluation with 95% confidence
// intervals, and posterior-collapse diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mcammd/autodiff.hpp"
#include "mcammd/checkpoint.hpp"
#include "mcammd/config.hpp"
#include "mcammd/episodes.hpp"
#include "mcammd/gradcheck.hpp"
#include "mcammd/model.hpp"
#include "mcammd/objectives.hpp"
#include "mcammd/random.hpp"
#include "mcammd/schedules.hpp"

namespace mcammd {

// Seed-derivation tags, so that each consumer of the run seed gets its own stream.
namespace stream {
inline constexpr std::uint64_t dataset = 0x64617461;
inline constexpr std::uint64_t init = 0x696e6974;
inline constexpr std::uint64_t batch = 0x62617463;
inline constexpr std::uint64_t validation = 0x76616c69;
}  // namespace stream

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig hyper;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;

  static AdamState for_params(std::span<const Tensor> params, AdamConfig hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

// One bias-corrected Adam update in place. Parameters absent from `grads`
// are treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, const GradientMap& grads, AdamState& state) {
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                        std::to_string(params.size()));
  }
  state.t += 1;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw ContractError("adam_step: moment buffer shape mismatch");
    const auto it = grads.find(params[k].id());
    if (it != grads.end() && it->second.shape() != params[k].shape()) {
      throw ContractError("adam_step: gradient shape " + shape_string(it->second.shape()) + " for parameter " +
                          shape_string(params[k].shape()));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = it == grads.end() ? 0.0 : it->second.at(i);
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

inline Dataset build_dataset(const TrainConfig& cfg) {
  if (cfg.dataset.kind == DatasetKind::fsds) {
    Dataset ds = load_dataset(cfg.dataset.path);
    if (ds.input_dim != cfg.model.input_dim) {
      throw ConfigError("model.input_dim (" + std::to_string(cfg.model.input_dim) + ") does not match dataset (" +
                        std::to_string(ds.input_dim) + ")");
    }
    return ds;
  }
  return generate_synthetic_dataset(cfg.dataset.synthetic, derive_seed(cfg.seed, {stream::dataset}));
}

inline ModelParams initial_params(const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {stream::init}));
  return ModelParams::init(cfg.model, cfg.episode.ways, rng);
}

struct EvalOptions {
  Split split = Split::test;
  std::size_t num_tasks = 600;
  EpisodeShape shape;
  std::size_t samples = 10;  // L
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct EvalReport {
  std::size_t num_tasks = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 * sample std-dev / sqrt(num_tasks)
  std::vector<double> per_task;
};

inline EvalReport summarize_accuracies(std::vector<double> per_task) {
  EvalReport r;
  r.num_tasks = per_task.size();
  if (per_task.empty()) return r;
  double s = 0.0;
  for (double a : per_task) s += a;
  r.mean_accuracy = s / static_cast<double>(per_task.size());
  const auto [lo, hi] = std::minmax_element(per_task.begin(), per_task.end());
  if (per_task.size() > 1 && *lo != *hi) {
    double ss = 0.0;
    for (double a : per_task) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
    const double sd = std::sqrt(ss / static_cast<double>(per_task.size() - 1));
    r.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(per_task.size()));
  }
  r.per_task = std::move(per_task);
  return r;
}

// Fraction of queries whose argmax of the L-sample averaged predictive
// probability is the true label. Exact ties are broken uniformly at random,
// so a model with uniform predictions scores chance in expectation.
inline double episode_accuracy(const Episode& ep, const ModelParams& params, std::size_t L, Rng& rng) {
  NoGradGuard no_grad;
  const TaskForward f = forward_task(ep, params);
  const auto phi = sample_weights(f.context, L, rng);
  const std::size_t q = ep.query_y.size(), c = ep.ways();
  std::vector<double> avg(q * c, 0.0);
  for (const auto& sample : phi) {
    const Tensor p = softmax(decode_logits(sample, f.query_features, params));
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += p.at(i);
  }
  std::size_t correct = 0;
  for (std::size_t j = 0; j < q; ++j) {
    const double* row = avg.data() + j * c;
    const double best = *std::max_element(row, row + c);
    std::vector<std::size_t> winners;
    for (std::size_t k = 0; k < c; ++k) {
      if (row[k] == best) winners.push_back(k);
    }
    const std::size_t pred =
        winners.size() == 1 ? winners.front()
                            : winners[std::uniform_int_distribution<std::size_t>(0, winners.size() - 1)(rng)];
    correct += pred == ep.query_y[j];
  }
  return static_cast<double>(correct) / static_cast<double>(q);
}

// Task t uses its own stream derived from (seed, t), so the report does not
// depend on how tasks are distributed over threads.
inline EvalReport evaluate(const ModelParams& params, const Dataset& ds, const EvalOptions& opt) {
  if (opt.num_tasks == 0) throw ContractError("evaluate: num_tasks must be positive");
  std::vector<double> acc(opt.num_tasks, 0.0);
  auto run_task = [&](std::size_t t) {
    Rng rng(derive_seed(opt.seed, {t}));
    const Episode ep = sample_episode(ds, opt.split, opt.shape, rng);
    acc[t] = episode_accuracy(ep, params, opt.samples, rng);
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads, opt.num_tasks));
  if (workers == 1) {
    for (std::size_t t = 0; t < opt.num_tasks; ++t) run_task(t);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = w; t < opt.num_tasks; t += workers) run_task(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return summarize_accuracies(std::move(acc));
}

struct MetricsRow {
  std::size_t step = 0;
  double beta = 0.0;
  double nll = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
};

// Reference single-threaded training loop; bitwise reproducible for a given
// config on one platform. `on_row` sees every metrics row as it is produced.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds,
                         const std::function<void(const MetricsRow&)>& on_row = {}) {
  cfg.validate();
  const Schedule schedule(cfg.schedule);
  TrainResult result{initial_params(cfg), {}};
  auto params = result.params.tensors();
  AdamState adam = AdamState::for_params(params, AdamConfig{cfg.optimizer.lr});

  std::vector<Episode> batch(cfg.optimizer.tasks_per_batch);
  for (std::size_t step = 0; step < cfg.optimizer.steps; ++step) {
    const std::uint64_t batch_seed = derive_seed(cfg.seed, {stream::batch, step});
    Rng rng(batch_seed);
    for (auto& ep : batch) ep = sample_episode(ds, Split::train, cfg.episode, rng);

    MetricsRow row;
    row.step = step;
    row.beta = schedule.beta_at(step);
    try {
      const LossBreakdown loss = total_loss(batch, result.params, row.beta, cfg.objective, rng);
      if (!std::isfinite(loss.total)) throw DomainError("non-finite loss");
      row.nll = loss.nll;
      row.reg = loss.reg;
      row.total = loss.total;
      const GradientMap grads = backward(loss.loss);
      adam_step(params, grads, adam);
    } catch (const DomainError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (batch seed " +
                                 std::to_string(batch_seed) + "): " + e.what(),
                             static_cast<long>(step), batch_seed);
    }

    if (cfg.optimizer.eval_interval > 0 && (step + 1) % cfg.optimizer.eval_interval == 0) {
      EvalOptions eo;
      eo.split = Split::val;
      eo.num_tasks = cfg.optimizer.eval_tasks;
      eo.shape = cfg.episode;
      eo.samples = cfg.objective.samples;
      eo.seed = derive_seed(cfg.seed, {stream::validation, step});
      row.val_accuracy = evaluate(result.params, ds, eo).mean_accuracy;
    }
    if (on_row) on_row(row);
    result.metrics.push_back(row);
  }
  return result;
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_header(std::ostream& os) { os << "step,beta,nll,reg,total,val_accuracy\n"; }

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.step << ',' << format_real(r.beta) << ',' << format_real(r.nll) << ',' << format_real(r.reg) << ','
     << format_real(r.total) << ',' << (r.val_accuracy ? format_real(*r.val_accuracy) : std::string()) << '\n';
}

struct CollapseOptions {
  Split split = Split::test;
  std::size_t num_tasks = 50;
  EpisodeShape shape;
  std::size_t samples = 10;  // L draws per class written to the latent dump
  std::uint64_t seed = 0;
};

struct CollapseReport {
  double mean_posterior_variance = 0.0;
  double posterior_dispersion = 0.0;
  std::size_t num_tasks = 0;
  std::string latent_path;
};

// Mean of every sigma2 entry over classes, dimensions and tasks.
inline double mean_posterior_variance(std::span<const GaussianPosterior> posts) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& p : posts) {
    for (double v : p.sigma2.data()) s += v;
    n += p.sigma2.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// Mean Euclidean distance between mu_c of two different tasks, over all task
// pairs and every episode-local class c.
inline double posterior_dispersion(std::span<const GaussianPosterior> posts) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t a = 0; a < posts.size(); ++a) {
    for (std::size_t b = a + 1; b < posts.size(); ++b) {
      const auto& ma = posts[a].mu;
      const auto& mb = posts[b].mu;
      if (ma.shape() != mb.shape()) throw ShapeError("posterior_dispersion: posteriors of different shape");
      for (std::size_t c = 0; c < ma.rows(); ++c) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < ma.cols(); ++k) {
          const double diff = ma.at(c, k) - mb.at(c, k);
          d2 += diff * diff;
        }
        s += std::sqrt(d2);
        ++n;
      }
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// Posterior statistics over sampled tasks. When `latents` is given, writes
// CSV rows task,class,sample,dim_0..dim_{d-1} of L draws per class.
inline CollapseReport collapse_diagnostics(const ModelParams& params, const Dataset& ds,
                                           const CollapseOptions& opt, std::ostream* latents = nullptr) {
  if (opt.num_tasks == 0) throw ContractError("collapse_diagnostics: num_tasks must be positive");
  NoGradGuard no_grad;
  const std::size_t d = params.config.feature_dim;
  if (latents) {
    *latents << "task,class,sample";
    for (std::size_t k = 0; k < d; ++k) *latents << ",dim_" << k;
    *latents << '\n';
  }
  std::vector<GaussianPosterior> posts;
  for (std::size_t t = 0; t < opt.num_tasks; ++t) {
    Rng rng(derive_seed(opt.seed, {t}));
    const Episode ep = sample_episode(ds, opt.split, opt.shape, rng);
    posts.push_back(amortize(aggregate_context(ep, params), params));
    if (!latents) continue;
    const auto phi = sample_weights(posts.back(), opt.samples, rng);
    for (std::size_t c = 0; c < ep.ways(); ++c) {
      for (std::size_t l = 0; l < phi.size(); ++l) {
        *latents << t << ',' << c << ',' << l;
        for (std::size_t k = 0; k < d; ++k) *latents << ',' << format_real(phi[l].at(c, k));
        *latents << '\n';
      }
    }
  }
  CollapseReport r;
  r.num_tasks = opt.num_tasks;
  r.mean_posterior_variance = mean_posterior_variance(posts);
  r.posterior_dispersion = posterior_dispersion(posts);
  return r;
}

// The small problem the gradient check runs on: 2-way 1-shot with two
// queries, d = 3, L = 2 and hidden layers capped at width 8, keeping the
// rest of `cfg`.
inline TrainConfig gradcheck_fixture(TrainConfig cfg) {
  cfg.episode = EpisodeShape{2, 1, 2};
  cfg.model.feature_dim = 3;
  for (auto& w : cfg.model.encoder_widths) w = std::min<std::size_t>(w, 8);
  for (auto& w : cfg.model.head_widths) w = std::min<std::size_t>(w, 8);
  for (auto& w : cfg.model.decoder_widths) w = std::min<std::size_t>(w, 8);
  cfg.objective.samples = 2;
  return cfg;
}

// Finite-difference check of total_loss at beta = 1 (the NLL alone when the
// regularizer is none) on one episode drawn from `ds`. Median-heuristic
// bandwidths are computed once at the unperturbed point and then held fixed,
// as they are under differentiation. Returns the max relative error.
inline double run_gradcheck(const TrainConfig& cfg, const Dataset& ds, double h = 1e-5) {
  Rng init_rng(derive_seed(cfg.seed, {stream::init}));
  const ModelParams params = ModelParams::init(cfg.model, cfg.episode.ways, init_rng);
  Rng ep_rng(derive_seed(cfg.seed, {stream::batch}));
  const std::vector<Episode> episodes{sample_episode(ds, Split::train, cfg.episode, ep_rng)};
  const std::uint64_t loss_seed = derive_seed(cfg.seed, {stream::batch, 1});

  LossOptions frozen;
  if (cfg.objective.regularizer.kind == RegularizerKind::mmd) {
    NoGradGuard no_grad;
    Rng probe(loss_seed);
    for (const auto& t : total_loss(episodes, params, 1.0, cfg.objective, probe).per_task) {
      frozen.bandwidths.push_back(t.bandwidth);
    }
  }
  auto f = [&] {
    Rng rng(loss_seed);
    return total_loss(episodes, params, 1.0, cfg.objective, rng, frozen).loss;
  };
  auto tensors = params.tensors();
  return finite_diff_check(f, tensors, h);
}

}  // namespace mcammd
