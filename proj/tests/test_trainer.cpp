#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "mcammd/trainer.hpp"

using namespace mcammd;

namespace {

// A config small enough to train in well under a second.
TrainConfig tiny_config(RegularizerKind kind = RegularizerKind::mmd) {
  TrainConfig cfg;
  cfg.dataset.synthetic = SyntheticSpec{30, 12, 6, 3.0, 1.0};
  cfg.model.input_dim = 6;
  cfg.model.encoder_widths = {8};
  cfg.model.feature_dim = 4;
  cfg.episode = {3, 1, 3};
  cfg.objective.samples = 3;
  cfg.objective.regularizer.kind = kind;
  cfg.objective.regularizer.mmd_samples = 8;
  cfg.optimizer.steps = 12;
  cfg.optimizer.tasks_per_batch = 4;
  cfg.optimizer.eval_interval = 5;
  cfg.optimizer.eval_tasks = 10;
  cfg.optimizer.lr = 1e-3;
  cfg.schedule.total_steps = 12;
  cfg.schedule.cycles = 2;
  cfg.seed = 42;
  return cfg;
}

std::vector<double> flat(const ModelParams& p) {
  std::vector<double> out;
  for (const auto& t : p.tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::string metrics_text(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  write_metrics_header(os);
  for (const auto& r : rows) write_metrics_row(os, r);
  return os.str();
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor w = Tensor::vector({0.5, -1.0, 2.0}, true);
  std::vector<Tensor> params{w};
  auto state = AdamState::for_params(params);
  GradientMap grads;
  grads.emplace(w.id(), Tensor::zeros({3}));
  adam_step(params, grads, state);
  adam_step(params, {}, state);
  EXPECT_EQ(w.at(0), 0.5);
  EXPECT_EQ(w.at(1), -1.0);
  EXPECT_EQ(w.at(2), 2.0);
  EXPECT_EQ(state.t, 2u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w = Tensor::scalar(3.0, true);
  std::vector<Tensor> params{w};
  auto state = AdamState::for_params(params, AdamConfig{0.1});
  GradientMap grads;
  grads.emplace(w.id(), Tensor::scalar(1.0));
  adam_step(params, grads, state);
  EXPECT_NEAR(w.item() - 3.0, -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MatchesHandIteration) {
  Tensor w = Tensor::scalar(0.0, true);
  std::vector<Tensor> params{w};
  auto state = AdamState::for_params(params, AdamConfig{0.01});
  double m = 0, v = 0, x = 0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 0.3 * t - 0.7;
    GradientMap grads;
    grads.emplace(w.id(), Tensor::scalar(g));
    adam_step(params, grads, state);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w.item(), x, 1e-15);
  }
}

TEST(Adam, IdenticalStatesGiveIdenticalResults) {
  auto run = [] {
    Tensor w = Tensor::vector({0.1, 0.2}, true);
    std::vector<Tensor> params{w};
    auto state = AdamState::for_params(params);
    GradientMap grads;
    grads.emplace(w.id(), Tensor::vector({0.3, -0.4}));
    adam_step(params, grads, state);
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatchIsAContractError) {
  Tensor w = Tensor::vector({0.1, 0.2}, true);
  std::vector<Tensor> params{w};
  auto state = AdamState::for_params(params);
  GradientMap grads;
  grads.emplace(w.id(), Tensor::vector({0.3, -0.4, 1.0}));
  EXPECT_THROW(adam_step(params, grads, state), ContractError);
  std::vector<Tensor> more{w, Tensor::scalar(1.0, true)};
  EXPECT_THROW(adam_step(more, {}, state), ContractError);
}

TEST(Train, ZeroStepsReturnsInitialization) {
  auto cfg = tiny_config();
  cfg.optimizer.steps = 0;
  const auto ds = build_dataset(cfg);
  const auto result = train(cfg, ds);
  EXPECT_TRUE(result.metrics.empty());
  EXPECT_EQ(flat(result.params), flat(initial_params(cfg)));
}

TEST(Train, NoneModeLogsZeroRegularizer) {
  const auto cfg = tiny_config(RegularizerKind::none);
  const auto result = train(cfg, build_dataset(cfg));
  ASSERT_EQ(result.metrics.size(), 12u);
  for (const auto& row : result.metrics) {
    EXPECT_EQ(row.reg, 0.0);
    EXPECT_EQ(row.total, row.nll);
  }
}

TEST(Train, MetricsRowsSatisfyTotalIdentity) {
  for (auto kind : {RegularizerKind::kl, RegularizerKind::mmd}) {
    const auto cfg = tiny_config(kind);
    const auto result = train(cfg, build_dataset(cfg));
    bool saw_reg = false;
    for (const auto& row : result.metrics) {
      EXPECT_NEAR(row.total, row.nll + row.beta * row.reg, 1e-12);
      EXPECT_EQ(row.beta, Schedule(cfg.schedule).beta_at(row.step));
      saw_reg |= row.reg > 0.0;
    }
    EXPECT_TRUE(saw_reg);
  }
}

TEST(Train, ValidationEveryInterval) {
  const auto cfg = tiny_config();
  const auto result = train(cfg, build_dataset(cfg));
  for (const auto& row : result.metrics) {
    EXPECT_EQ(row.val_accuracy.has_value(), (row.step + 1) % 5 == 0) << row.step;
    if (row.val_accuracy) {
      EXPECT_GE(*row.val_accuracy, 0.0);
      EXPECT_LE(*row.val_accuracy, 1.0);
    }
  }
}

TEST(Train, BitwiseReproducible) {
  const auto cfg = tiny_config();
  const auto ds = build_dataset(cfg);
  const auto a = train(cfg, ds);
  const auto b = train(cfg, ds);
  EXPECT_EQ(metrics_text(a.metrics), metrics_text(b.metrics));
  EXPECT_EQ(flat(a.params), flat(b.params));
}

TEST(Train, CallbackSeesEveryRow) {
  const auto cfg = tiny_config();
  std::size_t n = 0;
  train(cfg, build_dataset(cfg), [&](const MetricsRow& row) { EXPECT_EQ(row.step, n++); });
  EXPECT_EQ(n, 12u);
}

TEST(Train, NonFiniteLossAbortsWithStepAndSeed) {
  auto cfg = tiny_config();
  const auto ds = build_dataset(cfg);
  Dataset broken = ds;
  for (auto& cls : broken.examples) {
    for (auto& x : cls) x[0] = std::numeric_limits<double>::quiet_NaN();
  }
  try {
    train(cfg, broken);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_EQ(e.batch_seed(), derive_seed(cfg.seed, {stream::batch, 0}));
    EXPECT_NE(std::string(e.what()).find("batch seed"), std::string::npos);
  }
}

TEST(Train, NearlyNoiselessDataIsLearnedAlmostPerfectly) {
  auto cfg = tiny_config(RegularizerKind::none);
  cfg.dataset.synthetic = SyntheticSpec{100, 12, 16, 3.0, 0.01};
  cfg.model.input_dim = 16;
  cfg.model.encoder_widths = {32};
  cfg.model.feature_dim = 16;
  cfg.optimizer.steps = 1500;
  cfg.optimizer.tasks_per_batch = 8;
  cfg.optimizer.lr = 3e-3;
  cfg.optimizer.eval_interval = 0;
  cfg.schedule.total_steps = 1500;
  const auto ds = build_dataset(cfg);
  const auto result = train(cfg, ds);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += result.metrics[i].nll;
    last += result.metrics[result.metrics.size() - 1 - i].nll;
  }
  EXPECT_LT(last, 0.5 * first);

  EvalOptions opt;
  opt.num_tasks = 100;
  opt.shape = cfg.episode;
  opt.samples = cfg.objective.samples;
  EXPECT_GE(evaluate(result.params, ds, opt).mean_accuracy, 0.99);
}

TEST(Evaluate, ZeroWeightModelIsAtChance) {
  TrainConfig cfg;
  const auto ds = build_dataset(cfg);
  const auto params = ModelParams::zeros(cfg.model, 5);
  EvalOptions opt;
  opt.num_tasks = 600;
  const auto report = evaluate(params, ds, opt);
  EXPECT_GT(report.ci95, 0.0);
  EXPECT_LE(std::abs(report.mean_accuracy - 0.2), 3.0 * report.ci95)
      << report.mean_accuracy << " +- " << report.ci95;
}

TEST(Evaluate, RepeatableAndThreadCountIndependent) {
  const auto cfg = tiny_config();
  const auto ds = build_dataset(cfg);
  const auto params = initial_params(cfg);
  EvalOptions opt;
  opt.num_tasks = 37;
  opt.shape = cfg.episode;
  opt.seed = 9;
  const auto a = evaluate(params, ds, opt);
  const auto b = evaluate(params, ds, opt);
  opt.threads = 4;
  const auto c = evaluate(params, ds, opt);
  EXPECT_EQ(a.per_task, b.per_task);
  EXPECT_EQ(a.per_task, c.per_task);
  EXPECT_EQ(a.mean_accuracy, c.mean_accuracy);
  EXPECT_EQ(a.ci95, c.ci95);
  EXPECT_EQ(flat(params), flat(initial_params(cfg)));
}

TEST(Evaluate, SummaryStatistics) {
  const auto flat_report = summarize_accuracies({0.4, 0.4, 0.4});
  EXPECT_EQ(flat_report.ci95, 0.0);
  EXPECT_DOUBLE_EQ(flat_report.mean_accuracy, 0.4);
  const auto r = summarize_accuracies({0.0, 1.0, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(r.mean_accuracy, 0.5);
  EXPECT_NEAR(r.ci95, 1.96 * std::sqrt(0.5 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(r.num_tasks, 4u);
}

TEST(Evaluate, ZeroTasksIsAContractError) {
  const auto cfg = tiny_config();
  EvalOptions opt;
  opt.num_tasks = 0;
  EXPECT_THROW(evaluate(initial_params(cfg), build_dataset(cfg), opt), ContractError);
}

TEST(Collapse, DegeneratePosteriors) {
  const std::vector<GaussianPosterior> posts{
      {Tensor::matrix({{1, 2}, {3, 4}}), Tensor::filled({2, 2}, kMinVariance)},
      {Tensor::matrix({{1, 2}, {3, 4}}), Tensor::filled({2, 2}, kMinVariance)},
      {Tensor::matrix({{1, 2}, {3, 4}}), Tensor::filled({2, 2}, kMinVariance)}};
  EXPECT_DOUBLE_EQ(mean_posterior_variance(posts), kMinVariance);
  EXPECT_EQ(posterior_dispersion(posts), 0.0);
}

TEST(Collapse, DispersionIsMeanMatchedClassDistance) {
  const std::vector<GaussianPosterior> posts{{Tensor::matrix({{0, 0}, {0, 0}}), Tensor::filled({2, 2}, 1.0)},
                                             {Tensor::matrix({{3, 4}, {0, 1}}), Tensor::filled({2, 2}, 3.0)}};
  EXPECT_DOUBLE_EQ(posterior_dispersion(posts), 3.0);  // (5 + 1) / 2
  EXPECT_DOUBLE_EQ(mean_posterior_variance(posts), 2.0);
}

TEST(Collapse, DiagnosticsWriteLatentCsv) {
  const auto cfg = tiny_config();
  const auto ds = build_dataset(cfg);
  CollapseOptions opt;
  opt.num_tasks = 4;
  opt.shape = cfg.episode;
  opt.samples = 2;
  std::ostringstream csv;
  const auto r = collapse_diagnostics(initial_params(cfg), ds, opt, &csv);
  EXPECT_GT(r.mean_posterior_variance, 0.0);
  EXPECT_GT(r.posterior_dispersion, 0.0);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "task,class,sample,dim_0,dim_1,dim_2,dim_3");
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
  }
  EXPECT_EQ(rows, 4u * 3u * 2u);

  std::ostringstream again;
  const auto r2 = collapse_diagnostics(initial_params(cfg), ds, opt, &again);
  EXPECT_EQ(csv.str(), again.str());
  EXPECT_EQ(r.mean_posterior_variance, r2.mean_posterior_variance);
}

TEST(Gradcheck, FixtureCapsHiddenWidths) {
  TrainConfig cfg;
  cfg.model.encoder_widths = {64, 4};
  cfg.model.decoder_widths = {32};
  const auto fixture = gradcheck_fixture(cfg);
  EXPECT_EQ(fixture.model.encoder_widths, (std::vector<std::size_t>{8, 4}));
  EXPECT_EQ(fixture.model.decoder_widths, (std::vector<std::size_t>{8}));
  EXPECT_EQ(fixture.model.input_dim, cfg.model.input_dim);
  EXPECT_EQ(fixture.objective.samples, 2u);
}

TEST(Gradcheck, FixturePassesInEveryMode) {
  for (auto kind : {RegularizerKind::none, RegularizerKind::kl, RegularizerKind::mmd}) {
    auto cfg = gradcheck_fixture(tiny_config(kind));
    EXPECT_EQ(cfg.episode, (EpisodeShape{2, 1, 2}));
    EXPECT_EQ(cfg.model.feature_dim, 3u);
    EXPECT_LT(run_gradcheck(cfg, build_dataset(cfg)), 1e-4);
  }
}
