// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fail. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mcammd/checkpoint.hpp"
#include "mcammd/cli.hpp"
#include "mcammd/divergences.hpp"
#include "mcammd/schedules.hpp"
#include "mcammd/trainer.hpp"

using namespace mcammd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Appends the runtime to the detail and fails the outcome if it exceeds the limit.
Outcome with_runtime(Outcome o, double seconds, double limit) {
  o.detail += "; runtime " + fmt("%.1f", seconds) + " s (limit " + fmt("%g", limit) + " s)";
  o.ok = o.ok && seconds < limit;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome gradient_suite() {
  const Stopwatch clock;
  const TrainConfig cfg = gradcheck_fixture(TrainConfig{});
  const Dataset ds = build_dataset(cfg);
  double worst = 0.0;
  std::string detail;
  for (auto [name, kind] : {std::pair{"nll", RegularizerKind::none}, std::pair{"kl", RegularizerKind::kl},
                            std::pair{"mmd", RegularizerKind::mmd}}) {
    TrainConfig c = cfg;
    c.objective.regularizer.kind = kind;
    const double e = run_gradcheck(c, ds, 1e-5);
    worst = std::max(worst, e);
    detail += std::string(name) + "=" + fmt("%.2e", e) + " ";
  }
  Outcome o{worst < 1e-4, detail + "max relative error " + fmt("%.2e", worst) + " (limit 1e-4)"};
  return with_runtime(o, clock.seconds(), 10.0);
}

double kl_monte_carlo(const GaussianPosterior& q1, const GaussianPosterior& q2, std::size_t n, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < q1.mu.size(); ++i) {
      const double m1 = q1.mu.at(i), v1 = q1.sigma2.at(i), m2 = q2.mu.at(i), v2 = q2.sigma2.at(i);
      const double x = m1 + std::sqrt(v1) * z(rng);
      total += -0.5 * std::log(v1) - 0.5 * (x - m1) * (x - m1) / v1 + 0.5 * std::log(v2) +
               0.5 * (x - m2) * (x - m2) / v2;
    }
  }
  return total / static_cast<double>(n);
}

Outcome divergence_oracles() {
  const Stopwatch clock;
  Rng rng(2024);
  std::uniform_real_distribution<double> var(0.5, 2.0), mean(-1.0, 1.0);
  double worst_kl = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    std::vector<double> m1(6), m2(6), v1(6), v2(6);
    for (std::size_t i = 0; i < 6; ++i) {
      m1[i] = mean(rng);
      m2[i] = mean(rng);
      v1[i] = var(rng);
      v2[i] = var(rng);
    }
    const GaussianPosterior q1{Tensor({2, 3}, m1), Tensor({2, 3}, v1)};
    const GaussianPosterior q2{Tensor({2, 3}, m2), Tensor({2, 3}, v2)};
    const double exact = gaussian_kl(q1, q2).item();
    const double mc = kl_monte_carlo(q1, q2, 100000, rng);
    worst_kl = std::max(worst_kl, std::abs(mc - exact) / exact);
  }

  const double two_point =
      mmd2(Tensor({1, 1}, {0.0}), Tensor({1, 1}, {2.0}), KernelConfig::fixed(1.0), MmdEstimator::biased).item();
  const double two_point_err = std::abs(two_point - (2.0 - 2.0 * std::exp(-2.0)));

  const Tensor X({2000, 1}, standard_normal(2000, rng)), Y({2000, 1}, standard_normal(2000, rng));
  const double unbiased = mmd2(X, Y, KernelConfig::fixed(1.0), MmdEstimator::unbiased).item();

  Outcome o{worst_kl < 0.02 && two_point_err < 1e-9 && std::abs(unbiased) < 0.01,
            "kl worst relative gap " + fmt("%.4f", worst_kl) + " (limit 0.02); two-point mmd2 error " +
                fmt("%.1e", two_point_err) + " (limit 1e-9); unbiased mmd2 " + fmt("%.5f", unbiased) +
                " (limit |.| < 0.01)"};
  return with_runtime(o, clock.seconds(), 30.0);
}

Outcome schedule_suite() {
  const Stopwatch clock;
  ScheduleConfig cyc;
  cyc.kind = ScheduleKind::cyclical;
  cyc.total_steps = 1000;
  cyc.cycles = 4;
  cyc.ramp_ratio = 0.5;
  cyc.beta_max = 1.0;
  const Schedule cyclical(cyc);
  bool starts = true, peaks = true, range = true;
  for (std::size_t k = 0; k < 4; ++k) {
    starts = starts && cyclical.beta_at(250 * k) == 0.0;
    peaks = peaks && cyclical.beta_at(250 * k + 125) == 1.0;
  }
  for (std::size_t s = 0; s < 1000; ++s) {
    const double b = cyclical.beta_at(s);
    range = range && b >= 0.0 && b <= 1.0;
  }
  ScheduleConfig one = cyc;
  one.cycles = 1;
  ScheduleConfig mono = cyc;
  mono.kind = ScheduleKind::monotonic;
  const Schedule single(one), monotonic(mono);
  bool matches = true;
  for (std::size_t s = 0; s < 1000; ++s) matches = matches && single.beta_at(s) == monotonic.beta_at(s);
  Outcome o{starts && peaks && range && matches,
            std::string("zero at cycle starts ") + (starts ? "yes" : "no") + "; beta_max mid-cycle " +
                (peaks ? "yes" : "no") + "; cycles=1 equals monotonic " + (matches ? "yes" : "no") +
                "; all values in [0,1] " + (range ? "yes" : "no")};
  return with_runtime(o, clock.seconds(), 1.0);
}

struct RunSummary {
  double accuracy = 0.0;
  double ci95 = 0.0;
  double variance = 0.0;
  double seconds = 0.0;
};

// Trains on the default synthetic data and reports meta-test accuracy over 600
// tasks and the mean posterior variance.
RunSummary paired_run(RegularizerKind kind) {
  const Stopwatch clock;
  TrainConfig cfg;
  cfg.objective.regularizer.kind = kind;
  const Dataset ds = build_dataset(cfg);
  const std::size_t log_every = 250;
  const TrainResult result = train(cfg, ds, [&](const MetricsRow& row) {
    if (row.step % log_every == 0) {
      std::cerr << "  step " << row.step << " beta " << row.beta << " nll " << row.nll << " reg " << row.reg
                << '\n';
    }
  });
  EvalOptions eval;
  eval.num_tasks = 600;
  eval.shape = cfg.episode;
  eval.samples = cfg.objective.samples;
  const EvalReport report = evaluate(result.params, ds, eval);
  CollapseOptions collapse;
  collapse.shape = cfg.episode;
  collapse.samples = cfg.objective.samples;
  const CollapseReport diag = collapse_diagnostics(result.params, ds, collapse);
  return {report.mean_accuracy, report.ci95, diag.mean_posterior_variance, clock.seconds()};
}

std::optional<RunSummary> regularized_run, unregularized_run;

const RunSummary& regularized() {
  if (!regularized_run) {
    std::cerr << "training cyclical + mmd, 2000 steps\n";
    regularized_run = paired_run(RegularizerKind::mmd);
  }
  return *regularized_run;
}

const RunSummary& unregularized() {
  if (!unregularized_run) {
    std::cerr << "training without regularizer, 2000 steps\n";
    unregularized_run = paired_run(RegularizerKind::none);
  }
  return *unregularized_run;
}

Outcome learning_check() {
  const RunSummary& r = regularized();
  Outcome o{r.accuracy >= 0.60, "test accuracy " + fmt("%.4f", r.accuracy) + " +/- " + fmt("%.4f", r.ci95) +
                                    " over 600 tasks (limit >= 0.60, chance 0.20)"};
  return with_runtime(o, r.seconds, 600.0);
}

Outcome anti_collapse() {
  const RunSummary& reg = regularized();
  const RunSummary& unreg = unregularized();
  const bool variance_ok = reg.variance > unreg.variance;
  const bool accuracy_ok = reg.accuracy >= unreg.accuracy - 0.02;
  Outcome o{variance_ok && accuracy_ok,
            "posterior variance " + fmt("%.4f", reg.variance) + " regularized vs " + fmt("%.4f", unreg.variance) +
                " unregularized (need >); accuracy " + fmt("%.4f", reg.accuracy) + " vs " +
                fmt("%.4f", unreg.accuracy) + " (need >= unregularized - 0.02)"};
  return with_runtime(o, reg.seconds + unreg.seconds, 1200.0);
}

Outcome sanity() {
  const Stopwatch clock;
  TrainConfig cfg;
  const Dataset ds = build_dataset(cfg);

  EvalOptions eval;
  eval.num_tasks = 600;
  eval.shape = cfg.episode;
  eval.samples = cfg.objective.samples;
  const EvalReport untrained = evaluate(ModelParams::zeros(cfg.model, cfg.episode.ways), ds, eval);
  const double chance = 1.0 / static_cast<double>(cfg.episode.ways);
  const bool chance_ok = std::abs(untrained.mean_accuracy - chance) <= 3.0 * untrained.ci95;

  Rng rng(99);
  std::size_t bad = 0;
  for (int t = 0; t < 10000; ++t) {
    const Split split = static_cast<Split>(t % 3);
    const Episode ep = sample_episode(ds, split, cfg.episode, rng);
    const std::set<ExampleRef> support(ep.support_refs.begin(), ep.support_refs.end());
    const std::set<ExampleRef> query(ep.query_refs.begin(), ep.query_refs.end());
    bool ok = support.size() == ep.support_refs.size() && query.size() == ep.query_refs.size();
    for (const auto& r : query) ok = ok && support.count(r) == 0;
    std::vector<std::size_t> s_count(cfg.episode.ways, 0), q_count(cfg.episode.ways, 0);
    for (auto y : ep.support_y) ++s_count[y];
    for (auto y : ep.query_y) ++q_count[y];
    for (std::size_t c = 0; c < cfg.episode.ways; ++c) {
      ok = ok && s_count[c] == cfg.episode.shots && q_count[c] == cfg.episode.queries &&
           ds.splits[ep.class_map[c]] == split;
    }
    if (!ok) ++bad;
  }

  // Random pixel file: bytes -> load -> write -> bytes, and decode -> encode.
  std::string bytes("FSDS", 4);
  for (std::uint32_t v : {kFsdsVersion, 40u, 20u, 8u, 8u, 1u}) {
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
  }
  std::uniform_int_distribution<int> pixel(0, 255);
  for (std::size_t i = 0; i < 40u * 20u * 64u; ++i) bytes.push_back(static_cast<char>(pixel(rng)));
  const fs::path src = fs::temp_directory_path() / "mcammd_acceptance_src.fsds";
  const fs::path dst = fs::temp_directory_path() / "mcammd_acceptance_dst.fsds";
  std::ofstream(src, std::ios::binary) << bytes;
  const Dataset loaded = load_dataset(src);
  write_dataset(loaded, dst);
  const bool bitwise = slurp(dst) == bytes && encode_fsds(decode_fsds(bytes)) == bytes &&
                       load_dataset(dst) == loaded;
  for (const auto& p : {src, dst}) {
    fs::remove(p);
    fs::remove(detail::sidecar_path(p));
  }

  Outcome o{chance_ok && bad == 0 && bitwise,
            "untrained accuracy " + fmt("%.4f", untrained.mean_accuracy) + " +/- " + fmt("%.4f", untrained.ci95) +
                " vs chance " + fmt("%.2f", chance) + " (need within 3 CI); " + std::to_string(bad) +
                " bad episodes of 10000; fsds round trip " + (bitwise ? "bitwise exact" : "differs")};
  return with_runtime(o, clock.seconds(), 60.0);
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "mcammd_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  TrainConfig cfg;
  cfg.optimizer.steps = 100;
  cfg.schedule.total_steps = 100;
  cfg.optimizer.eval_interval = 50;
  cfg.seed = 11;
  const fs::path config = root / "config.json";
  std::ofstream(config) << config_to_json(cfg).dump(2) << '\n';

  auto invoke = [&](const std::string& out) {
    const std::vector<std::string> args{"mcammd", "train", "--config", config.string(), "--out", (root / out).string()};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream sink_out, sink_err;
    return cli::run(static_cast<int>(argv.size()), argv.data(), sink_out, sink_err);
  };
  const int a = invoke("a"), b = invoke("b");
  const std::string metrics_a = slurp(root / "a" / "metrics.csv"), metrics_b = slurp(root / "b" / "metrics.csv");
  const std::string ck_a = slurp(root / "a" / "checkpoint.json"), ck_b = slurp(root / "b" / "checkpoint.json");
  fs::remove_all(root);
  const bool ok = a == 0 && b == 0 && !metrics_a.empty() && !ck_a.empty() && metrics_a == metrics_b && ck_a == ck_b;
  return {ok, "two train invocations (100 steps, seed 11): metrics.csv " +
                  std::string(metrics_a == metrics_b ? "identical" : "differ") + " (" +
                  std::to_string(metrics_a.size()) + " bytes), checkpoint " +
                  (ck_a == ck_b ? "identical" : "differ") + " (" + std::to_string(ck_a.size()) + " bytes)"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},   {2, "divergence oracles", divergence_oracles},
      {3, "schedule suite", schedule_suite},   {4, "learning check", learning_check},
      {5, "anti-collapse", anti_collapse},     {6, "episodic and statistical sanity", sanity},
      {7, "determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    try {
      selected.insert(std::stoi(argv[i]));
    } catch (const std::exception&) {
      std::cerr << "usage: acceptance [criterion ...]\n";
      return 1;
    }
  }
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.ok) ++failures;
    std::cout << (o.ok ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 2;
}
