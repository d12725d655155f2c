#pragma once

// The mcammd command line. Results go to `out` (JSON or nothing), progress
// and errors to `err`. Exit status: 0 success, 1 usage or configuration
// error, 2 runtime failure.

#include <exception>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcammd/checkpoint.hpp"
#include "mcammd/config.hpp"
#include "mcammd/trainer.hpp"

namespace mcammd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline Json report_json(const EvalReport& r, Split split, std::uint64_t seed) {
  return Json{{"split", split_name(split)},
              {"seed", seed},
              {"num_tasks", r.num_tasks},
              {"mean_accuracy", r.mean_accuracy},
              {"ci95", r.ci95}};
}

struct TrainArgs {
  std::string config;
  std::string out = ".";
};

struct EvalArgs {
  std::string checkpoint;
  std::size_t tasks = 600;
  std::uint64_t seed = 0;
  std::string split = "test";
  std::size_t threads = 1;
};

struct LatentArgs {
  std::string checkpoint;
  std::size_t tasks = 50;
  std::string out;
  std::uint64_t seed = 0;
  std::string split = "test";
};

struct ScheduleArgs {
  std::string config;
  std::string out;
};

struct GradcheckArgs {
  std::string config;
  double tolerance = 1e-4;
  double step = 1e-5;
};

inline int do_train(const TrainArgs& a, std::ostream&, std::ostream& err) {
  const TrainConfig cfg = load_config(a.config);
  const Dataset ds = build_dataset(cfg);
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  auto metrics = open_output(dir / "metrics.csv");
  write_metrics_header(metrics);
  err << "training " << cfg.optimizer.steps << " steps, " << cfg.episode.ways << "-way " << cfg.episode.shots
      << "-shot\n";
  const std::size_t log_every = std::max<std::size_t>(1, cfg.optimizer.steps / 20);
  const TrainResult result = train(cfg, ds, [&](const MetricsRow& row) {
    write_metrics_row(metrics, row);
    if (row.step % log_every == 0 || row.val_accuracy) {
      err << "step " << row.step << " beta " << row.beta << " nll " << row.nll << " reg " << row.reg;
      if (row.val_accuracy) err << " val_acc " << *row.val_accuracy;
      err << '\n';
    }
  });
  metrics.close();
  if (!metrics) throw std::runtime_error("failed writing metrics.csv");
  save_checkpoint(Checkpoint{cfg, result.params, cfg.seed, cfg.optimizer.steps}, dir / "checkpoint.json");
  err << "wrote " << (dir / "checkpoint.json").string() << " and " << (dir / "metrics.csv").string() << '\n';
  return kExitOk;
}

inline int do_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = build_dataset(ck.config);
  EvalOptions opt;
  opt.split = parse_split(a.split);
  opt.num_tasks = a.tasks;
  opt.shape = ck.config.episode;
  opt.samples = ck.config.objective.samples;
  opt.seed = a.seed;
  opt.threads = a.threads;
  if (opt.num_tasks == 0) throw ConfigError("--tasks must be positive");
  err << "evaluating " << opt.num_tasks << " tasks on the " << a.split << " split\n";
  out << report_json(evaluate(ck.params, ds, opt), opt.split, opt.seed).dump(2) << '\n';
  return kExitOk;
}

inline int do_dump_latents(const LatentArgs& a, std::ostream& out, std::ostream& err) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = build_dataset(ck.config);
  CollapseOptions opt;
  opt.split = parse_split(a.split);
  opt.num_tasks = a.tasks;
  opt.shape = ck.config.episode;
  opt.samples = ck.config.objective.samples;
  opt.seed = a.seed;
  if (opt.num_tasks == 0) throw ConfigError("--tasks must be positive");
  auto csv = open_output(a.out);
  CollapseReport r = collapse_diagnostics(ck.params, ds, opt, &csv);
  csv.close();
  if (!csv) throw std::runtime_error("failed writing " + a.out);
  r.latent_path = a.out;
  err << "wrote " << a.out << '\n';
  out << Json{{"num_tasks", r.num_tasks},
              {"mean_posterior_variance", r.mean_posterior_variance},
              {"posterior_dispersion", r.posterior_dispersion},
              {"latents", r.latent_path}}
             .dump(2)
      << '\n';
  return kExitOk;
}

inline int do_preview_schedule(const ScheduleArgs& a, std::ostream&, std::ostream& err) {
  const TrainConfig cfg = load_config(a.config);
  const Schedule schedule(cfg.schedule);
  auto csv = open_output(a.out);
  csv << "step,beta\n";
  for (std::size_t s = 0; s < cfg.schedule.total_steps; ++s) csv << s << ',' << format_real(schedule.beta_at(s)) << '\n';
  csv.close();
  if (!csv) throw std::runtime_error("failed writing " + a.out);
  err << "wrote " << cfg.schedule.total_steps << " rows to " << a.out << '\n';
  return kExitOk;
}

inline int do_gradcheck(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = gradcheck_fixture(load_config(a.config));
  const Dataset ds = build_dataset(cfg);
  Json errors = Json::object();
  double worst = 0.0;
  for (auto [name, kind] : {std::pair{"nll", RegularizerKind::none}, std::pair{"kl", RegularizerKind::kl},
                            std::pair{"mmd", RegularizerKind::mmd}}) {
    TrainConfig c = cfg;
    c.objective.regularizer.kind = kind;
    const double e = run_gradcheck(c, ds, a.step);
    err << "gradcheck " << name << ": max relative error " << e << '\n';
    errors[name] = e;
    worst = std::max(worst, e);
  }
  const bool ok = worst < a.tolerance;
  out << Json{{"ways", cfg.episode.ways},
              {"shots", cfg.episode.shots},
              {"queries", cfg.episode.queries},
              {"feature_dim", cfg.model.feature_dim},
              {"samples", cfg.objective.samples},
              {"errors", errors},
              {"max_relative_error", worst},
              {"tolerance", a.tolerance},
              {"passed", ok}}
             .dump(2)
      << '\n';
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learning with cyclical annealing and MMD regularization", "mcammd"};
  app.require_subcommand(1);

  detail::TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes checkpoint.json and metrics.csv");
  train_cmd->add_option("--config", train_args.config, "JSON training config")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->capture_default_str();

  detail::EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Meta-test accuracy of a checkpoint, as JSON");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint JSON")->required();
  eval_cmd->add_option("--tasks", eval_args.tasks, "Number of tasks")->capture_default_str();
  eval_cmd->add_option("--seed", eval_args.seed, "Task sampling seed")->capture_default_str();
  eval_cmd->add_option("--split", eval_args.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--threads", eval_args.threads, "Worker threads")->capture_default_str();

  detail::LatentArgs latent_args;
  auto* latent_cmd = app.add_subcommand("dump-latents", "Write sampled class weights to CSV");
  latent_cmd->add_option("--checkpoint", latent_args.checkpoint, "Checkpoint JSON")->required();
  latent_cmd->add_option("--tasks", latent_args.tasks, "Number of tasks")->capture_default_str();
  latent_cmd->add_option("--out", latent_args.out, "Output CSV")->required();
  latent_cmd->add_option("--seed", latent_args.seed, "Task sampling seed")->capture_default_str();
  latent_cmd->add_option("--split", latent_args.split, "train, val or test")->capture_default_str();

  detail::ScheduleArgs schedule_args;
  auto* schedule_cmd = app.add_subcommand("preview-schedule", "Write the beta schedule as step,beta CSV");
  schedule_cmd->add_option("--config", schedule_args.config, "JSON training config")->required();
  schedule_cmd->add_option("--out", schedule_args.out, "Output CSV")->required();

  detail::GradcheckArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradients");
  grad_cmd->add_option("--config", grad_args.config, "JSON training config")->required();
  grad_cmd->add_option("--tolerance", grad_args.tolerance, "Maximum relative error")->capture_default_str();
  grad_cmd->add_option("--step", grad_args.step, "Central-difference step")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (*train_cmd) return detail::do_train(train_args, out, err);
    if (*eval_cmd) return detail::do_eval(eval_args, out, err);
    if (*latent_cmd) return detail::do_dump_latents(latent_args, out, err);
    if (*schedule_cmd) return detail::do_preview_schedule(schedule_args, out, err);
    if (*grad_cmd) return detail::do_gradcheck(grad_args, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace mcammd::cli
