// Command-line front end: train, eval, sweep and validate.
//
// Exit status: 0 success, 1 configuration error, 2 numeric failure,
// 3 simulator validation failure.

#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "d3pg/errors.hpp"
#include "d3pg/harness.hpp"

namespace {

using namespace d3pg;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::string out;
  std::string algo;
  std::string stas;
  std::string denoise_steps;
  std::optional<int> interactions;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool list_axes) {
  cmd->add_option("--config", o.config, "key = value experiment file")->check(CLI::ExistingFile);
  auto* seed = cmd->add_option("--seed", o.seed, "run a single seed");
  cmd->add_option("--seeds", o.seeds, "comma-separated seeds")->excludes(seed);
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--algo", o.algo, "d3pg | ddpg | beb");
  cmd->add_option("--stas", o.stas, list_axes ? "sweep over these station counts" : "number of stations");
  cmd->add_option("--denoise-steps", o.denoise_steps,
                  list_axes ? "sweep over these denoising step counts" : "reverse diffusion steps");
  cmd->add_option("--interactions", o.interactions, "training interactions per seed");
}

// File values first, then flags.
harness::ExperimentConfig resolve(const CommonOptions& o, bool list_axes) {
  KeyValues kv = o.config.empty() ? KeyValues() : KeyValues::load(o.config);
  if (o.seed) kv.set("seeds", std::to_string(*o.seed));
  if (!o.seeds.empty()) kv.set("seeds", o.seeds);
  if (!o.out.empty()) kv.set("out_dir", o.out);
  if (!o.algo.empty()) kv.set("algorithm", o.algo);
  if (!list_axes && !o.stas.empty()) kv.set("sim.n_stas", o.stas);
  if (!list_axes && !o.denoise_steps.empty()) kv.set("agent.denoise_steps", o.denoise_steps);
  if (o.interactions) kv.set("interactions", *o.interactions);
  harness::ExperimentConfig config = harness::ExperimentConfig::from_kv(kv);
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  CLI::App app{"Diffusion-actor control of Wi-Fi contention windows and aggregation"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, sweep_opts, validate_opts;
  std::string checkpoints;

  auto* train = app.add_subcommand("train", "train agents (or run BEB-static) and write training_log.csv");
  add_common(train, train_opts, false);
  auto* eval = app.add_subcommand("eval", "explore-off evaluation; writes eval_summary.csv");
  add_common(eval, eval_opts, false);
  eval->add_option("--checkpoints", checkpoints, "directory holding seed_<s>/ (default: <out>/checkpoints)");
  auto* sweep = app.add_subcommand("sweep", "train + evaluate per value of --stas or --denoise-steps");
  add_common(sweep, sweep_opts, true);
  auto* validate = app.add_subcommand("validate", "compare simulated collision probability with Bianchi");
  add_common(validate, validate_opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      const auto config = resolve(train_opts, false);
      harness::cmd_train(config);
      fmt::print("wrote {}\n", (config.out_dir / "training_log.csv").string());
    } else if (*eval) {
      const auto config = resolve(eval_opts, false);
      const auto root = checkpoints.empty() ? config.out_dir / "checkpoints" : std::filesystem::path(checkpoints);
      const auto results = harness::cmd_eval(config, root);
      for (const auto& r : results) {
        fmt::print("seed {}: {:.1f} Mbps, {:.3f} ms access delay\n", r.seed, r.throughput_mbps, r.access_delay_ms);
      }
    } else if (*sweep) {
      const auto config = resolve(sweep_opts, true);
      if (sweep_opts.stas.empty() == sweep_opts.denoise_steps.empty()) {
        throw ConfigError("sweep needs exactly one of --stas or --denoise-steps");
      }
      const bool stas = !sweep_opts.stas.empty();
      harness::cmd_sweep(config, stas ? harness::SweepAxis::Stas : harness::SweepAxis::DenoiseSteps,
                         harness::parse_int_list(stas ? sweep_opts.stas : sweep_opts.denoise_steps));
      fmt::print("wrote {}\n", (config.out_dir / "sweep.csv").string());
    } else if (*validate) {
      const auto config = resolve(validate_opts, false);
      std::vector<harness::ValidateRow> rows;
      const bool ok = harness::cmd_validate(config, &rows);
      for (const auto& r : rows) {
        fmt::print("n={:<3} sim p={:.5f} oracle p={:.5f} rel.err={:.4f}\n", r.n, r.sim_p, r.oracle_p, r.rel_error);
      }
      if (!ok) {
        fmt::print(stderr, "validation failed: relative error above {}\n", config.validate_tolerance);
        return 3;
      }
    }
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric failure: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
