#pragma once

// Experiment configuration and the train / eval / sweep / validate runners
// behind the command-line tool. Every runner writes its resolved config next
// to its CSV output so a run can be repeated from the output directory alone.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "d3pg/agent.hpp"
#include "d3pg/env.hpp"
#include "d3pg/kvfile.hpp"
#include "d3pg/macsim.hpp"

namespace d3pg::harness {

inline constexpr int kSchemaVersion = 1;

enum class Method { D3pg, Ddpg, BebStatic };

std::string method_name(Method m);
/// "d3pg", "ddpg" or "beb"; ConfigError otherwise.
Method parse_method(const std::string& text);

struct ExperimentConfig {
  Method method = Method::D3pg;
  mac::SimConfig sim;
  rl::AgentConfig agent;  // state/action dims are filled from sim.n_stas
  env::RewardParams reward;
  double period_us = env::kDefaultPeriodUs;
  int interactions = 2000;
  int checkpoint_every = 500;  // 0 disables periodic checkpoints
  int eval_episodes = 1;
  double eval_seconds = 20.0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<int> validate_stas{1, 5, 10, 20};
  std::int64_t validate_slots = 1'000'000;
  double validate_tolerance = 0.05;
  std::filesystem::path out_dir = "out";

  /// Throws ConfigError on the first violated invariant.
  void validate() const;
  /// Agent config with dims derived from the scenario.
  rl::AgentConfig resolved_agent() const;

  KeyValues to_kv() const;
  /// Starts from defaults and applies every key in `kv`; unknown keys and a
  /// schema_version other than kSchemaVersion are ConfigErrors.
  static ExperimentConfig from_kv(const KeyValues& kv);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Independent 64-bit seed for (run seed, stream) pairs, via std::seed_seq.
std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream);

enum Stream : std::uint32_t {
  kTrainEnv = 1,
  kAgentInit = 2,
  kTrainLoop = 3,
  kEvalPolicy = 4,
  kValidate = 5,
  kEvalEnv = 100,  // + episode index
};

struct TrainLogRow {
  std::uint64_t seed = 0;
  int step = 0;
  double reward = 0.0;
  double throughput_mbps = 0.0;
  double access_delay_ms = 0.0;
  double itp = 0.0;
  bool trained = false;
  double critic_loss = 0.0;
  double actor_objective = 0.0;
  double sigma = 0.0;
};

std::string train_log_header();
std::string train_log_row(const TrainLogRow& row);

struct EvalResult {
  std::uint64_t seed = 0;
  double throughput_mbps = 0.0;
  double access_delay_ms = 0.0;
  double reward = 0.0;
};

/// Interaction loop for one seed. Returns the trained agent (nullopt for
/// BEB-static); rows are appended to `log` when given. Checkpoints go to
/// `checkpoint_dir` when it is non-empty.
std::optional<rl::Agent> train_one(const ExperimentConfig& config, std::uint64_t seed,
                                   std::vector<TrainLogRow>* log,
                                   const std::filesystem::path& checkpoint_dir = {});

/// Explore-off episodes of eval_seconds each; `agent` may be null for BEB-static.
EvalResult evaluate_one(const ExperimentConfig& config, std::uint64_t seed, const rl::Agent* agent);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single value
};
Summary summarize(const std::vector<double>& values);

// Command runners. Each creates config.out_dir and writes <command>_config.txt there.

/// training_log.csv and checkpoints/seed_<s>/ (no checkpoints for BEB-static).
void cmd_train(const ExperimentConfig& config);

/// eval_summary.csv; agents are loaded from `checkpoint_root`/seed_<s>.
std::vector<EvalResult> cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint_root);

enum class SweepAxis { Stas, DenoiseSteps };

struct SweepRow {
  int value = 0;
  EvalResult result;
};

/// Train + evaluate per (value, seed); sweep.csv with per-seed and aggregate rows.
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<int>& values);

struct ValidateRow {
  int n = 0;
  double sim_p = 0.0;
  double oracle_p = 0.0;
  double rel_error = 0.0;
  double sim_tau = 0.0;
  double oracle_tau = 0.0;
  std::int64_t slots = 0;
};

/// Collision probability of the BEB simulator (L = 1, no channel errors)
/// against the Bianchi fixed point for each n in validate_stas.
ValidateRow validate_point(const ExperimentConfig& config, int n);
/// validate.csv; returns false when any relative error exceeds the tolerance.
bool cmd_validate(const ExperimentConfig& config, std::vector<ValidateRow>* rows = nullptr);

/// Keeps glibc from returning the large network buffers to the kernel after
/// every training step (page-fault churn otherwise dominates run time).
/// No-op on other C libraries. Call once from main().
void tune_allocator();

/// Comma-separated list parsing shared with the CLI.
std::vector<int> parse_int_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace d3pg::harness
