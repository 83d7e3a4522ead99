#pragma once

// MDP view of the simulator: observations, the raw-action to MAC-control
// mapping and the throughput reward.

#include "d3pg/macsim.hpp"
#include "d3pg/numkernel.hpp"

namespace d3pg::env {

/// Channel idle-time proportion followed by one packet-loss rate per station.
struct StateVector {
  double itp = 1.0;
  std::vector<double> plr;

  int dim() const { return 1 + static_cast<int>(plr.size()); }
  Vector to_vector() const;
};

struct RewardParams {
  double lambda_mbps = 450.0;
};

/// itp = idle/duration; plr_i = 1 - ack_i/tx_i (0 when the station did not transmit).
StateVector build_state(const mac::PeriodMetrics& metrics);

/// Raw action in [0,1]^{2N}: entries [0, N) pick CW = 2^(round(6u)+4) - 1,
/// entries [N, 2N) pick L = 1 + round(255 v).
mac::MacControl map_action(const Vector& action, int n_stas);

/// 2 * (sigmoid(throughput / lambda) - 0.5), in [0, 1).
double reward(double throughput_mbps, const RewardParams& params);

struct StepResult {
  mac::PeriodMetrics metrics;
  StateVector next_state;
  double reward = 0.0;
};

/// map_action -> apply_control -> run_for(dt) -> build_state + reward.
StepResult env_step(mac::Simulator& sim, const Vector& action, double dt_us, const RewardParams& params);

inline constexpr double kDefaultPeriodUs = 50'000.0;

/// Owns a simulator and exposes reset/step in MDP terms.
class WifiEnv {
 public:
  WifiEnv(const mac::SimConfig& config, std::uint64_t seed, double period_us = kDefaultPeriodUs,
          RewardParams reward = {});

  int n_stas() const { return sim_.config().n_stas; }
  int state_dim() const { return 1 + n_stas(); }
  int action_dim() const { return 2 * n_stas(); }

  /// Runs one period under BEB to produce the first observation.
  const StateVector& reset_observation() const { return initial_; }
  StepResult step(const Vector& action);
  /// One period under plain BEB with fixed aggregation (no agent control).
  StepResult step_beb();

  mac::Simulator& simulator() { return sim_; }

 private:
  mac::Simulator sim_;
  double period_us_;
  RewardParams reward_;
  StateVector initial_;
};

}  // namespace d3pg::env
