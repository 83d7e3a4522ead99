#include "d3pg/env.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "d3pg/errors.hpp"

namespace d3pg::env {

Vector StateVector::to_vector() const {
  Vector v(dim());
  v(0) = itp;
  for (std::size_t i = 0; i < plr.size(); ++i) v(static_cast<Eigen::Index>(i) + 1) = plr[i];
  return v;
}

StateVector build_state(const mac::PeriodMetrics& metrics) {
  if (!(metrics.duration_us > 0.0)) throw InputError("build_state: period duration must be positive");
  StateVector s;
  s.itp = std::clamp(metrics.idle_us / metrics.duration_us, 0.0, 1.0);
  s.plr.resize(metrics.tx_count.size(), 0.0);
  for (std::size_t i = 0; i < metrics.tx_count.size(); ++i) {
    const auto tx = metrics.tx_count[i];
    if (tx > 0) {
      s.plr[i] = 1.0 - static_cast<double>(metrics.ack_count[i]) / static_cast<double>(tx);
    }
  }
  return s;
}

mac::MacControl map_action(const Vector& action, int n_stas) {
  if (action.size() != 2 * n_stas) {
    throw ShapeError(fmt::format("map_action: expected {} entries, got {}", 2 * n_stas, action.size()));
  }
  mac::MacControl c;
  c.cw.resize(static_cast<std::size_t>(n_stas));
  c.agg_len.resize(static_cast<std::size_t>(n_stas));
  for (int i = 0; i < n_stas; ++i) {
    const double u = std::clamp(action(i), 0.0, 1.0);
    const double v = std::clamp(action(n_stas + i), 0.0, 1.0);
    const int k = static_cast<int>(std::lround(u * 6.0));
    c.cw[static_cast<std::size_t>(i)] = (1 << (k + 4)) - 1;
    c.agg_len[static_cast<std::size_t>(i)] = 1 + static_cast<int>(std::lround(v * 255.0));
  }
  return c;
}

double reward(double throughput_mbps, const RewardParams& params) {
  if (!(throughput_mbps >= 0.0)) throw InputError("reward: throughput must be non-negative");
  if (!(params.lambda_mbps > 0.0)) throw ConfigError("reward: lambda must be positive");
  // 2 * (sigmoid(x) - 1/2) == tanh(x / 2), which stays accurate for small x.
  return std::tanh(0.5 * throughput_mbps / params.lambda_mbps);
}

StepResult env_step(mac::Simulator& sim, const Vector& action, double dt_us, const RewardParams& params) {
  sim.apply_control(map_action(action, sim.config().n_stas));
  StepResult out;
  out.metrics = sim.run_for(dt_us);
  out.next_state = build_state(out.metrics);
  out.reward = reward(out.metrics.throughput_mbps, params);
  return out;
}

WifiEnv::WifiEnv(const mac::SimConfig& config, std::uint64_t seed, double period_us, RewardParams reward)
    : sim_(config, seed), period_us_(period_us), reward_(reward) {
  if (!(period_us > 0.0)) throw ConfigError("interaction period must be positive");
  initial_ = build_state(sim_.run_for(period_us_));
}

StepResult WifiEnv::step(const Vector& action) { return env_step(sim_, action, period_us_, reward_); }

StepResult WifiEnv::step_beb() {
  StepResult out;
  out.metrics = sim_.run_for(period_us_);
  out.next_state = build_state(out.metrics);
  out.reward = reward(out.metrics.throughput_mbps, reward_);
  return out;
}

}  // namespace d3pg::env
