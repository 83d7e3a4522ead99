#include "d3pg/macsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <fmt/core.h>

#include "d3pg/errors.hpp"

namespace d3pg::mac {

namespace {

std::int64_t to_ns(double us) { return std::llround(us * 1000.0); }

bool is_control_cw(int cw) {
  return std::find(std::begin(kControlCws), std::end(kControlCws), cw) != std::end(kControlCws);
}

}  // namespace

void SimConfig::validate() const {
  if (n_stas < 0) throw ConfigError("n_stas must be non-negative");
  if (!(slot_us > 0 && sifs_us > 0 && difs_us > 0 && ack_us > 0 && preamble_us > 0 &&
        ack_timeout_us > 0)) {
    throw ConfigError("all MAC timing constants must be positive");
  }
  if (!(phy_rate_mbps > 0)) throw ConfigError("phy_rate_mbps must be positive");
  if (payload_bytes < 1 || mpdu_overhead_bytes < 0) throw ConfigError("bad MPDU size");
  if (cw_min < 1 || cw_min > cw_max) throw ConfigError("need 1 <= cw_min <= cw_max");
  if (max_agg < 1) throw ConfigError("max_agg must be >= 1");
  if (beb_agg < 1 || beb_agg > max_agg) throw ConfigError("beb_agg must lie in [1, max_agg]");
  if (!(per_mpdu_error_prob >= 0.0 && per_mpdu_error_prob < 1.0)) {
    throw ConfigError("per_mpdu_error_prob must lie in [0, 1)");
  }
}

int SimConfig::max_backoff_stage() const {
  int m = 0;
  for (long w = cw_min + 1L; w - 1 < cw_max; w *= 2) ++m;
  return m;
}

double ppdu_duration_us(int agg_len, const SimConfig& config) {
  if (agg_len < 1 || agg_len > config.max_agg) {
    throw RangeError(fmt::format("aggregation length {} outside [1, {}]", agg_len, config.max_agg));
  }
  const double bits_per_mpdu = 8.0 * (config.payload_bytes + config.mpdu_overhead_bytes);
  return config.preamble_us + agg_len * bits_per_mpdu / config.phy_rate_mbps;
}

const char* outcome_name(OutcomeKind kind) {
  switch (kind) {
    case OutcomeKind::Idle:
      return "idle";
    case OutcomeKind::Success:
      return "success";
    case OutcomeKind::Collision:
      return "collision";
    case OutcomeKind::ErrorLoss:
      return "error_loss";
  }
  return "?";
}

Simulator::Simulator(const SimConfig& config) : Simulator(config, config.seed) {}

Simulator::Simulator(const SimConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {
  config_.validate();
  config_.seed = seed;
  slot_ns_ = to_ns(config_.slot_us);
  stations_.resize(static_cast<std::size_t>(config_.n_stas));
  for (StationState& s : stations_) {
    s.current_cw = config_.cw_min;
    s.backoff_counter = draw_backoff(s.current_cw);
  }
}

int Simulator::draw_backoff(int cw) { return std::uniform_int_distribution<int>(0, cw)(rng_); }

int Simulator::agg_len_of(const StationState& s) const {
  return s.mode == StationMode::Controlled ? s.assigned_agg : config_.beb_agg;
}

void Simulator::apply_control(const MacControl& control) {
  const auto n = stations_.size();
  if (control.cw.size() != n || control.agg_len.size() != n) {
    throw ShapeError(fmt::format("control has {}/{} entries for {} stations", control.cw.size(),
                                 control.agg_len.size(), n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_control_cw(control.cw[i])) {
      throw RangeError(fmt::format("station {}: CW {} is not one of 15..1023 (2^k - 1)", i, control.cw[i]));
    }
    if (control.agg_len[i] < 1 || control.agg_len[i] > config_.max_agg) {
      throw RangeError(fmt::format("station {}: aggregation length {} outside [1, {}]", i,
                                   control.agg_len[i], config_.max_agg));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    StationState& s = stations_[i];
    s.mode = StationMode::Controlled;
    s.assigned_cw = control.cw[i];
    s.assigned_agg = control.agg_len[i];
    s.current_cw = s.assigned_cw;
    s.beb_stage = 0;
    s.backoff_counter = draw_backoff(s.current_cw);
  }
  // Counters were redrawn mid-slot: count down from the next slot boundary.
  if (!busy_ && anchor_ns_ < now_ns_) {
    anchor_ns_ += (now_ns_ - anchor_ns_ + slot_ns_ - 1) / slot_ns_ * slot_ns_;
  }
}

void Simulator::use_beb() {
  for (StationState& s : stations_) {
    s.mode = StationMode::Beb;
    s.beb_stage = 0;
    s.current_cw = config_.cw_min;
    s.backoff_counter = draw_backoff(s.current_cw);
  }
  if (!busy_ && anchor_ns_ < now_ns_) {
    anchor_ns_ += (now_ns_ - anchor_ns_ + slot_ns_ - 1) / slot_ns_ * slot_ns_;
  }
}

void Simulator::set_trace(std::ostream* trace) { trace_ = trace; }

void Simulator::trace_row(const SlotOutcome& outcome) {
  if (!trace_) return;
  std::string stas;
  for (std::size_t i = 0; i < outcome.stas.size(); ++i) {
    if (i) stas += ';';
    stas += std::to_string(outcome.stas[i]);
  }
  *trace_ << slot_index_ << ',' << outcome_name(outcome.kind) << ',' << stas << ','
          << outcome.agg_len << '\n';
}

void Simulator::start_busy(const std::vector<int>& senders) {
  Busy b;
  b.outcome.stas = senders;
  int longest = 0;
  for (int i : senders) longest = std::max(longest, agg_len_of(stations_[static_cast<std::size_t>(i)]));
  b.outcome.agg_len = longest;
  const std::int64_t ppdu_ns = to_ns(ppdu_duration_us(longest, config_));
  if (senders.size() >= 2) {
    b.outcome.kind = OutcomeKind::Collision;
    b.end_ns = now_ns_ + ppdu_ns + to_ns(config_.ack_timeout_us) + to_ns(config_.difs_us);
  } else {
    std::binomial_distribution<int> mpdu_ok(longest, 1.0 - config_.per_mpdu_error_prob);
    b.outcome.delivered = mpdu_ok(rng_);
    if (b.outcome.delivered > 0) {
      b.outcome.kind = OutcomeKind::Success;
      b.end_ns = now_ns_ + ppdu_ns + to_ns(config_.sifs_us) + to_ns(config_.ack_us) +
                 to_ns(config_.difs_us);
    } else {
      b.outcome.kind = OutcomeKind::ErrorLoss;
      b.end_ns = now_ns_ + ppdu_ns + to_ns(config_.ack_timeout_us) + to_ns(config_.difs_us);
    }
  }
  trace_row(b.outcome);
  ++slot_index_;
  busy_ = std::move(b);
}

void Simulator::finish_busy(PeriodMetrics& m) {
  const SlotOutcome& out = busy_->outcome;
  const bool acked = out.kind == OutcomeKind::Success;
  switch (out.kind) {
    case OutcomeKind::Success:
      ++m.success_count;
      m.delivered_mpdus += out.delivered;
      break;
    case OutcomeKind::Collision:
      ++m.collision_count;
      m.collided_attempts += static_cast<std::int64_t>(out.stas.size());
      break;
    case OutcomeKind::ErrorLoss:
      ++m.error_loss_count;
      break;
    case OutcomeKind::Idle:
      break;
  }
  m.attempts += static_cast<std::int64_t>(out.stas.size());

  std::vector<char> sent(stations_.size(), 0);
  for (int i : out.stas) {
    const auto idx = static_cast<std::size_t>(i);
    sent[idx] = 1;
    StationState& s = stations_[idx];
    ++s.tx_count;
    ++m.tx_count[idx];
    if (acked) {
      ++s.ack_count;
      ++m.ack_count[idx];
      m.access_delay_sum_ms += static_cast<double>(busy_->end_ns - s.hol_enqueue_ns) / 1e6;
      s.hol_enqueue_ns = busy_->end_ns;
    }
    if (s.mode == StationMode::Beb) {
      s.beb_stage = acked ? 0 : std::min(s.beb_stage + 1, config_.max_backoff_stage());
      s.current_cw = std::min(((config_.cw_min + 1) << s.beb_stage) - 1, config_.cw_max);
    } else {
      s.current_cw = s.assigned_cw;
    }
    s.backoff_counter = draw_backoff(s.current_cw);
  }
  // Deferring stations resume with one backoff slot elapsed at the end of DIFS.
  for (std::size_t i = 0; i < stations_.size(); ++i) {
    if (!sent[i] && stations_[i].backoff_counter > 0) --stations_[i].backoff_counter;
  }
  busy_.reset();
}

PeriodMetrics Simulator::run_for(double duration_us) {
  if (!(duration_us > 0.0)) throw RangeError("run_for: duration must be positive");
  const std::int64_t start = now_ns_;
  const std::int64_t end = now_ns_ + to_ns(duration_us);
  PeriodMetrics m;
  m.tx_count.assign(stations_.size(), 0);
  m.ack_count.assign(stations_.size(), 0);
  std::int64_t idle_ns = 0;
  std::int64_t busy_ns = 0;
  std::vector<int> senders;

  while (now_ns_ < end) {
    if (busy_) {
      if (busy_->end_ns <= end) {
        busy_ns += busy_->end_ns - now_ns_;
        now_ns_ = busy_->end_ns;
        finish_busy(m);
        anchor_ns_ = now_ns_;
      } else {
        busy_ns += end - now_ns_;
        now_ns_ = end;
      }
      continue;
    }

    int min_counter = std::numeric_limits<int>::max();
    for (const StationState& s : stations_) min_counter = std::min(min_counter, s.backoff_counter);
    if (stations_.empty()) {
      const std::int64_t slots = (end - anchor_ns_) / slot_ns_;
      if (slots > 0) {
        m.idle_slots += slots;
        slot_index_ += slots;
        anchor_ns_ += slots * slot_ns_;
      }
      idle_ns += end - now_ns_;
      now_ns_ = end;
      break;
    }

    const std::int64_t target = anchor_ns_ + static_cast<std::int64_t>(min_counter) * slot_ns_;
    if (target > end) {
      // The period closes inside an idle run: count down the completed slots.
      const std::int64_t done = std::max<std::int64_t>(0, (end - anchor_ns_) / slot_ns_);
      for (StationState& s : stations_) s.backoff_counter -= static_cast<int>(done);
      if (trace_) {
        for (std::int64_t k = 0; k < done; ++k, ++slot_index_) trace_row(SlotOutcome{});
      } else {
        slot_index_ += done;
      }
      m.idle_slots += done;
      anchor_ns_ += done * slot_ns_;
      idle_ns += end - now_ns_;
      now_ns_ = end;
      break;
    }
    idle_ns += target - now_ns_;
    now_ns_ = target;
    for (StationState& s : stations_) s.backoff_counter -= min_counter;
    if (trace_) {
      for (int k = 0; k < min_counter; ++k, ++slot_index_) trace_row(SlotOutcome{});
    } else {
      slot_index_ += min_counter;
    }
    m.idle_slots += min_counter;
    anchor_ns_ = target;

    senders.clear();
    for (std::size_t i = 0; i < stations_.size(); ++i) {
      if (stations_[i].backoff_counter == 0) senders.push_back(static_cast<int>(i));
    }
    start_busy(senders);
  }

  m.duration_us = static_cast<double>(end - start) / 1000.0;
  m.idle_us = static_cast<double>(idle_ns) / 1000.0;
  m.busy_us = static_cast<double>(busy_ns) / 1000.0;
  const double bits = static_cast<double>(m.delivered_mpdus) * 8.0 * config_.payload_bytes;
  m.throughput_mbps = bits / m.duration_us;
  m.mean_access_delay_ms = m.success_count > 0 ? m.access_delay_sum_ms / static_cast<double>(m.success_count) : 0.0;
  return m;
}

std::string csv_header() {
  return "duration_us,idle_us,busy_us,throughput_mbps,mean_access_delay_ms,delivered_mpdus,"
         "success_count,collision_count,error_loss_count,attempts,collided_attempts,idle_slots";
}

std::string csv_row(const PeriodMetrics& m) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}", m.duration_us, m.idle_us, m.busy_us,
                     m.throughput_mbps, m.mean_access_delay_ms, m.delivered_mpdus, m.success_count,
                     m.collision_count, m.error_loss_count, m.attempts, m.collided_attempts,
                     m.idle_slots);
}

BianchiPoint bianchi_fixed_point(int n, int W, int m) {
  if (n < 1 || W < 1 || m < 0) throw ConfigError("bianchi_fixed_point: need n >= 1, W >= 1, m >= 0");
  // tau(p) in the form without the removable singularity at p = 1/2:
  // (1 - (2p)^m) / (1 - 2p) = sum_{k<m} (2p)^k.
  const auto tau_of = [&](double p) {
    double geometric = 0.0;
    double term = 1.0;
    for (int k = 0; k < m; ++k) {
      geometric += term;
      term *= 2.0 * p;
    }
    return 2.0 / ((W + 1.0) + p * W * geometric);
  };
  const auto p_of = [&](double tau) { return 1.0 - std::pow(1.0 - tau, n - 1); };

  BianchiPoint pt;
  double p = 0.0;
  double damping = 0.5;
  double last_residual = std::numeric_limits<double>::infinity();
  constexpr int kMaxIterations = 1'000'000;
  for (int it = 1; it <= kMaxIterations; ++it) {
    const double tau = tau_of(p);
    const double residual = p_of(tau) - p;
    if (std::abs(residual) < 1e-12) {
      pt.tau = tau;
      pt.p = p;
      pt.iterations = it;
      return pt;
    }
    if (std::abs(residual) > last_residual) damping *= 0.5;
    last_residual = std::abs(residual);
    p += damping * residual;
  }
  throw NumericError(fmt::format("bianchi_fixed_point did not converge for n={}, W={}, m={}", n, W, m));
}

}  // namespace d3pg::mac
