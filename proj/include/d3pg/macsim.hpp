#pragma once

// Slotted single-BSS 802.11 DCF simulator with saturated stations,
// per-station contention windows, binary exponential backoff, A-MPDU
// aggregation and an i.i.d. per-MPDU error model. Also hosts the Bianchi
// saturation fixed point used to validate it.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "d3pg/numkernel.hpp"

namespace d3pg::mac {

struct SimConfig {
  int n_stas = 8;
  double slot_us = 9.0;
  double sifs_us = 16.0;
  double difs_us = 34.0;
  double ack_us = 28.0;
  double preamble_us = 40.0;
  /// Wait after a failed PPDU before DIFS starts (no ACK / BlockAck arrives).
  double ack_timeout_us = 44.0;
  double phy_rate_mbps = 1000.0;
  int payload_bytes = 1448;
  /// MAC header, FCS and delimiter bytes carried by every MPDU.
  int mpdu_overhead_bytes = 0;
  int cw_min = 15;
  int cw_max = 1023;
  int max_agg = 256;
  /// Aggregation length used by stations in BEB mode.
  int beb_agg = 43;
  double per_mpdu_error_prob = 0.1;
  std::uint64_t seed = 1;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  /// Number of doublings from cw_min until cw_max is reached.
  int max_backoff_stage() const;
};

/// Transmission time of an L-MPDU PPDU (preamble plus payload bits).
double ppdu_duration_us(int agg_len, const SimConfig& config);

/// Discrete contention windows 2^(k+4) - 1, k = 0..6.
inline constexpr int kControlCws[] = {15, 31, 63, 127, 255, 511, 1023};

struct MacControl {
  std::vector<int> cw;
  std::vector<int> agg_len;
};

enum class StationMode { Beb, Controlled };

struct StationState {
  StationMode mode = StationMode::Beb;
  int current_cw = 0;
  int backoff_counter = 0;
  int beb_stage = 0;
  int assigned_cw = 0;
  int assigned_agg = 0;
  std::int64_t tx_count = 0;   // cumulative PPDUs sent
  std::int64_t ack_count = 0;  // cumulative PPDUs acknowledged
  std::int64_t hol_enqueue_ns = 0;
};

struct PeriodMetrics {
  double duration_us = 0.0;
  double idle_us = 0.0;
  double busy_us = 0.0;
  double throughput_mbps = 0.0;
  /// Mean head-of-line-to-ACK delay over PPDUs acknowledged in the period (0 if none).
  double mean_access_delay_ms = 0.0;
  double access_delay_sum_ms = 0.0;
  std::vector<std::int64_t> tx_count;
  std::vector<std::int64_t> ack_count;
  std::int64_t delivered_mpdus = 0;
  std::int64_t success_count = 0;     // busy periods with one sender and >= 1 MPDU delivered
  std::int64_t collision_count = 0;   // busy periods with >= 2 senders
  std::int64_t error_loss_count = 0;  // one sender, every MPDU corrupted
  std::int64_t attempts = 0;          // station transmissions, summed over stations
  std::int64_t collided_attempts = 0;
  std::int64_t idle_slots = 0;

  std::int64_t transmission_events() const {
    return success_count + collision_count + error_loss_count;
  }
};

enum class OutcomeKind { Idle, Success, Collision, ErrorLoss };

struct SlotOutcome {
  OutcomeKind kind = OutcomeKind::Idle;
  std::vector<int> stas;
  int agg_len = 0;
  int delivered = 0;
};

const char* outcome_name(OutcomeKind kind);

class Simulator {
 public:
  /// All stations saturated, in BEB mode, with counters drawn in [0, cw_min].
  explicit Simulator(const SimConfig& config);
  Simulator(const SimConfig& config, std::uint64_t seed);

  /// Switches every station to a fixed contention window and aggregation
  /// length and redraws its backoff counter in [0, cw].
  void apply_control(const MacControl& control);

  /// Returns every station to BEB at stage 0 and redraws its counter.
  void use_beb();

  /// Advances simulated time by exactly `duration_us` (rounded to ns).
  PeriodMetrics run_for(double duration_us);

  /// Streams "slot,outcome,sta,agg_len" rows while running; nullptr disables.
  void set_trace(std::ostream* trace);

  const SimConfig& config() const { return config_; }
  const std::vector<StationState>& stations() const { return stations_; }
  std::int64_t now_ns() const { return now_ns_; }

 private:
  struct Busy {
    std::int64_t end_ns = 0;
    SlotOutcome outcome;
  };

  int draw_backoff(int cw);
  void start_busy(const std::vector<int>& senders);
  void finish_busy(PeriodMetrics& m);
  void trace_row(const SlotOutcome& outcome);
  int agg_len_of(const StationState& s) const;

  SimConfig config_;
  Rng rng_;
  std::vector<StationState> stations_;
  std::int64_t now_ns_ = 0;
  /// Slot boundary from which the backoff counters are counted down.
  std::int64_t anchor_ns_ = 0;
  std::optional<Busy> busy_;
  std::int64_t slot_ns_ = 0;
  std::int64_t slot_index_ = 0;
  std::ostream* trace_ = nullptr;
};

/// Serialized PeriodMetrics row; `csv_header()` names the columns.
std::string csv_header();
std::string csv_row(const PeriodMetrics& m);

struct BianchiPoint {
  double tau = 0.0;  // per-slot transmission probability
  double p = 0.0;    // conditional collision probability
  int iterations = 0;
};

/// Saturated-DCF fixed point for n stations, W backoff values at stage 0
/// (W = cw_min + 1) and m doubling stages.
BianchiPoint bianchi_fixed_point(int n, int W, int m);

}  // namespace d3pg::mac
