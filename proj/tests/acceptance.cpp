// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Criteria can be selected by number: `acceptance 1 4 9`.
//
// Criteria 6-8 share their training runs; all of them use the default
// experiment configuration and seeds 1..5.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/core.h>

#include "d3pg/agent.hpp"
#include "d3pg/diffusion.hpp"
#include "d3pg/env.hpp"
#include "d3pg/harness.hpp"
#include "d3pg/macsim.hpp"
#include "support/bandit.hpp"
#include "support/oracles.hpp"

using namespace d3pg;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Verdict diffusion_math() {
  using namespace diffusion;
  Verdict v;
  const Vector x{{0.3, -1.2, 4.0}};
  const Vector eps{{1.5, 0.25, -0.75}};
  v.require(forward_step(x, 0.0, eps) == x, "beta=0 step");
  v.require(forward_step(x, 1.0, eps) == eps, "beta=1 step");
  v.require(forward_sample(x, 2, Schedule::from_betas({0.0, 0.0}), eps) == x, "alpha_bar=1 marginal");
  v.require(forward_sample(x, 1, Schedule::from_betas({1.0}), eps) == eps, "alpha_bar=0 marginal");

  // Closed-form marginal vs iterated single steps: first two moments.
  const Schedule s = vp_schedule(5);
  const int n = 100000;
  Rng rng(2024);
  std::normal_distribution<double> normal;
  double worst_z = 0.0;
  for (int t : {1, 3, 5}) {
    double sum_a = 0, sq_a = 0, sum_b = 0, sq_b = 0;
    for (int i = 0; i < n; ++i) {
      Vector xi = Vector::Constant(1, 0.8);
      for (int k = 1; k <= t; ++k) xi = forward_step(xi, s.beta(k), Vector::Constant(1, normal(rng)));
      const double b = forward_sample(Vector::Constant(1, 0.8), t, s, Vector::Constant(1, normal(rng)))(0);
      sum_a += xi(0);
      sq_a += xi(0) * xi(0);
      sum_b += b;
      sq_b += b * b;
    }
    const double ma = sum_a / n, mb = sum_b / n;
    const double va = (sq_a - n * ma * ma) / (n - 1), vb = (sq_b - n * mb * mb) / (n - 1);
    const double se_mean = std::sqrt(va / n + vb / n);
    const double se_var = std::sqrt(2.0 / (n - 1)) * std::sqrt(va * va + vb * vb);
    worst_z = std::max({worst_z, std::abs(ma - mb) / se_mean, std::abs(va - vb) / se_var});
  }
  v.require(worst_z < 3.0, fmt::format("moment gap {:.2f} SE", worst_z));
  v.note(fmt::format("worst moment gap {:.2f} SE", worst_z));

  // Exact noise predictor through the reverse chain.
  double worst_rec = 0.0;
  for (int T : {1, 5, 10}) {
    const Schedule sch = vp_schedule(T);
    Matrix x0(3, 4);
    x0 << 0.0, 0.25, 0.5, 1.0, 0.9, 0.1, 0.33, 0.66, 0.5, 0.5, 0.01, 0.99;
    const auto exact = [&](const Matrix& xt, int t) -> Matrix {
      return (xt - std::sqrt(sch.alpha_bar(t)) * x0) / std::sqrt(1.0 - sch.alpha_bar(t));
    };
    Rng r(static_cast<std::uint64_t>(T));
    Matrix xT(3, 4);
    for (Eigen::Index i = 0; i < xT.size(); ++i) xT(i) = normal(r);
    for (SampleMode mode : {SampleMode::Deterministic, SampleMode::Stochastic}) {
      const Matrix out = reverse_chain(xT, sch, exact, mode, &r);
      worst_rec = std::max(worst_rec, (out - x0).cwiseAbs().maxCoeff());
    }
  }
  v.require(worst_rec < 1e-8, fmt::format("reconstruction error {:.2e}", worst_rec));
  v.note(fmt::format("reconstruction error {:.1e}", worst_rec));
  return v;
}

// ---------------------------------------------------------------- 2

Verdict gradients() {
  Verdict v;
  double worst_mlp = 0.0;
  for (nn::Activation act : {nn::Activation::Relu, nn::Activation::Identity}) {
    Rng rng(7);
    const int sizes[] = {3, 5, 4, 2};
    const nn::MlpParams p = nn::mlp_init(sizes, rng, act);
    const Matrix xin = Matrix::Random(3, 6), g = Matrix::Random(2, 6);
    nn::ForwardCache cache;
    nn::mlp_forward(p, xin, &cache);
    const auto grad = nn::mlp_backward(p, cache, g).param_grads.flatten();
    const auto fd = oracle::finite_difference(
        p, [&](const nn::MlpParams& q) { return nn::mlp_forward(q, xin).cwiseProduct(g).sum(); });
    worst_mlp = std::max(worst_mlp, oracle::max_relative_error(grad, fd));
  }
  v.require(worst_mlp < 1e-4, fmt::format("MLP rel. error {:.2e}", worst_mlp));

  // Actor objective through the full chain, both actors, tiny nets.
  double worst_actor = 0.0;
  for (rl::Algorithm alg : {rl::Algorithm::D3pg, rl::Algorithm::Ddpg}) {
    rl::AgentConfig c;
    c.state_dim = 3;
    c.action_dim = 2;
    c.hidden = {8, 8};
    c.denoise_steps = 3;
    rl::Agent agent(alg, c, 11);
    Rng rng(12);
    Matrix states(3, 4);
    std::uniform_real_distribution<double> u;
    for (Eigen::Index i = 0; i < states.size(); ++i) states(i) = u(rng);
    const Matrix noise = agent.actor().draw_input_noise(4, rng);
    const auto obj = agent.actor_objective_and_grad(agent.actor().online(), states, noise);
    const auto fd = oracle::finite_difference(agent.actor().online(), [&](const nn::MlpParams& p) {
      const auto o = agent.actor_objective_and_grad(p, states, noise);
      return o.mean_q - o.penalty;
    });
    worst_actor = std::max(worst_actor, oracle::max_relative_error(obj.grad.flatten(), fd, 1e-7));
  }
  v.require(worst_actor < 1e-3, fmt::format("actor chain rel. error {:.2e}", worst_actor));
  v.note(fmt::format("MLP {:.1e}, actor chain {:.1e}", worst_mlp, worst_actor));
  return v;
}

// ---------------------------------------------------------------- 3

Verdict bianchi() {
  Verdict v;
  harness::ExperimentConfig c;
  c.seeds = {1};
  c.validate_slots = 1'000'000;
  for (int n : {5, 10, 20}) {
    const harness::ValidateRow row = harness::validate_point(c, n);
    v.require(row.slots >= 1'000'000, fmt::format("n={} only {} slots", n, row.slots));
    v.require(row.rel_error <= 0.05, fmt::format("n={} rel. error {:.4f}", n, row.rel_error));
    v.note(fmt::format("n={} p={:.4f}/{:.4f} ({:.2f}%)", n, row.sim_p, row.oracle_p, 100 * row.rel_error));
  }
  return v;
}

// ---------------------------------------------------------------- 4

Verdict reward_state_mapping() {
  Verdict v;
  const env::RewardParams rp;  // lambda = 450
  v.require(env::reward(0.0, rp) == 0.0, "r(0)");
  v.require(std::abs(env::reward(450.0, rp) - 0.462117157260010) < 1e-9, "r(450)");

  mac::PeriodMetrics m;
  m.duration_us = 50'000;
  m.idle_us = 12'345;
  m.busy_us = m.duration_us - m.idle_us;
  m.tx_count = {200, 7, 0};
  m.ack_count = {150, 7, 0};
  const env::StateVector s = env::build_state(m);
  v.require(std::abs(s.itp - 12'345.0 / 50'000.0) < 1e-9, "idle-time proportion");
  v.require(std::abs(s.plr[0] - 0.25) < 1e-9 && s.plr[1] == 0.0 && s.plr[2] == 0.0, "loss rates");

  const mac::MacControl lo = env::map_action(Vector::Zero(2), 1);
  const mac::MacControl hi = env::map_action(Vector::Ones(2), 1);
  v.require(lo.cw[0] == 15 && lo.agg_len[0] == 1, "u=0 bounds");
  v.require(hi.cw[0] == 1023 && hi.agg_len[0] == 256, "u=1 bounds");
  return v;
}

// ---------------------------------------------------------------- 5

Verdict bandit_sanity() {
  Verdict v;
  for (rl::Algorithm alg : {rl::Algorithm::D3pg, rl::Algorithm::Ddpg}) {
    const char* name = alg == rl::Algorithm::D3pg ? "d3pg" : "ddpg";
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed : {1, 2, 3}) {
      const bandit::Outcome o = bandit::run(alg, seed, 2000);
      v.require(o.worst_deviation <= 0.05, fmt::format("{} seed {} off by {:.4f}", name, seed, o.worst_deviation));
      v.note(fmt::format("{} s{} {:.4f}", name, seed, o.worst_deviation));
    }
    const double secs = seconds_since(t0);
    v.require(secs < 120.0, fmt::format("{} took {:.0f} s", name, secs));
  }
  return v;
}

// ------------------------------------------------------------- 6, 7, 8

// Evaluation throughput per (method, stations, denoise steps, seed), filled lazily.
class Runs {
 public:
  double throughput(harness::Method m, int stas, int steps, std::uint64_t seed) {
    const auto key = std::make_tuple(static_cast<int>(m), stas, steps, seed);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    harness::ExperimentConfig c;
    c.method = m;
    c.sim.n_stas = stas;
    c.agent.denoise_steps = steps;
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const auto agent = harness::train_one(c, seed, nullptr);
    const double thr = harness::evaluate_one(c, seed, agent ? &*agent : nullptr).throughput_mbps;
    fmt::print("  {:<4} N={:<2} T={} seed {}: {:7.1f} Mbps ({:.0f} s)\n", harness::method_name(m), stas, steps, seed,
               thr, seconds_since(t0));
    std::fflush(stdout);
    return cache_[key] = thr;
  }

  double mean(harness::Method m, int stas, int steps) {
    double sum = 0.0;
    for (std::uint64_t seed : kSeeds) sum += throughput(m, stas, steps, seed);
    return sum / static_cast<double>(std::size(kSeeds));
  }

  static constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

 private:
  std::map<std::tuple<int, int, int, std::uint64_t>, double> cache_;
};

constexpr int kDefaultSteps = 5;

Verdict improvement(Runs& runs) {
  using harness::Method;
  Verdict v;
  int wins = 0;
  for (std::uint64_t seed : Runs::kSeeds) {
    const double d3 = runs.throughput(Method::D3pg, 32, kDefaultSteps, seed);
    const double dd = runs.throughput(Method::Ddpg, 32, kDefaultSteps, seed);
    const double beb = runs.throughput(Method::BebStatic, 32, kDefaultSteps, seed);
    const bool ok = d3 >= 1.2 * beb && d3 >= dd;
    wins += ok ? 1 : 0;
    v.note(fmt::format("s{} {:.0f}/{:.0f}/{:.0f}{}", seed, d3, dd, beb, ok ? "" : "*"));
  }
  v.require(wins >= 4, fmt::format("only {} of 5 seeds", wins));
  v.detail = fmt::format("d3pg/ddpg/beb: {} -> {} of 5", v.detail, wins);
  return v;
}

Verdict saturation_shape(Runs& runs) {
  using harness::Method;
  Verdict v;
  const int stas[] = {8, 16, 32, 64};
  std::vector<double> beb, d3;
  for (int n : stas) beb.push_back(runs.mean(Method::BebStatic, n, kDefaultSteps));
  for (int n : stas) d3.push_back(runs.mean(Method::D3pg, n, kDefaultSteps));

  // Peak strictly before the largest network, non-increasing from there on.
  const auto peak = static_cast<std::size_t>(std::max_element(beb.begin(), beb.end()) - beb.begin());
  bool declines = peak + 1 < beb.size();
  for (std::size_t i = peak + 1; i < beb.size(); ++i) declines = declines && beb[i] <= beb[i - 1];
  v.require(declines, "BEB does not peak then decline");
  const double d3_peak = *std::max_element(d3.begin(), d3.end());
  v.require(d3.back() >= 0.9 * d3_peak, fmt::format("D3PG at 64 is {:.1f}% of peak", 100 * d3.back() / d3_peak));
  v.note(fmt::format("beb {:.0f}/{:.0f}/{:.0f}/{:.0f}, d3pg {:.0f}/{:.0f}/{:.0f}/{:.0f} ({:.1f}% of peak at 64)", beb[0],
                     beb[1], beb[2], beb[3], d3[0], d3[1], d3[2], d3[3], 100 * d3.back() / d3_peak));
  return v;
}

Verdict denoise_steps(Runs& runs) {
  Verdict v;
  const double t5 = runs.mean(harness::Method::D3pg, 16, 5);
  const double t1 = runs.mean(harness::Method::D3pg, 16, 1);
  v.require(t5 >= t1, "T=5 below T=1");
  v.note(fmt::format("T=5 {:.1f} vs T=1 {:.1f} Mbps", t5, t1));
  return v;
}

// ---------------------------------------------------------------- 9

// Every regular file under `root`, relative path -> bytes. Config snapshots
// are included: they record the resolved configuration, output dir aside.
std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = bytes.str();
  }
  return out;
}

Verdict determinism() {
  Verdict v;
  const fs::path base = fs::temp_directory_path() / fmt::format("d3pg_acceptance_{}", ::getpid());
  fs::remove_all(base);

  const auto run_all = [&](const fs::path& dir) {
    harness::ExperimentConfig c;
    c.sim.n_stas = 4;
    c.interactions = 150;
    c.checkpoint_every = 50;
    c.eval_seconds = 1.0;
    c.seeds = {1, 2};
    c.validate_stas = {1, 5};
    c.validate_slots = 100'000;
    c.out_dir = dir;
    for (harness::Method m : {harness::Method::D3pg, harness::Method::Ddpg, harness::Method::BebStatic}) {
      c.method = m;
      c.out_dir = dir / harness::method_name(m);
      harness::cmd_train(c);
      harness::cmd_eval(c, c.out_dir / "checkpoints");
    }
    c.method = harness::Method::D3pg;
    c.out_dir = dir / "sweep_stas";
    harness::cmd_sweep(c, harness::SweepAxis::Stas, {2, 3});
    c.out_dir = dir / "sweep_steps";
    harness::cmd_sweep(c, harness::SweepAxis::DenoiseSteps, {1, 2});
    c.out_dir = dir / "validate";
    harness::cmd_validate(c);
  };
  run_all(base / "a");
  run_all(base / "b");

  const auto a = read_tree(base / "a"), b = read_tree(base / "b");
  int csvs = 0;
  for (const auto& [name, bytes] : a) {
    if (name.ends_with("_config.txt")) continue;  // contains out_dir
    csvs += name.ends_with(".csv") ? 1 : 0;
    const auto it = b.find(name);
    v.require(it != b.end() && it->second == bytes, name + " differs");
  }
  v.require(a.size() == b.size(), "different file sets");
  v.require(csvs >= 10, fmt::format("only {} CSV files compared", csvs));
  v.note(fmt::format("{} files ({} CSV) byte-identical", a.size(), csvs));
  fs::remove_all(base);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  Runs runs;
  const std::vector<std::tuple<int, const char*, double, std::function<Verdict()>>> criteria = {
      {1, "diffusion math", 10.0, diffusion_math},
      {2, "gradient checks", 30.0, gradients},
      {3, "Bianchi agreement", 120.0, bianchi},
      {4, "reward/state/mapping", 0.0, reward_state_mapping},
      {5, "bandit sanity", 0.0, bandit_sanity},
      {6, "N=32 improvement", 0.0, [&] { return improvement(runs); }},
      {7, "saturation shape", 0.0, [&] { return saturation_shape(runs); }},
      {8, "denoise steps", 0.0, [&] { return denoise_steps(runs); }},
      {9, "determinism", 0.0, determinism},
  };

  int failed = 0;
  for (const auto& [id, name, limit, check] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (limit > 0 && secs > limit) v.require(false, fmt::format("runtime {:.1f} s over {:.0f} s", secs, limit));
    failed += v.pass ? 0 : 1;
    fmt::print("[{}] criterion {}: {} ({:.1f} s) - {}\n", v.pass ? "PASS" : "FAIL", id, name, secs, v.detail);
    std::fflush(stdout);
  }
  fmt::print("{} criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
