#include "d3pg/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <set>

#include <fmt/format.h>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "d3pg/errors.hpp"

namespace d3pg::harness {

namespace fs = std::filesystem;

std::string method_name(Method m) {
  switch (m) {
    case Method::D3pg: return "d3pg";
    case Method::Ddpg: return "ddpg";
    case Method::BebStatic: return "beb";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "d3pg") return Method::D3pg;
  if (text == "ddpg") return Method::Ddpg;
  if (text == "beb") return Method::BebStatic;
  throw ConfigError(fmt::format("unknown algorithm '{}' (expected d3pg, ddpg or beb)", text));
}

namespace {

rl::Algorithm to_algorithm(Method m) {
  if (m == Method::BebStatic) throw ConfigError("BEB-static has no learning agent");
  return m == Method::D3pg ? rl::Algorithm::D3pg : rl::Algorithm::Ddpg;
}

template <class T>
T parse_integer(const std::string& text, const std::string& what) {
  T out{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(fmt::format("{}: '{}' is not a valid integer", what, text));
  }
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = std::min(text.find(',', start), text.size());
    std::string item = text.substr(start, comma - start);
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(parse_integer<T>(item, what));
    start = comma + 1;
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& values) {
  return fmt::format("{}", fmt::join(values, ","));
}

// Text conversion for every config field type.
std::string to_text(double v) { return format_double(v); }
std::string to_text(int v) { return std::to_string(v); }
std::string to_text(std::int64_t v) { return std::to_string(v); }
std::string to_text(const std::vector<int>& v) { return join(v); }
std::string to_text(const std::vector<std::uint64_t>& v) { return join(v); }
std::string to_text(const fs::path& v) { return v.string(); }
std::string to_text(Method v) { return method_name(v); }

void from_text(const std::string& s, const std::string& key, double& v) {
  try {
    std::size_t used = 0;
    v = std::stod(s, &used);
    if (used == s.size()) return;
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("{}: '{}' is not a number", key, s));
}
void from_text(const std::string& s, const std::string& key, int& v) { v = parse_integer<int>(s, key); }
void from_text(const std::string& s, const std::string& key, std::int64_t& v) {
  v = parse_integer<std::int64_t>(s, key);
}
void from_text(const std::string& s, const std::string& key, std::vector<int>& v) { v = parse_list<int>(s, key); }
void from_text(const std::string& s, const std::string& key, std::vector<std::uint64_t>& v) {
  v = parse_list<std::uint64_t>(s, key);
}
void from_text(const std::string& s, const std::string&, fs::path& v) { v = s; }
void from_text(const std::string& s, const std::string&, Method& v) { v = parse_method(s); }

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class Ref>
Field bind(const char* key, Ref ref) {
  return Field{key, [ref](const ExperimentConfig& c) { return to_text(ref(c)); },
               [ref, key](ExperimentConfig& c, const std::string& s) { from_text(s, key, ref(c)); }};
}

// The order here is the order of written config files.
const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      bind("algorithm", [](auto& c) -> auto& { return c.method; }),
      bind("sim.n_stas", [](auto& c) -> auto& { return c.sim.n_stas; }),
      bind("sim.slot_us", [](auto& c) -> auto& { return c.sim.slot_us; }),
      bind("sim.sifs_us", [](auto& c) -> auto& { return c.sim.sifs_us; }),
      bind("sim.difs_us", [](auto& c) -> auto& { return c.sim.difs_us; }),
      bind("sim.ack_us", [](auto& c) -> auto& { return c.sim.ack_us; }),
      bind("sim.preamble_us", [](auto& c) -> auto& { return c.sim.preamble_us; }),
      bind("sim.ack_timeout_us", [](auto& c) -> auto& { return c.sim.ack_timeout_us; }),
      bind("sim.phy_rate_mbps", [](auto& c) -> auto& { return c.sim.phy_rate_mbps; }),
      bind("sim.payload_bytes", [](auto& c) -> auto& { return c.sim.payload_bytes; }),
      bind("sim.mpdu_overhead_bytes", [](auto& c) -> auto& { return c.sim.mpdu_overhead_bytes; }),
      bind("sim.cw_min", [](auto& c) -> auto& { return c.sim.cw_min; }),
      bind("sim.cw_max", [](auto& c) -> auto& { return c.sim.cw_max; }),
      bind("sim.max_agg", [](auto& c) -> auto& { return c.sim.max_agg; }),
      bind("sim.beb_agg", [](auto& c) -> auto& { return c.sim.beb_agg; }),
      bind("sim.per_mpdu_error_prob", [](auto& c) -> auto& { return c.sim.per_mpdu_error_prob; }),
      bind("agent.hidden", [](auto& c) -> auto& { return c.agent.hidden; }),
      bind("agent.actor_lr", [](auto& c) -> auto& { return c.agent.actor_lr; }),
      bind("agent.critic_lr", [](auto& c) -> auto& { return c.agent.critic_lr; }),
      bind("agent.tau", [](auto& c) -> auto& { return c.agent.tau; }),
      bind("agent.gamma", [](auto& c) -> auto& { return c.agent.gamma; }),
      bind("agent.batch_size", [](auto& c) -> auto& { return c.agent.batch_size; }),
      bind("agent.buffer_size", [](auto& c) -> auto& { return c.agent.buffer_size; }),
      bind("agent.denoise_steps", [](auto& c) -> auto& { return c.agent.denoise_steps; }),
      bind("agent.beta_min", [](auto& c) -> auto& { return c.agent.beta_min; }),
      bind("agent.beta_max", [](auto& c) -> auto& { return c.agent.beta_max; }),
      bind("agent.noise_sigma0", [](auto& c) -> auto& { return c.agent.noise_sigma0; }),
      bind("agent.noise_decay", [](auto& c) -> auto& { return c.agent.noise_decay; }),
      bind("agent.noise_sigma_min", [](auto& c) -> auto& { return c.agent.noise_sigma_min; }),
      bind("agent.box_penalty", [](auto& c) -> auto& { return c.agent.box_penalty; }),
      bind("reward.lambda_mbps", [](auto& c) -> auto& { return c.reward.lambda_mbps; }),
      bind("period_us", [](auto& c) -> auto& { return c.period_us; }),
      bind("interactions", [](auto& c) -> auto& { return c.interactions; }),
      bind("checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; }),
      bind("eval.episodes", [](auto& c) -> auto& { return c.eval_episodes; }),
      bind("eval.seconds", [](auto& c) -> auto& { return c.eval_seconds; }),
      bind("seeds", [](auto& c) -> auto& { return c.seeds; }),
      bind("validate.stas", [](auto& c) -> auto& { return c.validate_stas; }),
      bind("validate.slots", [](auto& c) -> auto& { return c.validate_slots; }),
      bind("validate.tolerance", [](auto& c) -> auto& { return c.validate_tolerance; }),
      bind("out_dir", [](auto& c) -> auto& { return c.out_dir; }),
  };
  return table;
}

// Each command keeps its own snapshot so an eval next to a training run does
// not overwrite the training config.
void prepare_out_dir(const ExperimentConfig& config, const std::string& command) {
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec || !fs::is_directory(config.out_dir)) {
    throw ConfigError(fmt::format("cannot create output directory {}: {}", config.out_dir.string(), ec.message()));
  }
  config.to_kv().save(config.out_dir / fmt::format("{}_config.txt", command));
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  return out;
}

std::string seed_dir_name(std::uint64_t seed) { return fmt::format("seed_{}", seed); }

int periods_for(double seconds, double period_us) {
  return std::max(1, static_cast<int>(std::lround(seconds * 1e6 / period_us)));
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  sim.validate();
  if (sim.n_stas < 1) throw ConfigError("sim.n_stas must be >= 1");
  resolved_agent().validate();
  if (!(reward.lambda_mbps > 0.0)) throw ConfigError("reward.lambda_mbps must be positive");
  if (!(period_us > 0.0)) throw ConfigError("period_us must be positive");
  if (interactions < 1) throw ConfigError("interactions must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (eval_episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (!(eval_seconds > 0.0)) throw ConfigError("eval.seconds must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (validate_stas.empty() || *std::min_element(validate_stas.begin(), validate_stas.end()) < 1) {
    throw ConfigError("validate.stas must be a non-empty list of counts >= 1");
  }
  if (validate_slots < 1) throw ConfigError("validate.slots must be >= 1");
  if (!(validate_tolerance > 0.0)) throw ConfigError("validate.tolerance must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

rl::AgentConfig ExperimentConfig::resolved_agent() const {
  rl::AgentConfig a = agent;
  a.state_dim = 1 + sim.n_stas;
  a.action_dim = 2 * sim.n_stas;
  return a;
}

KeyValues ExperimentConfig::to_kv() const {
  KeyValues kv;
  kv.set("schema_version", kSchemaVersion);
  for (const Field& f : fields()) kv.set(f.key, f.get(*this));
  return kv;
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValues& kv) {
  if (kv.contains("schema_version") && kv.get_int("schema_version") != kSchemaVersion) {
    throw ConfigError(fmt::format("unsupported schema_version {} (this build reads {})",
                                  kv.get("schema_version"), kSchemaVersion));
  }
  ExperimentConfig c;
  for (const auto& [key, value] : kv.entries()) {
    if (key == "schema_version") continue;
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw ConfigError(fmt::format("unknown config key '{}'", key));
    it->set(c, value);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_kv(KeyValues::load(path)); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

std::vector<int> parse_int_list(const std::string& text) { return parse_list<int>(text, "list"); }

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  return parse_list<std::uint64_t>(text, "seeds");
}

// ---------------------------------------------------------------- training

std::string train_log_header() {
  return "seed,step,reward,throughput_mbps,access_delay_ms,itp,trained,critic_loss,actor_objective,sigma";
}

std::string train_log_row(const TrainLogRow& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{}", r.seed, r.step, format_double(r.reward),
                     format_double(r.throughput_mbps), format_double(r.access_delay_ms), format_double(r.itp),
                     r.trained ? 1 : 0, format_double(r.critic_loss), format_double(r.actor_objective),
                     format_double(r.sigma));
}

std::optional<rl::Agent> train_one(const ExperimentConfig& config, std::uint64_t seed,
                                   std::vector<TrainLogRow>* log, const fs::path& checkpoint_dir) {
  env::WifiEnv environment(config.sim, derive_seed(seed, kTrainEnv), config.period_us, config.reward);

  if (config.method == Method::BebStatic) {
    for (int step = 1; step <= config.interactions; ++step) {
      const env::StepResult res = environment.step_beb();
      if (log) {
        log->push_back({seed, step, res.reward, res.metrics.throughput_mbps, res.metrics.mean_access_delay_ms,
                        res.next_state.itp});
      }
    }
    return std::nullopt;
  }

  const rl::AgentConfig acfg = config.resolved_agent();
  rl::Agent agent(to_algorithm(config.method), acfg, derive_seed(seed, kAgentInit));
  rl::ReplayBuffer buffer(static_cast<std::size_t>(acfg.buffer_size), acfg.state_dim, acfg.action_dim);
  Rng rng(derive_seed(seed, kTrainLoop));

  Vector s = environment.reset_observation().to_vector();
  for (int step = 1; step <= config.interactions; ++step) {
    TrainLogRow row{seed, step};
    row.sigma = agent.noise().sigma();
    const Vector a = agent.act(s, true, rng);
    const env::StepResult res = environment.step(a);
    Vector s_next = res.next_state.to_vector();
    buffer.push({s, a, res.reward, s_next});
    if (auto batch = buffer.sample(static_cast<std::size_t>(acfg.batch_size), rng)) {
      const rl::TrainStats stats = agent.train_step(*batch);
      row.trained = true;
      row.critic_loss = stats.critic_loss;
      row.actor_objective = stats.actor_objective;
    }
    agent.noise().advance();
    s = std::move(s_next);

    row.reward = res.reward;
    row.throughput_mbps = res.metrics.throughput_mbps;
    row.access_delay_ms = res.metrics.mean_access_delay_ms;
    row.itp = res.next_state.itp;
    if (log) log->push_back(row);

    if (!checkpoint_dir.empty() && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      agent.save(checkpoint_dir);
    }
  }
  if (!checkpoint_dir.empty()) agent.save(checkpoint_dir);
  return agent;
}

// ---------------------------------------------------------------- evaluation

EvalResult evaluate_one(const ExperimentConfig& config, std::uint64_t seed, const rl::Agent* agent) {
  if (config.method != Method::BebStatic && agent == nullptr) {
    throw ConfigError("evaluation of a learning method needs an agent");
  }
  Rng rng(derive_seed(seed, kEvalPolicy));

  const int periods = periods_for(config.eval_seconds, config.period_us);
  double throughput_sum = 0.0;
  double reward_sum = 0.0;
  double delay_sum_ms = 0.0;
  std::int64_t acked = 0;
  for (int e = 0; e < config.eval_episodes; ++e) {
    env::WifiEnv environment(config.sim, derive_seed(seed, kEvalEnv + static_cast<std::uint32_t>(e)),
                             config.period_us, config.reward);
    Vector s = environment.reset_observation().to_vector();
    for (int k = 0; k < periods; ++k) {
      const env::StepResult res =
          agent ? environment.step(agent->act(s, false, rng)) : environment.step_beb();
      throughput_sum += res.metrics.throughput_mbps;
      reward_sum += res.reward;
      delay_sum_ms += res.metrics.access_delay_sum_ms;
      acked += res.metrics.success_count;
      s = res.next_state.to_vector();
    }
  }
  const double n = static_cast<double>(periods) * config.eval_episodes;
  EvalResult out;
  out.seed = seed;
  out.throughput_mbps = throughput_sum / n;
  out.reward = reward_sum / n;
  out.access_delay_ms = acked > 0 ? delay_sum_ms / static_cast<double>(acked) : 0.0;
  return out;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

// Per-seed rows followed by "mean" and "std" rows over the seeds.
void write_eval_rows(std::ostream& out, const std::string& prefix, const std::vector<EvalResult>& results) {
  std::vector<double> thr, delay, reward;
  for (const EvalResult& r : results) {
    out << fmt::format("{}seed,{},{},{},{}\n", prefix, r.seed, format_double(r.throughput_mbps),
                       format_double(r.access_delay_ms), format_double(r.reward));
    thr.push_back(r.throughput_mbps);
    delay.push_back(r.access_delay_ms);
    reward.push_back(r.reward);
  }
  const Summary t = summarize(thr), d = summarize(delay), w = summarize(reward);
  out << fmt::format("{}mean,,{},{},{}\n", prefix, format_double(t.mean), format_double(d.mean),
                     format_double(w.mean));
  out << fmt::format("{}std,,{},{},{}\n", prefix, format_double(t.stddev), format_double(d.stddev),
                     format_double(w.stddev));
}

}  // namespace

// ---------------------------------------------------------------- commands

void cmd_train(const ExperimentConfig& config) {
  config.validate();
  prepare_out_dir(config, "train");
  std::ofstream csv = open_csv(config.out_dir / "training_log.csv");
  csv << train_log_header() << '\n';
  for (std::uint64_t seed : config.seeds) {
    std::vector<TrainLogRow> log;
    const fs::path ckpt = config.method == Method::BebStatic
                              ? fs::path()
                              : config.out_dir / "checkpoints" / seed_dir_name(seed);
    train_one(config, seed, &log, ckpt);
    for (const TrainLogRow& row : log) csv << train_log_row(row) << '\n';
    csv.flush();
  }
}

std::vector<EvalResult> cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint_root) {
  config.validate();
  std::vector<EvalResult> results;
  for (std::uint64_t seed : config.seeds) {
    if (config.method == Method::BebStatic) {
      results.push_back(evaluate_one(config, seed, nullptr));
      continue;
    }
    const fs::path dir = checkpoint_root / seed_dir_name(seed);
    if (!fs::is_directory(dir)) throw ConfigError(fmt::format("missing checkpoint {}", dir.string()));
    rl::Agent agent(to_algorithm(config.method), config.resolved_agent(), derive_seed(seed, kAgentInit));
    agent.load(dir);
    results.push_back(evaluate_one(config, seed, &agent));
  }
  prepare_out_dir(config, "eval");
  std::ofstream csv = open_csv(config.out_dir / "eval_summary.csv");
  csv << "method,n_stas,denoise_steps,row,seed,throughput_mbps,access_delay_ms,reward\n";
  write_eval_rows(csv,
                  fmt::format("{},{},{},", method_name(config.method), config.sim.n_stas,
                              config.agent.denoise_steps),
                  results);
  return results;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<int>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const std::string axis_name = axis == SweepAxis::Stas ? "stas" : "denoise_steps";
  std::vector<ExperimentConfig> points;
  for (int v : values) {
    ExperimentConfig c = config;
    (axis == SweepAxis::Stas ? c.sim.n_stas : c.agent.denoise_steps) = v;
    c.validate();
    points.push_back(std::move(c));
  }
  prepare_out_dir(config, "sweep");

  std::ofstream csv = open_csv(config.out_dir / "sweep.csv");
  csv << "axis,value,method,row,seed,throughput_mbps,access_delay_ms,reward\n";
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::ofstream log_csv = open_csv(config.out_dir / fmt::format("training_{}_{}.csv", axis_name, values[i]));
    log_csv << train_log_header() << '\n';
    std::vector<EvalResult> results;
    for (std::uint64_t seed : config.seeds) {
      std::vector<TrainLogRow> log;
      const std::optional<rl::Agent> agent = train_one(points[i], seed, &log);
      for (const TrainLogRow& row : log) log_csv << train_log_row(row) << '\n';
      results.push_back(evaluate_one(points[i], seed, agent ? &*agent : nullptr));
      rows.push_back({values[i], results.back()});
    }
    write_eval_rows(csv, fmt::format("{},{},{},", axis_name, values[i], method_name(config.method)), results);
    csv.flush();
  }
  return rows;
}

ValidateRow validate_point(const ExperimentConfig& config, int n) {
  mac::SimConfig sc = config.sim;
  sc.n_stas = n;
  sc.beb_agg = 1;
  sc.per_mpdu_error_prob = 0.0;
  mac::Simulator sim(sc, derive_seed(config.seeds.front(), kValidate));

  std::int64_t attempts = 0, collided = 0, slots = 0;
  while (slots < config.validate_slots) {
    const mac::PeriodMetrics m = sim.run_for(1e6);
    attempts += m.attempts;
    collided += m.collided_attempts;
    slots += m.idle_slots + m.transmission_events();
  }
  const mac::BianchiPoint oracle = mac::bianchi_fixed_point(n, sc.cw_min + 1, sc.max_backoff_stage());

  ValidateRow row;
  row.n = n;
  row.slots = slots;
  row.sim_p = attempts > 0 ? static_cast<double>(collided) / static_cast<double>(attempts) : 0.0;
  row.sim_tau = static_cast<double>(attempts) / (static_cast<double>(slots) * n);
  row.oracle_p = oracle.p;
  row.oracle_tau = oracle.tau;
  const double diff = std::abs(row.sim_p - row.oracle_p);
  row.rel_error = row.oracle_p > 0.0 ? diff / row.oracle_p : diff;
  return row;
}

bool cmd_validate(const ExperimentConfig& config, std::vector<ValidateRow>* rows) {
  config.validate();
  prepare_out_dir(config, "validate");
  std::ofstream csv = open_csv(config.out_dir / "validate.csv");
  csv << "n,sim_p,oracle_p,rel_error,sim_tau,oracle_tau,slots,pass\n";
  bool ok = true;
  for (int n : config.validate_stas) {
    const ValidateRow r = validate_point(config, n);
    const bool pass = r.rel_error <= config.validate_tolerance;
    ok = ok && pass;
    csv << fmt::format("{},{},{},{},{},{},{},{}\n", r.n, format_double(r.sim_p), format_double(r.oracle_p),
                       format_double(r.rel_error), format_double(r.sim_tau), format_double(r.oracle_tau), r.slots,
                       pass ? 1 : 0);
    if (rows) rows->push_back(r);
  }
  return ok;
}

}  // namespace d3pg::harness
