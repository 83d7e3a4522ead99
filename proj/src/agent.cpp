#include "d3pg/agent.hpp"

#include <cmath>

#include <fmt/core.h>

#include "d3pg/errors.hpp"
#include "d3pg/kvfile.hpp"

namespace d3pg::rl {

// ---------------------------------------------------------------- replay

ReplayBuffer::ReplayBuffer(std::size_t capacity, int state_dim, int action_dim)
    : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
  storage_.reserve(capacity);
}

void ReplayBuffer::push(Transition t) {
  if (t.s.size() != state_dim_ || t.s_next.size() != state_dim_ || t.a.size() != action_dim_) {
    throw ShapeError(fmt::format("transition dims s={} a={} s'={}, buffer expects s={} a={}", t.s.size(),
                                 t.a.size(), t.s_next.size(), state_dim_, action_dim_));
  }
  if (!std::isfinite(t.r)) throw InputError("transition reward is not finite");
  if (storage_.size() < capacity_) {
    storage_.push_back(std::move(t));
    return;
  }
  storage_[next_] = std::move(t);
  next_ = (next_ + 1) % capacity_;
}

std::optional<std::vector<Transition>> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (n == 0 || storage_.size() < n) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, storage_.size() - 1);
  std::vector<Transition> batch;
  batch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) batch.push_back(storage_[pick(rng)]);
  return batch;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= storage_.size()) throw RangeError("replay buffer index out of range");
  return storage_[(next_ + i) % storage_.size()];
}

ExplorationNoise::ExplorationNoise(double sigma0, double decay, double sigma_min)
    : decay_(decay), sigma_min_(sigma_min), sigma_(std::max(sigma0, sigma_min)) {
  if (!(sigma0 >= 0.0 && sigma_min >= 0.0 && decay > 0.0 && decay <= 1.0)) {
    throw ConfigError("exploration noise: need sigma0, sigma_min >= 0 and decay in (0, 1]");
  }
}

std::string algorithm_name(Algorithm a) { return a == Algorithm::D3pg ? "d3pg" : "ddpg"; }

void AgentConfig::validate() const {
  if (state_dim < 1 || action_dim < 1) throw ConfigError("agent: state and action dims must be >= 1");
  if (hidden.empty()) throw ConfigError("agent: need at least one hidden layer");
  if (!(actor_lr >= 0.0 && critic_lr >= 0.0)) throw ConfigError("agent: learning rates must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("agent: tau must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("agent: gamma must lie in [0, 1)");
  if (batch_size < 1 || buffer_size < 1) throw ConfigError("agent: batch and buffer size must be >= 1");
  if (denoise_steps < 1) throw ConfigError("agent: denoise_steps must be >= 1");
  if (!(box_penalty >= 0.0)) throw ConfigError("agent: box_penalty must be >= 0");
}

// ---------------------------------------------------------------- actors

DiffusionActor::DiffusionActor(const AgentConfig& config, Rng& rng)
    : action_dim_(config.action_dim),
      state_dim_(config.state_dim),
      box_penalty_(config.box_penalty),
      schedule_(diffusion::vp_schedule(config.denoise_steps, config.beta_min, config.beta_max)) {
  online_ = diffusion::Denoiser::create(action_dim_, state_dim_, config.denoise_steps, config.hidden, rng).net;
  target_ = online_;
  adam_ = nn::AdamState::for_params(online_);
}

diffusion::Denoiser DiffusionActor::denoiser(const nn::MlpParams& net) const {
  return diffusion::Denoiser{net, action_dim_, state_dim_, schedule_.steps()};
}

Matrix DiffusionActor::draw_input_noise(Eigen::Index batch, Rng& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(action_dim_, batch);
  for (Eigen::Index c = 0; c < batch; ++c) {
    for (Eigen::Index r = 0; r < action_dim_; ++r) x(r, c) = normal(rng);
  }
  return x;
}

Matrix DiffusionActor::forward(const nn::MlpParams& net, const Matrix& states, const Matrix& input_noise,
                               ActorTrace* trace) const {
  const diffusion::Denoiser view{net, action_dim_, state_dim_, schedule_.steps()};
  Matrix a = diffusion::denoise_batch(view, states, input_noise, schedule_, diffusion::SampleMode::Deterministic,
                                      nullptr, trace ? &trace->chain : nullptr);
  if (trace) trace->output = a;
  return a;
}

nn::MlpParams DiffusionActor::backward(const nn::MlpParams& net, const ActorTrace& trace,
                                       const Matrix& grad_actions) const {
  const diffusion::Denoiser view{net, action_dim_, state_dim_, schedule_.steps()};
  Matrix grad_raw;
  if (box_penalty_ > 0.0) {
    const Matrix& raw = trace.chain.final_raw;
    const Matrix outside = raw - raw.cwiseMax(diffusion::kActionLow).cwiseMin(diffusion::kActionHigh);
    grad_raw = (-2.0 * box_penalty_ / static_cast<double>(raw.cols())) * outside;
  }
  return diffusion::denoise_backward(view, trace.chain, schedule_, grad_actions, grad_raw);
}

double DiffusionActor::penalty(const ActorTrace& trace) const {
  if (box_penalty_ <= 0.0) return 0.0;
  const Matrix& raw = trace.chain.final_raw;
  const Matrix outside = raw - raw.cwiseMax(diffusion::kActionLow).cwiseMin(diffusion::kActionHigh);
  return box_penalty_ * outside.squaredNorm() / static_cast<double>(raw.cols());
}

MlpActor::MlpActor(const AgentConfig& config, Rng& rng) {
  std::vector<int> sizes{config.state_dim};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(config.action_dim);
  online_ = nn::mlp_init(sizes, rng);
  target_ = online_;
  adam_ = nn::AdamState::for_params(online_);
}

Matrix MlpActor::draw_input_noise(Eigen::Index, Rng&) const { return Matrix(); }

Matrix MlpActor::forward(const nn::MlpParams& net, const Matrix& states, const Matrix&, ActorTrace* trace) const {
  const Matrix z = nn::mlp_forward(net, states, trace ? &trace->cache : nullptr);
  Matrix a = (1.0 + (-z.array()).exp()).inverse().matrix();
  if (trace) trace->output = a;
  return a;
}

nn::MlpParams MlpActor::backward(const nn::MlpParams& net, const ActorTrace& trace,
                                 const Matrix& grad_actions) const {
  const Matrix& a = trace.output;
  const Matrix grad_z = grad_actions.cwiseProduct(a.cwiseProduct((1.0 - a.array()).matrix()));
  return nn::mlp_backward(net, trace.cache, grad_z).param_grads;
}

// ---------------------------------------------------------------- agent

Batch Batch::from(const std::vector<Transition>& transitions) {
  if (transitions.empty()) throw InputError("empty batch");
  const auto n = static_cast<Eigen::Index>(transitions.size());
  const auto sd = transitions.front().s.size();
  const auto ad = transitions.front().a.size();
  Batch b{Matrix(sd, n), Matrix(ad, n), Vector(n), Matrix(sd, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Transition& t = transitions[static_cast<std::size_t>(i)];
    if (t.s.size() != sd || t.a.size() != ad || t.s_next.size() != sd) {
      throw ShapeError("batch transitions have inconsistent dimensions");
    }
    b.s.col(i) = t.s;
    b.a.col(i) = t.a;
    b.r(i) = t.r;
    b.s_next.col(i) = t.s_next;
  }
  return b;
}

Agent::Agent(Algorithm algorithm, const AgentConfig& config, std::uint64_t seed)
    : algorithm_(algorithm),
      config_(config),
      rng_(seed),
      noise_(config.noise_sigma0, config.noise_decay, config.noise_sigma_min) {
  config_.validate();
  if (algorithm == Algorithm::D3pg) {
    actor_ = std::make_unique<DiffusionActor>(config_, rng_);
  } else {
    actor_ = std::make_unique<MlpActor>(config_, rng_);
  }
  std::vector<int> sizes{config_.state_dim + config_.action_dim};
  sizes.insert(sizes.end(), config_.hidden.begin(), config_.hidden.end());
  sizes.push_back(1);
  critic_ = nn::mlp_init(sizes, rng_);
  critic_target_ = critic_;
  critic_adam_ = nn::AdamState::for_params(critic_);
}

Matrix Agent::critic_forward(const nn::MlpParams& net, const Matrix& s, const Matrix& a,
                             nn::ForwardCache* cache) const {
  Matrix in(s.rows() + a.rows(), s.cols());
  in.topRows(s.rows()) = s;
  in.bottomRows(a.rows()) = a;
  return nn::mlp_forward(net, in, cache);
}

Vector Agent::act(const Vector& state, bool explore, Rng& rng) const {
  if (state.size() != config_.state_dim) {
    throw ShapeError(fmt::format("act: state has {} entries, expected {}", state.size(), config_.state_dim));
  }
  if (!state.allFinite()) throw InputError("act: state contains non-finite values");
  const Matrix noise_in = actor_->draw_input_noise(1, rng);
  Vector a = actor_->forward(actor_->online(), Matrix(state), noise_in, nullptr).col(0);
  if (explore) {
    std::normal_distribution<double> normal(0.0, noise_.sigma());
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) += normal(rng);
    a = a.cwiseMax(0.0).cwiseMin(1.0);
  }
  return a;
}

Vector Agent::act_with_noise(const Vector& state, const Vector& input_noise) const {
  const Matrix noise_in = algorithm_ == Algorithm::D3pg ? Matrix(input_noise) : Matrix();
  return actor_->forward(actor_->online(), Matrix(state), noise_in, nullptr).col(0);
}

double Agent::q_value(const Vector& state, const Vector& action) const {
  return critic_forward(critic_, Matrix(state), Matrix(action), nullptr)(0, 0);
}

Vector Agent::critic_target_values(const Batch& batch) {
  const Matrix noise_in = actor_->draw_input_noise(batch.size(), rng_);
  const Matrix next_a = actor_->forward(actor_->target(), batch.s_next, noise_in, nullptr);
  const Matrix next_q = critic_forward(critic_target_, batch.s_next, next_a, nullptr);
  return batch.r + config_.gamma * next_q.row(0).transpose();
}

std::pair<double, nn::MlpParams> Agent::critic_loss_and_grad(const nn::MlpParams& critic, const Batch& batch,
                                                             const Vector& targets) const {
  nn::ForwardCache cache;
  const Matrix q = critic_forward(critic, batch.s, batch.a, &cache);
  const Vector diff = q.row(0).transpose() - targets;
  const double n = static_cast<double>(batch.size());
  const double loss = diff.squaredNorm() / n;
  const Matrix grad_q = (2.0 / n) * diff.transpose();
  return {loss, nn::mlp_backward(critic, cache, grad_q).param_grads};
}

ActorObjective Agent::actor_objective_and_grad(const nn::MlpParams& actor_net, const Matrix& states,
                                               const Matrix& input_noise) const {
  ActorTrace trace;
  const Matrix a = actor_->forward(actor_net, states, input_noise, &trace);
  nn::ForwardCache cache;
  const Matrix q = critic_forward(critic_, states, a, &cache);
  const double n = static_cast<double>(states.cols());
  const double objective = q.sum() / n;
  const Matrix grad_q = Matrix::Constant(1, states.cols(), 1.0 / n);
  const nn::BackwardResult back = nn::mlp_backward(critic_, cache, grad_q);
  const Matrix grad_a = back.input_grad.bottomRows(config_.action_dim);
  return {objective, actor_->penalty(trace), actor_->backward(actor_net, trace, grad_a)};
}

TrainStats Agent::train_step(const std::vector<Transition>& transitions) {
  const Batch batch = Batch::from(transitions);
  if (batch.s.rows() != config_.state_dim || batch.a.rows() != config_.action_dim) {
    throw ShapeError("train_step: batch dimensions do not match the agent");
  }
  TrainStats stats;

  const Vector y = critic_target_values(batch);
  auto [critic_loss, critic_grad] = critic_loss_and_grad(critic_, batch, y);
  if (!std::isfinite(critic_loss) || !critic_grad.all_finite()) {
    throw NumericError(fmt::format("critic loss is not finite at train step {}", train_steps_));
  }
  stats.critic_loss = critic_loss;

  const nn::MlpParams critic_before = critic_;
  const nn::AdamState critic_adam_before = critic_adam_;
  nn::adam_step(critic_, critic_grad, critic_adam_, config_.critic_lr);

  const Matrix noise_in = actor_->draw_input_noise(batch.size(), rng_);
  ActorObjective obj = actor_objective_and_grad(actor_->online(), batch.s, noise_in);
  nn::MlpParams& actor_grad = obj.grad;
  if (!std::isfinite(obj.mean_q) || !actor_grad.all_finite()) {
    critic_ = critic_before;
    critic_adam_ = critic_adam_before;
    throw NumericError(fmt::format("actor objective is not finite at train step {}", train_steps_));
  }
  stats.actor_objective = obj.mean_q;
  // Adam descends; the actor ascends the critic's value.
  for (auto& w : actor_grad.weights) w = -w;
  for (auto& b : actor_grad.biases) b = -b;
  nn::adam_step(actor_->online(), actor_grad, actor_->adam(), config_.actor_lr);

  nn::soft_update(critic_target_, critic_, config_.tau);
  nn::soft_update(actor_->target(), actor_->online(), config_.tau);
  ++train_steps_;
  return stats;
}

void Agent::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nn::save_params(dir / "actor.bin", actor_->online());
  nn::save_params(dir / "actor_target.bin", actor_->target());
  nn::save_params(dir / "critic.bin", critic_);
  nn::save_params(dir / "critic_target.bin", critic_target_);
  KeyValues manifest;
  manifest.set("format_version", 1);
  manifest.set("algorithm", algorithm_name(algorithm_));
  manifest.set("state_dim", config_.state_dim);
  manifest.set("action_dim", config_.action_dim);
  manifest.set("denoise_steps", config_.denoise_steps);
  manifest.set("beta_min", config_.beta_min);
  manifest.set("beta_max", config_.beta_max);
  manifest.set("train_steps", train_steps_);
  manifest.set("noise_sigma", noise_.sigma());
  manifest.save(dir / "manifest.txt");
}

void Agent::load(const std::filesystem::path& dir) {
  const KeyValues manifest = KeyValues::load(dir / "manifest.txt");
  if (manifest.get("algorithm") != algorithm_name(algorithm_)) {
    throw ConfigError(fmt::format("checkpoint holds a {} agent, expected {}", manifest.get("algorithm"),
                                  algorithm_name(algorithm_)));
  }
  if (manifest.get_int("state_dim") != config_.state_dim || manifest.get_int("action_dim") != config_.action_dim) {
    throw ConfigError(fmt::format("checkpoint dims (state {}, action {}) do not match scenario (state {}, action {})",
                                  manifest.get_int("state_dim"), manifest.get_int("action_dim"), config_.state_dim,
                                  config_.action_dim));
  }
  if (algorithm_ == Algorithm::D3pg && manifest.get_int("denoise_steps") != config_.denoise_steps) {
    throw ConfigError("checkpoint denoise step count does not match the configuration");
  }
  auto load_checked = [&](const char* name, const nn::MlpParams& like) {
    nn::MlpParams p = nn::load_params(dir / name);
    if (!p.same_shape(like)) throw ConfigError(fmt::format("{}: layer sizes do not match the agent", name));
    return p;
  };
  actor_->online() = load_checked("actor.bin", actor_->online());
  actor_->target() = load_checked("actor_target.bin", actor_->target());
  critic_ = load_checked("critic.bin", critic_);
  critic_target_ = load_checked("critic_target.bin", critic_target_);
  train_steps_ = manifest.get_int("train_steps");
  noise_.set_sigma(manifest.get_double("noise_sigma"));
}

}  // namespace d3pg::rl
