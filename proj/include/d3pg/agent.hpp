#pragma once

// Off-policy actor-critic learner with replay and soft target updates. The
// actor is either a state-conditioned diffusion denoiser (D3PG) or a plain
// MLP squashed into [0, 1] (the DDPG baseline); the critic and the training
// step are shared.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "d3pg/diffusion.hpp"
#include "d3pg/numkernel.hpp"

namespace d3pg::rl {

struct Transition {
  Vector s;
  Vector a;  // raw action in [0,1]^action_dim, exploration noise included
  double r = 0.0;
  Vector s_next;
};

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int state_dim, int action_dim);

  void push(Transition t);

  /// n uniform draws with replacement, or nullopt while fewer than n are stored.
  std::optional<std::vector<Transition>> sample(std::size_t n, Rng& rng) const;

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// i = 0 is the oldest stored transition.
  const Transition& at(std::size_t i) const;

 private:
  std::size_t capacity_;
  int state_dim_;
  int action_dim_;
  std::vector<Transition> storage_;
  std::size_t next_ = 0;  // slot overwritten by the next push once full
};

/// Zero-mean Gaussian action noise whose scale decays geometrically to a floor.
class ExplorationNoise {
 public:
  ExplorationNoise(double sigma0 = 0.2, double decay = 0.999, double sigma_min = 0.01);

  double sigma() const { return sigma_; }
  void advance() { sigma_ = std::max(sigma_min_, sigma_ * decay_); }
  void set_sigma(double sigma) { sigma_ = std::max(sigma_min_, sigma); }

 private:
  double decay_;
  double sigma_min_;
  double sigma_;
};

enum class Algorithm { D3pg, Ddpg };

std::string algorithm_name(Algorithm a);

struct AgentConfig {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<int> hidden{256, 256};
  double actor_lr = 2e-3;
  double critic_lr = 2e-2;
  double tau = 0.05;
  double gamma = 0.1;
  int batch_size = 12;
  int buffer_size = 256;
  int denoise_steps = 5;
  double beta_min = diffusion::kVpBetaMin;
  double beta_max = diffusion::kVpBetaMax;
  double noise_sigma0 = 0.2;
  double noise_decay = 0.999;
  double noise_sigma_min = 0.01;
  /// Weight of the squared distance of the diffusion actor's final unclipped
  /// reconstruction from the action box, subtracted from the actor objective.
  double box_penalty = 1.0;

  void validate() const;
};

struct TrainStats {
  double critic_loss = 0.0;
  double actor_objective = 0.0;  // mean Q(s, actor(s)) before the actor update
};

struct ActorObjective {
  double mean_q = 0.0;
  double penalty = 0.0;
  nn::MlpParams grad;  // gradient of mean_q - penalty (ascent direction)
};

/// Values kept from an actor forward pass for its backward pass.
struct ActorTrace {
  diffusion::ChainTrace chain;
  nn::ForwardCache cache;
  Matrix output;
};

class Actor {
 public:
  virtual ~Actor() = default;

  nn::MlpParams& online() { return online_; }
  const nn::MlpParams& online() const { return online_; }
  nn::MlpParams& target() { return target_; }
  const nn::MlpParams& target() const { return target_; }
  nn::AdamState& adam() { return adam_; }

  /// Policy input noise for a batch (x_T for the diffusion actor, empty otherwise).
  virtual Matrix draw_input_noise(Eigen::Index batch, Rng& rng) const = 0;

  /// Deterministic actions in [0,1] for a batch of states using `net`.
  virtual Matrix forward(const nn::MlpParams& net, const Matrix& states, const Matrix& input_noise,
                         ActorTrace* trace) const = 0;

  /// Gradient w.r.t. `net` of sum <actions, grad_actions> - penalty(trace)
  /// for a traced forward pass.
  virtual nn::MlpParams backward(const nn::MlpParams& net, const ActorTrace& trace,
                                 const Matrix& grad_actions) const = 0;

  /// Regularizer subtracted from the actor objective (batch mean).
  virtual double penalty(const ActorTrace&) const { return 0.0; }

 protected:
  nn::MlpParams online_;
  nn::MlpParams target_;
  nn::AdamState adam_;
};

/// Reverse-diffusion policy: x_T ~ N(0, I) denoised over T steps conditioned on the state.
class DiffusionActor final : public Actor {
 public:
  DiffusionActor(const AgentConfig& config, Rng& rng);

  const diffusion::Schedule& schedule() const { return schedule_; }
  diffusion::Denoiser denoiser(const nn::MlpParams& net) const;

  Matrix draw_input_noise(Eigen::Index batch, Rng& rng) const override;
  Matrix forward(const nn::MlpParams& net, const Matrix& states, const Matrix& input_noise,
                 ActorTrace* trace) const override;
  nn::MlpParams backward(const nn::MlpParams& net, const ActorTrace& trace,
                         const Matrix& grad_actions) const override;
  double penalty(const ActorTrace& trace) const override;

 private:
  int action_dim_;
  int state_dim_;
  double box_penalty_;
  diffusion::Schedule schedule_;
};

/// Deterministic MLP policy with a logistic output squash.
class MlpActor final : public Actor {
 public:
  MlpActor(const AgentConfig& config, Rng& rng);

  Matrix draw_input_noise(Eigen::Index batch, Rng& rng) const override;
  Matrix forward(const nn::MlpParams& net, const Matrix& states, const Matrix& input_noise,
                 ActorTrace* trace) const override;
  nn::MlpParams backward(const nn::MlpParams& net, const ActorTrace& trace,
                         const Matrix& grad_actions) const override;
};

struct Batch {
  Matrix s;
  Matrix a;
  Vector r;
  Matrix s_next;

  static Batch from(const std::vector<Transition>& transitions);
  Eigen::Index size() const { return r.size(); }
};

class Agent {
 public:
  Agent(Algorithm algorithm, const AgentConfig& config, std::uint64_t seed);

  Algorithm algorithm() const { return algorithm_; }
  const AgentConfig& config() const { return config_; }

  /// Deterministic policy action; adds N(0, sigma^2) noise and re-clamps when exploring.
  Vector act(const Vector& state, bool explore, Rng& rng) const;
  /// Deterministic action for a given policy input noise (ignored by the MLP actor).
  Vector act_with_noise(const Vector& state, const Vector& input_noise) const;

  /// y_i = r_i + gamma * Q_target(s'_i, actor_target(s'_i)).
  Vector critic_target_values(const Batch& batch);

  /// One critic step, one actor step and both soft target updates. The agent
  /// is left untouched when a NumericError is thrown.
  TrainStats train_step(const std::vector<Transition>& transitions);

  /// Mean squared TD error against fixed targets, and its gradient.
  std::pair<double, nn::MlpParams> critic_loss_and_grad(const nn::MlpParams& critic, const Batch& batch,
                                                        const Vector& targets) const;
  /// mean_b Q(s_b, actor(s_b)) for fixed policy input noise, the actor
  /// penalty, and the gradient of their difference w.r.t. `actor_net`.
  ActorObjective actor_objective_and_grad(const nn::MlpParams& actor_net, const Matrix& states,
                                          const Matrix& input_noise) const;

  double q_value(const Vector& state, const Vector& action) const;

  Actor& actor() { return *actor_; }
  const Actor& actor() const { return *actor_; }
  nn::MlpParams& critic() { return critic_; }
  const nn::MlpParams& critic() const { return critic_; }
  nn::MlpParams& critic_target() { return critic_target_; }
  const nn::MlpParams& critic_target() const { return critic_target_; }
  ExplorationNoise& noise() { return noise_; }
  std::int64_t train_steps() const { return train_steps_; }

  /// Writes actor/critic/target snapshots plus manifest.txt into `dir`.
  void save(const std::filesystem::path& dir) const;
  /// Restores networks from `dir`; throws ConfigError on dimension mismatch.
  void load(const std::filesystem::path& dir);

 private:
  Matrix critic_forward(const nn::MlpParams& net, const Matrix& s, const Matrix& a,
                        nn::ForwardCache* cache) const;

  Algorithm algorithm_;
  AgentConfig config_;
  Rng rng_;
  std::unique_ptr<Actor> actor_;
  nn::MlpParams critic_;
  nn::MlpParams critic_target_;
  nn::AdamState critic_adam_;
  ExplorationNoise noise_;
  std::int64_t train_steps_ = 0;
};

}  // namespace d3pg::rl
