#pragma once

// Variance Preserving diffusion over action vectors and the state-conditioned
// reverse sampler used as a policy. Step indices are 1-based: t = 1..T, with
// the convention alpha_bar(0) = 1.

#include <functional>
#include <vector>

#include "d3pg/numkernel.hpp"

namespace d3pg::diffusion {

class Schedule {
 public:
  /// Builds cumulative products from an explicit beta sequence (each in [0, 1]).
  static Schedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  /// alpha_bar(0) == 1.
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

inline constexpr double kVpBetaMin = 0.1;
inline constexpr double kVpBetaMax = 10.0;

/// beta_t = 1 - exp(-beta_min/T - (beta_max - beta_min)(2t - 1)/(2T^2)).
Schedule vp_schedule(int steps, double beta_min = kVpBetaMin, double beta_max = kVpBetaMax);

/// One noising step: sqrt(beta) * eps + sqrt(1 - beta) * x.
Vector forward_step(const Vector& x, double beta, const Vector& eps);

/// Closed-form marginal: sqrt(1 - alpha_bar_t) * eps + sqrt(alpha_bar_t) * x0.
Vector forward_sample(const Vector& x0, int t, const Schedule& schedule, const Vector& eps);

/// Scalar weights of the Gaussian posterior q(x_{t-1} | x_t, x0).
struct PosteriorCoefficients {
  double recon_x;      // x0_hat = recon_x * x_t - recon_eps * eps_hat
  double recon_eps;
  double mean_x;       // mu = mean_x * x_t + mean_x0 * x0_hat
  double mean_x0;
  double sigma;
};

PosteriorCoefficients posterior_coefficients(int t, const Schedule& schedule);

struct Posterior {
  Vector mean;
  double sigma = 0.0;
};

/// Reconstructs x0 from the noise prediction and returns the posterior
/// mean and standard deviation for x_{t-1}. No clipping is applied.
Posterior posterior_params(const Vector& x_t, const Vector& eps_hat, int t, const Schedule& schedule);

/// Noise-prediction network conditioned on the environment state and a
/// one-hot encoding of the step index. Input layout: [x_t; state; onehot(t)].
struct Denoiser {
  nn::MlpParams net;
  int action_dim = 0;
  int state_dim = 0;
  int steps = 0;

  static Denoiser create(int action_dim, int state_dim, int steps, std::span<const int> hidden,
                         Rng& rng);

  /// Assembles the network input for a batch (columns) at step t.
  Matrix network_input(const Matrix& x_t, const Matrix& states, int t) const;
};

enum class SampleMode { Deterministic, Stochastic };

/// Per-step values retained for differentiating through the reverse chain.
/// Entry i belongs to step t = T - i.
struct ChainTrace {
  std::vector<nn::ForwardCache> caches;
  std::vector<Matrix> inside_masks;  // 1 where x0_hat was inside the clip box
  Matrix final_raw;                  // unclipped x0_hat of the last step (t = 1)
};

/// Lower/upper bound of the action box; x0_hat is clipped into it at every
/// reverse step, which also clamps the final sample.
inline constexpr double kActionLow = 0.0;
inline constexpr double kActionHigh = 1.0;

/// Noise prediction eps_hat(x_t, t) for a batch of columns.
using NoisePredictor = std::function<Matrix(const Matrix& x_t, int t)>;

/// Deterministic (mean-only) or ancestral reverse sampling from x_T down to
/// x_0 with an arbitrary noise predictor. Records clip masks when asked.
Matrix reverse_chain(const Matrix& x_T, const Schedule& schedule, const NoisePredictor& predict_noise,
                     SampleMode mode, Rng* rng = nullptr, std::vector<Matrix>* inside_masks = nullptr,
                     Matrix* final_raw = nullptr);

/// Runs t = T..1 on a batch. `states` is state_dim x B, `x_T` action_dim x B.
/// Stochastic mode needs `rng`; a trace can only be recorded deterministically.
Matrix denoise_batch(const Denoiser& denoiser, const Matrix& states, const Matrix& x_T,
                     const Schedule& schedule, SampleMode mode, Rng* rng = nullptr,
                     ChainTrace* trace = nullptr);

Vector denoise(const Denoiser& denoiser, const Vector& state, const Vector& x_T,
               const Schedule& schedule, SampleMode mode, Rng* rng = nullptr);

/// Parameter gradient of sum_b <x0_b, grad_x0_b> through the recorded chain.
/// Clipping contributes a zero derivative outside the action box.
/// `grad_final_raw`, when non-empty, is the gradient with respect to the
/// unclipped reconstruction of the last step and bypasses the clip.
nn::MlpParams denoise_backward(const Denoiser& denoiser, const ChainTrace& trace,
                               const Schedule& schedule, const Matrix& grad_x0,
                               const Matrix& grad_final_raw = Matrix());

}  // namespace d3pg::diffusion
