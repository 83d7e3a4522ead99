#include "d3pg/diffusion.hpp"

#include <cmath>

#include <fmt/core.h>

#include "d3pg/errors.hpp"

namespace d3pg::diffusion {

Schedule Schedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("diffusion schedule needs at least one step");
  Schedule s;
  double running = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw ConfigError(fmt::format("beta {} outside [0, 1]", b));
    s.alphas_.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bars_.push_back(running);
  }
  s.betas_ = std::move(betas);
  return s;
}

std::size_t Schedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw RangeError(fmt::format("diffusion step {} outside [1, {}]", t, steps()));
  }
  return static_cast<std::size_t>(t - 1);
}

Schedule vp_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw ConfigError(fmt::format("vp_schedule: step count {} < 1", steps));
  const double T = steps;
  std::vector<double> betas;
  for (int t = 1; t <= steps; ++t) {
    const double exponent = -beta_min / T - (beta_max - beta_min) * (2.0 * t - 1.0) / (2.0 * T * T);
    betas.push_back(-std::expm1(exponent));
  }
  return Schedule::from_betas(std::move(betas));
}

Vector forward_step(const Vector& x, double beta, const Vector& eps) {
  if (x.size() != eps.size()) throw ShapeError("forward_step: noise dimension mismatch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw RangeError("forward_step: beta outside [0, 1]");
  return std::sqrt(beta) * eps + std::sqrt(1.0 - beta) * x;
}

Vector forward_sample(const Vector& x0, int t, const Schedule& schedule, const Vector& eps) {
  if (x0.size() != eps.size()) throw ShapeError("forward_sample: noise dimension mismatch");
  if (t < 1 || t > schedule.steps()) {
    throw RangeError(fmt::format("forward_sample: step {} outside [1, {}]", t, schedule.steps()));
  }
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(1.0 - ab) * eps + std::sqrt(ab) * x0;
}

PosteriorCoefficients posterior_coefficients(int t, const Schedule& schedule) {
  if (t < 1 || t > schedule.steps()) {
    throw RangeError(fmt::format("posterior: step {} outside [1, {}]", t, schedule.steps()));
  }
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  if (!(ab > 0.0)) {
    throw NumericError(fmt::format("posterior at step {}: alpha_bar is 0, x0 cannot be reconstructed", t));
  }
  PosteriorCoefficients c{};
  c.recon_x = 1.0 / std::sqrt(ab);
  c.recon_eps = std::sqrt(1.0 - ab) / std::sqrt(ab);
  const double denom = 1.0 - ab;
  if (t == 1) {
    // alpha_bar(0) = 1: the posterior collapses onto the reconstruction.
    c.mean_x = 0.0;
    c.mean_x0 = 1.0;
    c.sigma = 0.0;
    return c;
  }
  if (!(denom > 0.0)) {
    throw NumericError(fmt::format("posterior at step {}: 1 - alpha_bar is 0", t));
  }
  const double beta = schedule.beta(t);
  c.mean_x = std::sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / denom;
  c.mean_x0 = std::sqrt(ab_prev) * beta / denom;
  c.sigma = std::sqrt(beta * (1.0 - ab_prev) / denom);
  return c;
}

Posterior posterior_params(const Vector& x_t, const Vector& eps_hat, int t, const Schedule& schedule) {
  if (x_t.size() != eps_hat.size()) throw ShapeError("posterior_params: noise dimension mismatch");
  const PosteriorCoefficients c = posterior_coefficients(t, schedule);
  const Vector x0_hat = c.recon_x * x_t - c.recon_eps * eps_hat;
  return {c.mean_x * x_t + c.mean_x0 * x0_hat, c.sigma};
}

Denoiser Denoiser::create(int action_dim, int state_dim, int steps, std::span<const int> hidden,
                          Rng& rng) {
  if (action_dim < 1 || state_dim < 0 || steps < 1) {
    throw ConfigError("denoiser: action_dim >= 1, state_dim >= 0, steps >= 1 required");
  }
  std::vector<int> sizes{action_dim + state_dim + steps};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(action_dim);
  return Denoiser{nn::mlp_init(sizes, rng), action_dim, state_dim, steps};
}

Matrix Denoiser::network_input(const Matrix& x_t, const Matrix& states, int t) const {
  if (x_t.rows() != action_dim || states.rows() != state_dim || x_t.cols() != states.cols()) {
    throw ShapeError(fmt::format("denoiser input: got x {}x{}, state {}x{}; expected {} and {} rows",
                                 x_t.rows(), x_t.cols(), states.rows(), states.cols(), action_dim,
                                 state_dim));
  }
  if (t < 1 || t > steps) throw RangeError(fmt::format("denoiser step {} outside [1, {}]", t, steps));
  Matrix in = Matrix::Zero(action_dim + state_dim + steps, x_t.cols());
  in.topRows(action_dim) = x_t;
  in.middleRows(action_dim, state_dim) = states;
  in.row(action_dim + state_dim + t - 1).setOnes();
  return in;
}

Matrix reverse_chain(const Matrix& x_T, const Schedule& schedule, const NoisePredictor& predict_noise,
                     SampleMode mode, Rng* rng, std::vector<Matrix>* inside_masks, Matrix* final_raw) {
  if (mode == SampleMode::Stochastic && rng == nullptr) {
    throw ConfigError("stochastic denoising needs a random stream");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x = x_T;
  for (int t = schedule.steps(); t >= 1; --t) {
    const PosteriorCoefficients c = posterior_coefficients(t, schedule);
    const Matrix eps_hat = predict_noise(x, t);
    if (eps_hat.rows() != x.rows() || eps_hat.cols() != x.cols()) {
      throw ShapeError("reverse_chain: noise prediction shape mismatch");
    }
    const Matrix raw = c.recon_x * x - c.recon_eps * eps_hat;
    const Matrix x0_hat = raw.cwiseMax(kActionLow).cwiseMin(kActionHigh);
    Matrix next = c.mean_x * x + c.mean_x0 * x0_hat;
    if (mode == SampleMode::Stochastic && c.sigma > 0.0) {
      for (Eigen::Index i = 0; i < next.size(); ++i) next.data()[i] += c.sigma * normal(*rng);
    }
    if (!next.allFinite()) {
      throw NumericError(fmt::format("denoise: non-finite values at step {}", t));
    }
    if (inside_masks) {
      inside_masks->push_back(
          ((raw.array() > kActionLow) && (raw.array() < kActionHigh)).cast<double>().matrix());
    }
    if (final_raw && t == 1) *final_raw = raw;
    x = std::move(next);
  }
  return x.cwiseMax(kActionLow).cwiseMin(kActionHigh);
}

Matrix denoise_batch(const Denoiser& denoiser, const Matrix& states, const Matrix& x_T,
                     const Schedule& schedule, SampleMode mode, Rng* rng, ChainTrace* trace) {
  if (schedule.steps() != denoiser.steps) {
    throw ConfigError(fmt::format("denoiser trained for {} steps, schedule has {}", denoiser.steps,
                                  schedule.steps()));
  }
  if (trace && mode != SampleMode::Deterministic) {
    throw ConfigError("chain traces are only recorded for deterministic denoising");
  }
  if (trace) {
    trace->caches.clear();
    trace->inside_masks.clear();
  }
  const NoisePredictor predict = [&](const Matrix& x, int t) -> Matrix {
    if (!trace) return nn::mlp_forward(denoiser.net, denoiser.network_input(x, states, t));
    nn::ForwardCache& cache = trace->caches.emplace_back();
    return nn::mlp_forward(denoiser.net, denoiser.network_input(x, states, t), &cache);
  };
  return reverse_chain(x_T, schedule, predict, mode, rng, trace ? &trace->inside_masks : nullptr,
                       trace ? &trace->final_raw : nullptr);
}

Vector denoise(const Denoiser& denoiser, const Vector& state, const Vector& x_T,
               const Schedule& schedule, SampleMode mode, Rng* rng) {
  return denoise_batch(denoiser, Matrix(state), Matrix(x_T), schedule, mode, rng).col(0);
}

nn::MlpParams denoise_backward(const Denoiser& denoiser, const ChainTrace& trace,
                               const Schedule& schedule, const Matrix& grad_x0,
                               const Matrix& grad_final_raw) {
  const int T = schedule.steps();
  if (static_cast<int>(trace.caches.size()) != T || static_cast<int>(trace.inside_masks.size()) != T) {
    throw ShapeError("denoise_backward: trace does not cover every step");
  }
  nn::MlpParams grads = denoiser.net.zeros_like();
  Matrix g = grad_x0;  // d/d x_{t-1}, starting at x_0
  for (int t = 1; t <= T; ++t) {
    const std::size_t i = static_cast<std::size_t>(T - t);
    const PosteriorCoefficients c = posterior_coefficients(t, schedule);
    // Gradient with respect to the unclipped reconstruction.
    Matrix g_raw = (c.mean_x0 * g).cwiseProduct(trace.inside_masks[i]);
    if (t == 1 && grad_final_raw.size() > 0) g_raw += grad_final_raw;
    Matrix g_x = c.mean_x * g + c.recon_x * g_raw;
    const Matrix g_eps = -c.recon_eps * g_raw;
    nn::BackwardResult back = nn::mlp_backward(denoiser.net, trace.caches[i], g_eps);
    nn::axpy(grads, 1.0, back.param_grads);
    g_x += back.input_grad.topRows(denoiser.action_dim);
    g = std::move(g_x);
  }
  return grads;
}

}  // namespace d3pg::diffusion
