#include <doctest.h>

#include <cmath>
#include <random>

#include "d3pg/diffusion.hpp"
#include "d3pg/errors.hpp"
#include "support/oracles.hpp"

using namespace d3pg;
using namespace d3pg::diffusion;

TEST_CASE("vp schedule: term-by-term values") {
  for (int T : {1, 2, 5, 10}) {
    const Schedule s = vp_schedule(T);
    const auto ref = oracle::vp_betas(T, 0.1, 10.0);
    REQUIRE(s.steps() == T);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      CHECK(s.beta(t) == doctest::Approx(ref[t - 1]).epsilon(1e-14));
      CHECK(s.alpha(t) == doctest::Approx(1.0 - ref[t - 1]).epsilon(1e-14));
      prod *= 1.0 - ref[t - 1];
      CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
    }
  }
  const Schedule s5 = vp_schedule(5);
  CHECK(s5.beta(1) == doctest::Approx(1.0 - std::exp(-0.218)).epsilon(1e-14));
  CHECK(s5.beta(5) == doctest::Approx(1.0 - std::exp(-1.802)).epsilon(1e-14));
  // Exponents sum to beta_min + (beta_max - beta_min) / 2.
  CHECK(s5.alpha_bar(5) == doctest::Approx(std::exp(-5.05)).epsilon(1e-12));
  CHECK(vp_schedule(1).beta(1) == doctest::Approx(1.0 - std::exp(-5.05)).epsilon(1e-14));
  CHECK(s5.alpha_bar(0) == 1.0);
}

TEST_CASE("vp schedule: betas increase and stay in (0, 1)") {
  const Schedule s = vp_schedule(20);
  for (int t = 1; t <= 20; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    if (t > 1) CHECK(s.beta(t) > s.beta(t - 1));
  }
}

TEST_CASE("schedule: argument validation") {
  CHECK_THROWS_AS(vp_schedule(0), ConfigError);
  CHECK_THROWS_AS(Schedule::from_betas({}), ConfigError);
  CHECK_THROWS_AS(Schedule::from_betas({0.2, 1.5}), ConfigError);
  const Schedule s = vp_schedule(3);
  CHECK_THROWS_AS(s.beta(0), RangeError);
  CHECK_THROWS_AS(s.beta(4), RangeError);
  CHECK_THROWS_AS(forward_sample(Vector::Zero(2), 4, s, Vector::Zero(2)), RangeError);
  CHECK_THROWS_AS(forward_step(Vector::Zero(2), 0.5, Vector::Zero(3)), ShapeError);
}

TEST_CASE("forward step: boundary cases are exact") {
  const Vector x{{0.3, -1.2, 4.0}};
  const Vector eps{{1.5, 0.25, -0.75}};
  CHECK(forward_step(x, 0.0, eps) == x);
  CHECK(forward_step(x, 1.0, eps) == eps);
  // alpha_bar = 1 for a zero-beta schedule, so the marginal is x0 itself.
  const Schedule none = Schedule::from_betas({0.0, 0.0});
  CHECK(forward_sample(x, 2, none, eps) == x);
  const Schedule full = Schedule::from_betas({1.0});
  CHECK(forward_sample(x, 1, full, eps) == eps);
}

TEST_CASE("forward marginal agrees with iterated single steps (Monte Carlo)") {
  const Schedule s = vp_schedule(5);
  const Vector x0 = Vector::Constant(1, 0.8);
  const int n = 100000;
  Rng rng(2024);
  std::normal_distribution<double> normal;
  for (int t : {1, 3, 5}) {
    double sum_a = 0, sq_a = 0, sum_b = 0, sq_b = 0;
    for (int i = 0; i < n; ++i) {
      Vector x = x0;
      for (int k = 1; k <= t; ++k) x = forward_step(x, s.beta(k), Vector::Constant(1, normal(rng)));
      const double b = forward_sample(x0, t, s, Vector::Constant(1, normal(rng)))(0);
      sum_a += x(0);
      sq_a += x(0) * x(0);
      sum_b += b;
      sq_b += b * b;
    }
    const double mean_a = sum_a / n, mean_b = sum_b / n;
    const double var_a = (sq_a - n * mean_a * mean_a) / (n - 1);
    const double var_b = (sq_b - n * mean_b * mean_b) / (n - 1);
    const double se_mean = std::sqrt(var_a / n + var_b / n);
    const double se_var = std::sqrt(2.0 / (n - 1)) * std::sqrt(var_a * var_a + var_b * var_b);
    CHECK(std::abs(mean_a - mean_b) < 3.0 * se_mean);
    CHECK(std::abs(var_a - var_b) < 3.0 * se_var);
  }
}

TEST_CASE("posterior matches Gaussian conditioning") {
  const Schedule s = vp_schedule(5);
  const double x0 = 0.35, xt = -0.6;
  for (int t = 2; t <= 5; ++t) {
    // p(x_{t-1} | x0) = N(sqrt(ab_{t-1}) x0, 1 - ab_{t-1}); p(x_t | x_{t-1}) = N(sqrt(a_t) x_{t-1}, b_t).
    const double ab_prev = s.alpha_bar(t - 1), a = s.alpha(t), b = s.beta(t);
    const double precision = 1.0 / (1.0 - ab_prev) + a / b;
    const double var = 1.0 / precision;
    const double mean = var * (std::sqrt(ab_prev) * x0 / (1.0 - ab_prev) + std::sqrt(a) * xt / b);

    const PosteriorCoefficients c = posterior_coefficients(t, s);
    CHECK(c.mean_x * xt + c.mean_x0 * x0 == doctest::Approx(mean).epsilon(1e-12));
    CHECK(c.sigma * c.sigma == doctest::Approx(var).epsilon(1e-12));
  }
}

TEST_CASE("posterior at t = 1 collapses onto the reconstruction") {
  const Schedule s = vp_schedule(5);
  const PosteriorCoefficients c = posterior_coefficients(1, s);
  CHECK(c.mean_x == 0.0);
  CHECK(c.mean_x0 == 1.0);
  CHECK(c.sigma == 0.0);
  const Vector xt{{0.4, -0.2}}, eps{{0.1, 0.3}};
  const Posterior p = posterior_params(xt, eps, 1, s);
  CHECK(p.sigma == 0.0);
  for (int i = 0; i < 2; ++i) {
    CHECK(p.mean(i) == doctest::Approx((xt(i) - std::sqrt(1 - s.alpha_bar(1)) * eps(i)) / std::sqrt(s.alpha_bar(1))));
  }
}

TEST_CASE("reconstruction inverts the forward marginal") {
  const Schedule s = vp_schedule(5);
  const Vector x0{{0.1, 0.9, 0.5}};
  const Vector eps{{-1.3, 0.2, 2.1}};
  for (int t = 1; t <= 5; ++t) {
    const Vector xt = forward_sample(x0, t, s, eps);
    const PosteriorCoefficients c = posterior_coefficients(t, s);
    const Vector rec = c.recon_x * xt - c.recon_eps * eps;
    CHECK((rec - x0).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("perfect noise predictor reconstructs x0 through the reverse chain") {
  for (int T : {1, 5, 10}) {
    const Schedule s = vp_schedule(T);
    Matrix x0(3, 4);
    x0 << 0.0, 0.25, 0.5, 1.0,  //
        0.9, 0.1, 0.33, 0.66,   //
        0.5, 0.5, 0.01, 0.99;
    const auto exact_noise = [&](const Matrix& xt, int t) -> Matrix {
      return (xt - std::sqrt(s.alpha_bar(t)) * x0) / std::sqrt(1.0 - s.alpha_bar(t));
    };
    Rng rng(T);
    std::normal_distribution<double> normal;
    Matrix xT(3, 4);
    for (Eigen::Index i = 0; i < xT.size(); ++i) xT(i) = normal(rng);
    const Matrix det = reverse_chain(xT, s, exact_noise, SampleMode::Deterministic);
    CHECK((det - x0).cwiseAbs().maxCoeff() < 1e-8);
    const Matrix sto = reverse_chain(xT, s, exact_noise, SampleMode::Stochastic, &rng);
    CHECK((sto - x0).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("reverse chain output stays in the action box") {
  const Schedule s = vp_schedule(5);
  Rng rng(1);
  const int hidden[] = {16};
  const Denoiser d = Denoiser::create(4, 3, 5, hidden, rng);
  std::normal_distribution<double> normal(0.0, 3.0);
  Matrix xT(4, 50), st(3, 50);
  for (Eigen::Index i = 0; i < xT.size(); ++i) xT(i) = normal(rng);
  for (Eigen::Index i = 0; i < st.size(); ++i) st(i) = normal(rng);
  const Matrix a = denoise_batch(d, st, xT, s, SampleMode::Stochastic, &rng);
  CHECK(a.minCoeff() >= kActionLow);
  CHECK(a.maxCoeff() <= kActionHigh);
}

TEST_CASE("denoiser input layout: [x_t; state; onehot(t)]") {
  Rng rng(3);
  const int hidden[] = {8};
  const Denoiser d = Denoiser::create(2, 3, 4, hidden, rng);
  CHECK(d.net.input_size() == 2 + 3 + 4);
  CHECK(d.net.output_size() == 2);
  const Matrix x{{1.0}, {2.0}};
  const Matrix st{{3.0}, {4.0}, {5.0}};
  const Matrix in = d.network_input(x, st, 3);
  const Vector expect{{1, 2, 3, 4, 5, 0, 0, 1, 0}};
  CHECK(in.col(0) == expect);
  CHECK_THROWS_AS(d.network_input(x, st, 5), RangeError);
  CHECK_THROWS_AS(d.network_input(x, Matrix::Zero(2, 1), 1), ShapeError);
}

TEST_CASE("denoising is a deterministic function of state, x_T and seed") {
  const Schedule s = vp_schedule(5);
  Rng init(8);
  const int hidden[] = {16, 16};
  const Denoiser d = Denoiser::create(2, 3, 5, hidden, init);
  const Vector st{{0.1, 0.2, 0.3}}, xT{{0.5, -0.5}};
  CHECK(denoise(d, st, xT, s, SampleMode::Deterministic) == denoise(d, st, xT, s, SampleMode::Deterministic));
  Rng r1(4), r2(4);
  CHECK(denoise(d, st, xT, s, SampleMode::Stochastic, &r1) == denoise(d, st, xT, s, SampleMode::Stochastic, &r2));
  CHECK_THROWS_AS(denoise(d, st, xT, s, SampleMode::Stochastic, nullptr), ConfigError);
}

TEST_CASE("gradient through the denoising chain matches central differences") {
  for (int T : {1, 3}) {
    const Schedule s = vp_schedule(T);
    Rng rng(17);
    const int hidden[] = {6, 5};
    Denoiser d = Denoiser::create(2, 2, T, hidden, rng);
    // Start every sample inside the box so no clip boundary sits within the FD step.
    for (auto& b : d.net.biases) b.setConstant(0.0);
    const Matrix st{{0.2, 0.7, 0.4}, {0.9, 0.1, 0.5}};
    const Matrix xT{{0.6, 0.4, 0.5}, {0.45, 0.55, 0.5}};
    const Matrix g{{0.3, -1.1, 0.7}, {1.4, 0.2, -0.5}};

    ChainTrace trace;
    const Matrix out = denoise_batch(d, st, xT, s, SampleMode::Deterministic, nullptr, &trace);
    REQUIRE(trace.caches.size() == static_cast<std::size_t>(T));
    const nn::MlpParams grad = denoise_backward(d, trace, s, g);

    const auto f = [&](const nn::MlpParams& p) {
      Denoiser probe = d;
      probe.net = p;
      return denoise_batch(probe, st, xT, s, SampleMode::Deterministic).cwiseProduct(g).sum();
    };
    const auto fd = oracle::finite_difference(d.net, f, 1e-6);
    CHECK(oracle::max_relative_error(grad.flatten(), fd, 1e-7) < 1e-3);
    (void)out;
  }
}

TEST_CASE("gradient w.r.t. the final unclipped reconstruction bypasses the clip") {
  const Schedule s = vp_schedule(2);
  Rng rng(5);
  const int hidden[] = {4};
  Denoiser d = Denoiser::create(1, 1, 2, hidden, rng);
  const Matrix st{{0.5}};
  const Matrix xT{{3.0}};
  ChainTrace trace;
  denoise_batch(d, st, xT, s, SampleMode::Deterministic, nullptr, &trace);
  const Matrix zero = Matrix::Zero(1, 1);
  const nn::MlpParams g_raw = denoise_backward(d, trace, s, zero, Matrix::Constant(1, 1, 1.0));

  const auto raw_of = [&](const nn::MlpParams& p) {
    Denoiser probe = d;
    probe.net = p;
    ChainTrace t;
    denoise_batch(probe, st, xT, s, SampleMode::Deterministic, nullptr, &t);
    return t.final_raw(0, 0);
  };
  const auto fd = oracle::finite_difference(d.net, raw_of, 1e-6);
  CHECK(oracle::max_relative_error(g_raw.flatten(), fd, 1e-7) < 1e-4);
}

TEST_CASE("noise regression on a single target recovers it by denoising") {
  // Train eps_theta on one (state, x0) pair with the standard noise-prediction
  // loss, then check the deterministic reverse chain lands close to x0.
  const int T = 5;
  const Schedule s = vp_schedule(T);
  Rng rng(21);
  const int hidden[] = {32, 32};
  Denoiser d = Denoiser::create(2, 1, T, hidden, rng);
  const Vector x0{{0.3, 0.8}};
  const Matrix st = Matrix::Constant(1, 16, 0.5);
  nn::AdamState adam = nn::AdamState::for_params(d.net);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> step(1, T);
  for (int it = 0; it < 1500; ++it) {
    const int t = step(rng);
    Matrix eps(2, 16), xt(2, 16);
    for (int b = 0; b < 16; ++b) {
      for (int i = 0; i < 2; ++i) eps(i, b) = normal(rng);
      xt.col(b) = forward_sample(x0, t, s, eps.col(b));
    }
    nn::ForwardCache cache;
    const Matrix pred = nn::mlp_forward(d.net, d.network_input(xt, st, t), &cache);
    const Matrix grad = (2.0 / 16.0) * (pred - eps);
    nn::adam_step(d.net, nn::mlp_backward(d.net, cache, grad).param_grads, adam, 1e-3);
  }
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Vector xT{{normal(rng), normal(rng)}};
    worst = std::max(worst, (denoise(d, Vector::Constant(1, 0.5), xT, s, SampleMode::Deterministic) - x0)
                                .cwiseAbs()
                                .maxCoeff());
  }
  CHECK(worst < 0.05);
}
