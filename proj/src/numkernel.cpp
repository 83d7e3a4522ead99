#include "d3pg/numkernel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/core.h>

#include "d3pg/errors.hpp"

namespace d3pg::nn {

namespace {

constexpr char kMagic[8] = {'D', '3', 'M', 'L', 'P', '\0', '\0', '\0'};

Matrix activate(const Matrix& z, Activation act) {
  switch (act) {
    case Activation::Relu:
      return z.cwiseMax(0.0);
    case Activation::Identity:
      return z;
  }
  return z;
}

// Multiplies `grad` in place by the activation derivative at `z`.
void activate_backward(const Matrix& z, Activation act, Matrix& grad) {
  if (act == Activation::Relu) {
    grad = (z.array() > 0.0).select(grad, 0.0);
  }
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes little-endian");
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) {
    throw ConfigError("parameter snapshot truncated");
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    n += static_cast<std::size_t>(weights[k].size() + biases[k].size());
  }
  return n;
}

bool MlpParams::same_shape(const MlpParams& other) const {
  return layer_sizes == other.layer_sizes && weights.size() == other.weights.size() &&
         biases.size() == other.biases.size();
}

bool MlpParams::all_finite() const {
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!weights[k].allFinite() || !biases[k].allFinite()) return false;
  }
  return true;
}

MlpParams MlpParams::zeros_like() const {
  MlpParams z;
  z.layer_sizes = layer_sizes;
  z.hidden_activation = hidden_activation;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    z.weights.push_back(Matrix::Zero(weights[k].rows(), weights[k].cols()));
    z.biases.push_back(Vector::Zero(biases[k].size()));
  }
  return z;
}

std::vector<double> MlpParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    flat.insert(flat.end(), weights[k].data(), weights[k].data() + weights[k].size());
    flat.insert(flat.end(), biases[k].data(), biases[k].data() + biases[k].size());
  }
  return flat;
}

void MlpParams::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError(fmt::format("unflatten: expected {} values, got {}", parameter_count(), flat.size()));
  }
  auto it = flat.begin();
  for (std::size_t k = 0; k < weights.size(); ++k) {
    std::copy_n(it, weights[k].size(), weights[k].data());
    it += weights[k].size();
    std::copy_n(it, biases[k].size(), biases[k].data());
    it += biases[k].size();
  }
}

MlpParams mlp_init(std::span<const int> layer_sizes, Rng& rng, Activation hidden) {
  if (layer_sizes.size() < 2) {
    throw ConfigError("mlp_init: need at least an input and an output size");
  }
  for (int s : layer_sizes) {
    if (s < 1) throw ConfigError(fmt::format("mlp_init: non-positive layer size {}", s));
  }
  MlpParams p;
  p.layer_sizes.assign(layer_sizes.begin(), layer_sizes.end());
  p.hidden_activation = hidden;
  for (std::size_t k = 0; k + 1 < layer_sizes.size(); ++k) {
    const int fan_in = layer_sizes[k];
    const int fan_out = layer_sizes[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(fan_out, fan_in);
    // Row-major draw order so the stream layout does not depend on Eigen storage.
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) w(r, c) = dist(rng);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vector::Zero(fan_out));
  }
  return p;
}

Matrix mlp_forward(const MlpParams& params, const Matrix& input, ForwardCache* cache) {
  if (input.rows() != params.input_size()) {
    throw ShapeError(fmt::format("mlp_forward: input has {} rows, network expects {}", input.rows(),
                                 params.input_size()));
  }
  const std::size_t n_layers = params.num_layers();
  if (cache) {
    cache->pre_activations.clear();
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  Matrix a = input;
  for (std::size_t k = 0; k < n_layers; ++k) {
    Matrix z = params.weights[k] * a;
    z.colwise() += params.biases[k];
    const bool last = k + 1 == n_layers;
    a = last ? z : activate(z, params.hidden_activation);
    if (cache) {
      cache->pre_activations.push_back(std::move(z));
      cache->activations.push_back(a);
    }
  }
  return a;
}

Vector mlp_forward(const MlpParams& params, const Vector& input) {
  return mlp_forward(params, Matrix(input), nullptr).col(0);
}

BackwardResult mlp_backward(const MlpParams& params, const ForwardCache& cache,
                            const Matrix& output_grad) {
  const std::size_t n_layers = params.num_layers();
  if (cache.pre_activations.size() != n_layers || cache.activations.size() != n_layers + 1) {
    throw ShapeError("mlp_backward: cache does not match network depth");
  }
  if (output_grad.rows() != params.output_size() ||
      output_grad.cols() != cache.activations.back().cols()) {
    throw ShapeError("mlp_backward: output gradient shape mismatch");
  }
  BackwardResult out{params.zeros_like(), Matrix()};
  Matrix delta = output_grad;
  for (std::size_t k = n_layers; k-- > 0;) {
    if (k + 1 != n_layers) {
      activate_backward(cache.pre_activations[k], params.hidden_activation, delta);
    }
    out.param_grads.weights[k].noalias() = delta * cache.activations[k].transpose();
    out.param_grads.biases[k] = delta.rowwise().sum();
    delta = params.weights[k].transpose() * delta;
  }
  out.input_grad = std::move(delta);
  return out;
}

void axpy(MlpParams& params, double scale, const MlpParams& other) {
  if (!params.same_shape(other)) throw ShapeError("axpy: shape mismatch");
  for (std::size_t k = 0; k < params.num_layers(); ++k) {
    params.weights[k] += scale * other.weights[k];
    params.biases[k] += scale * other.biases[k];
  }
}

AdamState AdamState::for_params(const MlpParams& params) {
  AdamState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  return s;
}

namespace {

template <typename Derived, typename GradT>
void adam_update(Eigen::MatrixBase<Derived>& p, const GradT& g, Eigen::MatrixBase<Derived>& m,
                 Eigen::MatrixBase<Derived>& v, double b1, double b2, double step_size,
                 double eps_hat) {
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
  p.array() -= step_size * m.array() / (v.array().sqrt() + eps_hat);
}

}  // namespace

void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state, double lr) {
  if (!params.same_shape(grads) || !params.same_shape(state.first_moment) ||
      !params.same_shape(state.second_moment)) {
    throw ShapeError("adam_step: parameter, gradient and moment shapes differ");
  }
  if (!(lr >= 0.0)) throw RangeError("adam_step: learning rate must be non-negative");
  if (!grads.all_finite()) throw NumericError("adam_step: non-finite gradient, update aborted");

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  // Bias correction folded into the step size and epsilon.
  const double step_size = lr * std::sqrt(bc2) / bc1;
  const double eps_hat = state.epsilon * std::sqrt(bc2);
  for (std::size_t k = 0; k < params.num_layers(); ++k) {
    adam_update(params.weights[k], grads.weights[k], state.first_moment.weights[k],
                state.second_moment.weights[k], state.beta1, state.beta2, step_size, eps_hat);
    adam_update(params.biases[k], grads.biases[k], state.first_moment.biases[k],
                state.second_moment.biases[k], state.beta1, state.beta2, step_size, eps_hat);
  }
}

void soft_update(MlpParams& target, const MlpParams& online, double tau) {
  if (!target.same_shape(online)) throw ShapeError("soft_update: shape mismatch");
  if (!(tau >= 0.0 && tau <= 1.0)) throw RangeError("soft_update: tau must lie in [0, 1]");
  for (std::size_t k = 0; k < target.num_layers(); ++k) {
    target.weights[k] = tau * online.weights[k] + (1.0 - tau) * target.weights[k];
    target.biases[k] = tau * online.biases[k] + (1.0 - tau) * target.biases[k];
  }
}

void write_params(std::ostream& out, const MlpParams& params) {
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kSnapshotVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.hidden_activation));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.layer_sizes.size()));
  for (int s : params.layer_sizes) put<std::uint32_t>(out, static_cast<std::uint32_t>(s));
  for (std::size_t k = 0; k < params.num_layers(); ++k) {
    const Matrix& w = params.weights[k];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) put<double>(out, w(r, c));
    }
    for (Eigen::Index i = 0; i < params.biases[k].size(); ++i) put<double>(out, params.biases[k](i));
  }
  if (!out) throw ConfigError("parameter snapshot: write failed");
}

MlpParams read_params(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ConfigError("parameter snapshot: bad magic");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kSnapshotVersion) {
    throw ConfigError(fmt::format("parameter snapshot: unsupported version {}", version));
  }
  const auto act = get<std::uint32_t>(in);
  if (act > static_cast<std::uint32_t>(Activation::Identity)) {
    throw ConfigError("parameter snapshot: unknown activation tag");
  }
  const auto n_sizes = get<std::uint32_t>(in);
  if (n_sizes < 2 || n_sizes > 64) throw ConfigError("parameter snapshot: bad layer count");
  MlpParams p;
  p.hidden_activation = static_cast<Activation>(act);
  for (std::uint32_t i = 0; i < n_sizes; ++i) {
    const auto s = get<std::uint32_t>(in);
    if (s == 0 || s > (1u << 20)) throw ConfigError("parameter snapshot: bad layer size");
    p.layer_sizes.push_back(static_cast<int>(s));
  }
  for (std::size_t k = 0; k + 1 < p.layer_sizes.size(); ++k) {
    Matrix w(p.layer_sizes[k + 1], p.layer_sizes[k]);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = get<double>(in);
    }
    Vector b(p.layer_sizes[k + 1]);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = get<double>(in);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  return p;
}

void save_params(const std::filesystem::path& path, const MlpParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError(fmt::format("cannot open {} for writing", path.string()));
  write_params(out, params);
}

MlpParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  return read_params(in);
}

}  // namespace d3pg::nn
