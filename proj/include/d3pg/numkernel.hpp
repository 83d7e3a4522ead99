#pragma once

// Dense multilayer perceptrons with exact reverse-mode gradients, Adam and
// Polyak (soft) target updates. Samples are stored column-wise: a batch of B
// inputs of width d is a d x B matrix.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace d3pg {

using Rng = std::mt19937_64;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace nn {

enum class Activation : std::uint32_t { Relu = 0, Identity = 1 };

/// Parameters of a fully connected network. Hidden layers use
/// `hidden_activation`; the output layer is always linear.
struct MlpParams {
  std::vector<int> layer_sizes;
  std::vector<Matrix> weights;  // weights[k]: layer_sizes[k+1] x layer_sizes[k]
  std::vector<Vector> biases;   // biases[k]: layer_sizes[k+1]
  Activation hidden_activation = Activation::Relu;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return weights.size(); }
  std::size_t parameter_count() const;

  bool same_shape(const MlpParams& other) const;
  bool all_finite() const;

  /// Zero-valued parameters with the same shape (used for gradients).
  MlpParams zeros_like() const;

  /// Flat views in layer order: W0 (column-major), b0, W1, b1, ...
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
};

/// Per-layer values kept by `forward` for the backward pass.
/// `activations[0]` is the input, `activations[k+1]` the output of layer k.
struct ForwardCache {
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> activations;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
MlpParams mlp_init(std::span<const int> layer_sizes, Rng& rng,
                   Activation hidden = Activation::Relu);

/// Batched forward pass. `input` is input_size x B.
Matrix mlp_forward(const MlpParams& params, const Matrix& input, ForwardCache* cache = nullptr);
Vector mlp_forward(const MlpParams& params, const Vector& input);

struct BackwardResult {
  MlpParams param_grads;  // summed over the batch columns
  Matrix input_grad;      // input_size x B
};

/// Gradients of sum_b <output_b, output_grad_b> with respect to every
/// parameter and every input column.
BackwardResult mlp_backward(const MlpParams& params, const ForwardCache& cache,
                            const Matrix& output_grad);

/// params += scale * other, element-wise.
void axpy(MlpParams& params, double scale, const MlpParams& other);

struct AdamState {
  MlpParams first_moment;
  MlpParams second_moment;
  std::int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const MlpParams& params);
};

/// One bias-corrected Adam step that *descends* along `grads`.
/// Throws NumericError (and leaves everything untouched) on non-finite grads.
void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state, double lr);

/// target <- tau * online + (1 - tau) * target.
void soft_update(MlpParams& target, const MlpParams& online, double tau);

// Snapshot format (little-endian):
//   magic "D3MLP\0\0\0" | u32 version | u32 activation | u32 n_sizes |
//   u32 sizes[n_sizes] | per layer: f64 W (row-major), f64 b
void write_params(std::ostream& out, const MlpParams& params);
MlpParams read_params(std::istream& in);
void save_params(const std::filesystem::path& path, const MlpParams& params);
MlpParams load_params(const std::filesystem::path& path);

inline constexpr std::uint32_t kSnapshotVersion = 1;

}  // namespace nn
}  // namespace d3pg
