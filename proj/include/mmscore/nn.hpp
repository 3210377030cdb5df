#pragma once

#include "mmscore/common.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmscore {

enum class Activation : std::uint8_t { identity = 0, relu = 1, softplus = 2, tanh = 3 };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Values recorded by a forward pass, consumed by DenseNet::backward.
struct Tape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre_activations;
  bool empty() const { return inputs.empty(); }
};

/// Fully connected network y = act_L(... act_1(x W_1 + b_1) ... W_L + b_L).
///
/// Parameters live in one flat vector: for each layer, the in x out weight matrix
/// (row-major) followed by its out-length bias. Gradients use the same layout.
/// Forward passes are const and safe to run concurrently; a Tape carries the state
/// needed for the reverse pass.
class DenseNet {
 public:
  DenseNet() = default;
  /// `activations` has one entry per layer (widths.size() - 1).
  DenseNet(std::vector<int> widths, std::vector<Activation> activations, std::uint64_t seed);

  const std::vector<int>& widths() const { return widths_; }
  const std::vector<Activation>& activations() const { return activations_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  std::size_t num_layers() const { return activations_.size(); }
  std::size_t parameter_count() const { return params_.size(); }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  void set_parameters(std::span<const double> values);

  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Tape& tape) const;
  Vector forward(const Vector& x) const;

  /// Reverse pass for the batch recorded in `tape`. Adds d(sum_i upstream_i . y_i)/d(params)
  /// into `param_grad` and returns the gradient with respect to the input batch.
  Matrix backward(const Tape& tape, const Matrix& upstream, std::span<double> param_grad) const;
  /// Input gradient only.
  Matrix backward_input(const Tape& tape, const Matrix& upstream) const;

  /// Activations of layer `layer` (0-based, after its nonlinearity) for a batch.
  Matrix hidden(const Matrix& x, std::size_t layer) const;

  static std::size_t count_parameters(const std::vector<int>& widths);

 private:
  Matrix backward_impl(const Tape& tape, const Matrix& upstream, double* param_grad) const;
  void check_input(const Matrix& x) const;

  std::vector<int> widths_;
  std::vector<Activation> activations_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Convenience constructor: hidden layers share `hidden_activation`, last layer uses `output_activation`.
DenseNet make_mlp(int input, const std::vector<int>& hidden, int output, Activation hidden_activation,
                  Activation output_activation, std::uint64_t seed);

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t parameter_count, AdamConfig cfg)
      : config(cfg), first_moment(parameter_count, 0.0), second_moment(parameter_count, 0.0) {}
};

/// Bias-corrected Adam update. Throws NumericError naming the first non-finite gradient index.
void adam_step(AdamState& state, std::span<double> parameters, std::span<const double> gradient);

/// Rescales `gradient` in place so its L2 norm is at most max_norm; returns the original norm.
double clip_gradient_norm(std::span<double> gradient, double max_norm);

/// Sinusoidal embedding of diffusion time t in [0,1]: entries 2i and 2i+1 are sin and cos of
/// (kTimeScale * t) * 10000^(-2i/e).
constexpr double kTimeScale = 1000.0;
Vector time_embed(double t, int dim);
void time_embed_into(double t, int dim, Eigen::Ref<RowVector> out);

}  // namespace mmscore
