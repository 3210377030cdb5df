#include "mmscore/nn.hpp"

#include <algorithm>
#include <cmath>

namespace mmscore {

namespace {

using RowMap = Eigen::Map<Matrix>;
using ConstRowMap = Eigen::Map<const Matrix>;
using ConstRowVecMap = Eigen::Map<const RowVector>;
using RowVecMap = Eigen::Map<RowVector>;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void apply_activation(Activation a, Matrix& m) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: m = m.cwiseMax(0.0); break;
    case Activation::softplus: m = m.unaryExpr([](double x) { return softplus(x); }); break;
    case Activation::tanh: m = m.array().tanh().matrix(); break;
  }
}

// Multiplies `grad` elementwise by the activation derivative at `pre`.
void apply_derivative(Activation a, const Matrix& pre, Matrix& grad) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: grad = grad.cwiseProduct(pre.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; })); break;
    case Activation::softplus: grad = grad.cwiseProduct(pre.unaryExpr([](double x) { return sigmoid(x); })); break;
    case Activation::tanh: grad = grad.array() * (1.0 - pre.array().tanh().square()); break;
  }
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
    case Activation::tanh: return "tanh";
  }
  return "unknown";
}

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + name + "'");
}

std::size_t DenseNet::count_parameters(const std::vector<int>& widths) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    n += static_cast<std::size_t>(widths[i]) * static_cast<std::size_t>(widths[i + 1]) + static_cast<std::size_t>(widths[i + 1]);
  return n;
}

DenseNet::DenseNet(std::vector<int> widths, std::vector<Activation> activations, std::uint64_t seed)
    : widths_(std::move(widths)), activations_(std::move(activations)) {
  if (widths_.size() < 2) throw ConfigError("DenseNet needs at least an input and an output width");
  if (activations_.size() != widths_.size() - 1) throw ConfigError("DenseNet needs one activation per layer");
  for (int w : widths_)
    if (w < 1) throw ConfigError("DenseNet layer widths must be positive");

  params_.assign(count_parameters(widths_), 0.0);
  Rng rng = make_rng(seed, 0x6e6e);
  std::size_t offset = 0;
  for (std::size_t l = 0; l < activations_.size(); ++l) {
    offsets_.push_back(offset);
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    const std::size_t weight_count = static_cast<std::size_t>(fan_in) * static_cast<std::size_t>(fan_out);
    for (std::size_t i = 0; i < weight_count; ++i) params_[offset + i] = uniform(rng);
    offset += weight_count + static_cast<std::size_t>(fan_out);
  }
}

void DenseNet::set_parameters(std::span<const double> values) {
  if (values.size() != params_.size()) throw ShapeError("parameter vector length mismatch");
  std::copy(values.begin(), values.end(), params_.begin());
}

void DenseNet::check_input(const Matrix& x) const {
  if (widths_.empty()) throw StateError("DenseNet is not initialized");
  if (x.cols() != widths_.front())
    throw ShapeError("DenseNet input width " + std::to_string(x.cols()) + " != expected " + std::to_string(widths_.front()));
}

Matrix DenseNet::forward(const Matrix& x) const {
  check_input(x);
  Matrix h = x;
  for (std::size_t l = 0; l < activations_.size(); ++l) {
    const int in = widths_[l], out = widths_[l + 1];
    ConstRowMap W(params_.data() + offsets_[l], in, out);
    ConstRowVecMap b(params_.data() + offsets_[l] + static_cast<std::size_t>(in) * out, out);
    Matrix pre = h * W;
    pre.rowwise() += b;
    apply_activation(activations_[l], pre);
    h = std::move(pre);
  }
  return h;
}

Matrix DenseNet::forward(const Matrix& x, Tape& tape) const {
  check_input(x);
  tape.inputs.clear();
  tape.pre_activations.clear();
  Matrix h = x;
  for (std::size_t l = 0; l < activations_.size(); ++l) {
    const int in = widths_[l], out = widths_[l + 1];
    ConstRowMap W(params_.data() + offsets_[l], in, out);
    ConstRowVecMap b(params_.data() + offsets_[l] + static_cast<std::size_t>(in) * out, out);
    Matrix pre = h * W;
    pre.rowwise() += b;
    tape.inputs.push_back(std::move(h));
    h = pre;
    apply_activation(activations_[l], h);
    tape.pre_activations.push_back(std::move(pre));
  }
  return h;
}

Vector DenseNet::forward(const Vector& x) const {
  Matrix batch = x.transpose();
  return forward(batch).row(0).transpose();
}

Matrix DenseNet::hidden(const Matrix& x, std::size_t layer) const {
  if (layer >= activations_.size()) throw ShapeError("hidden layer index out of range");
  check_input(x);
  Matrix h = x;
  for (std::size_t l = 0; l <= layer; ++l) {
    const int in = widths_[l], out = widths_[l + 1];
    ConstRowMap W(params_.data() + offsets_[l], in, out);
    ConstRowVecMap b(params_.data() + offsets_[l] + static_cast<std::size_t>(in) * out, out);
    Matrix pre = h * W;
    pre.rowwise() += b;
    apply_activation(activations_[l], pre);
    h = std::move(pre);
  }
  return h;
}

Matrix DenseNet::backward(const Tape& tape, const Matrix& upstream, std::span<double> param_grad) const {
  if (param_grad.size() != params_.size()) throw ShapeError("parameter gradient length mismatch");
  return backward_impl(tape, upstream, param_grad.data());
}

Matrix DenseNet::backward_input(const Tape& tape, const Matrix& upstream) const {
  return backward_impl(tape, upstream, nullptr);
}

Matrix DenseNet::backward_impl(const Tape& tape, const Matrix& upstream, double* param_grad) const {
  if (tape.empty() || tape.inputs.size() != activations_.size())
    throw StateError("backward called without a recorded forward pass");
  if (upstream.cols() != widths_.back() || upstream.rows() != tape.inputs.front().rows())
    throw ShapeError("upstream gradient shape does not match the recorded output");

  Matrix grad = upstream;
  for (std::size_t l = activations_.size(); l-- > 0;) {
    const int in = widths_[l], out = widths_[l + 1];
    apply_derivative(activations_[l], tape.pre_activations[l], grad);
    ConstRowMap W(params_.data() + offsets_[l], in, out);
    if (param_grad != nullptr) {
      RowMap gW(param_grad + offsets_[l], in, out);
      RowVecMap gb(param_grad + offsets_[l] + static_cast<std::size_t>(in) * out, out);
      gW.noalias() += tape.inputs[l].transpose() * grad;
      gb += grad.colwise().sum();
    }
    Matrix next = grad * W.transpose();
    grad = std::move(next);
  }
  return grad;
}

DenseNet make_mlp(int input, const std::vector<int>& hidden, int output, Activation hidden_activation,
                  Activation output_activation, std::uint64_t seed) {
  std::vector<int> widths{input};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output);
  std::vector<Activation> acts(hidden.size(), hidden_activation);
  acts.push_back(output_activation);
  return DenseNet(std::move(widths), std::move(acts), seed);
}

void adam_step(AdamState& state, std::span<double> parameters, std::span<const double> gradient) {
  if (parameters.size() != gradient.size() || state.first_moment.size() != parameters.size() ||
      state.second_moment.size() != parameters.size())
    throw ShapeError("adam_step: parameter, gradient and moment lengths differ");
  for (std::size_t i = 0; i < gradient.size(); ++i)
    if (!std::isfinite(gradient[i])) throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));

  const auto& c = state.config;
  state.step += 1;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    const double g = gradient[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    parameters[i] -= c.learning_rate * (m / bias1) / (std::sqrt(v / bias2) + c.epsilon);
  }
}

double clip_gradient_norm(std::span<double> gradient, double max_norm) {
  double sq = 0.0;
  for (double g : gradient) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : gradient) g *= s;
  }
  return norm;
}

void time_embed_into(double t, int dim, Eigen::Ref<RowVector> out) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("time embedding dimension must be a positive even number");
  if (out.size() != dim) throw ShapeError("time embedding output has wrong length");
  const int half = dim / 2;
  const double position = kTimeScale * t;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out(2 * i) = std::sin(position * freq);
    out(2 * i + 1) = std::cos(position * freq);
  }
}

Vector time_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("time embedding dimension must be a positive even number");
  RowVector out(dim);
  time_embed_into(t, dim, out);
  return out.transpose();
}

}  // namespace mmscore
