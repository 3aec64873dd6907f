// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/common.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace dnrf {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr std::size_t kExpressionDim = 16;
inline constexpr std::size_t kSigmaDim = 16;
inline constexpr std::size_t kHiddenWidth = 64;

/// 16-channel conditioning vector. The all-ones code stands for "no expression".
struct ExpressionCode {
  std::array<double, kExpressionDim> values{};

  static ExpressionCode constant() {
    ExpressionCode c;
    c.values.fill(1.0);
    return c;
  }
  static ExpressionCode zero() { return {}; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const ExpressionCode&) const = default;

  bool finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

/// One hidden ReLU layer: out = W2 * relu(W1 * x + b1) + b2. Output
/// activations are applied by the caller.
struct MlpShape {
  std::size_t in = 0;
  std::size_t hidden = kHiddenWidth;
  std::size_t out = 0;

  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return hidden * in; }
  std::size_t w2_offset() const { return b1_offset() + hidden; }
  std::size_t b2_offset() const { return w2_offset() + out * hidden; }
  std::size_t parameter_count() const { return b2_offset() + out; }
  bool operator==(const MlpShape&) const = default;
};

/// Activations recorded by a forward pass, column per sample.
template <typename Scalar>
struct MlpTape {
  Matrix<Scalar> input;   // in x B
  Matrix<Scalar> hidden;  // hidden x B, post-ReLU
  Matrix<Scalar> output;  // out x B, pre-activation
};

template <typename Scalar>
struct MlpView {
  using ConstMap = Eigen::Map<const Matrix<Scalar>>;
  using ConstVecMap = Eigen::Map<const Vector<Scalar>>;

  MlpShape shape;
  std::span<const Scalar> params;

  MlpView(const MlpShape& s, std::span<const Scalar> p) : shape(s), params(p) {
    if (p.size() != s.parameter_count()) fail(ErrorKind::ShapeMismatch, "MLP parameter count");
  }

  ConstMap w1() const { return ConstMap(params.data() + shape.w1_offset(), shape.hidden, shape.in); }
  ConstVecMap b1() const { return ConstVecMap(params.data() + shape.b1_offset(), shape.hidden); }
  ConstMap w2() const { return ConstMap(params.data() + shape.w2_offset(), shape.out, shape.hidden); }
  ConstVecMap b2() const { return ConstVecMap(params.data() + shape.b2_offset(), shape.out); }

  /// Forward over the columns of `input`, recording the tape. Weights are
  /// copied into owned (aligned) storage first: Eigen picks its summation
  /// order from operand alignment, and the parameter buffer's is arbitrary.
  void forward(const Matrix<Scalar>& input, MlpTape<Scalar>& tape) const {
    if (static_cast<std::size_t>(input.rows()) != shape.in) fail(ErrorKind::ShapeMismatch, "MLP input rows");
    const Matrix<Scalar> w1m = w1(), w2m = w2();
    const Vector<Scalar> b1v = b1(), b2v = b2();
    tape.input = input;
    tape.hidden.noalias() = w1m * input;
    tape.hidden.colwise() += b1v;
    tape.hidden = tape.hidden.cwiseMax(Scalar(0));
    tape.output.noalias() = w2m * tape.hidden;
    tape.output.colwise() += b2v;
  }

  /// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
  Matrix<Scalar> backward(const MlpTape<Scalar>& tape, const Matrix<Scalar>& upstream,
                          std::span<Scalar> grad) const {
    if (static_cast<std::size_t>(tape.input.rows()) != shape.in ||
        static_cast<std::size_t>(tape.hidden.rows()) != shape.hidden ||
        static_cast<std::size_t>(tape.output.rows()) != shape.out)
      fail(ErrorKind::TapeMismatch, "tape does not match MLP shape");
    if (upstream.rows() != tape.output.rows() || upstream.cols() != tape.output.cols())
      fail(ErrorKind::TapeMismatch, "upstream gradient does not match tape");
    if (grad.size() != shape.parameter_count()) fail(ErrorKind::ShapeMismatch, "MLP gradient size");
    using Map = Eigen::Map<Matrix<Scalar>>;
    using VecMap = Eigen::Map<Vector<Scalar>>;
    Map gw1(grad.data() + shape.w1_offset(), shape.hidden, shape.in);
    VecMap gb1(grad.data() + shape.b1_offset(), shape.hidden);
    Map gw2(grad.data() + shape.w2_offset(), shape.out, shape.hidden);
    VecMap gb2(grad.data() + shape.b2_offset(), shape.out);
    const Matrix<Scalar> w1m = w1(), w2m = w2();

    Matrix<Scalar> part = upstream * tape.hidden.transpose();
    gw2 += part;
    Vector<Scalar> bias_part = upstream.rowwise().sum();
    gb2 += bias_part;
    Matrix<Scalar> d_hidden = w2m.transpose() * upstream;
    d_hidden = (tape.hidden.array() > Scalar(0)).select(d_hidden, Scalar(0));
    part = d_hidden * tape.input.transpose();
    gw1 += part;
    bias_part = d_hidden.rowwise().sum();
    gb1 += bias_part;
    return w1m.transpose() * d_hidden;
  }
};

/// Uniform Glorot initialisation; biases zero.
template <typename Scalar>
void init_mlp(const MlpShape& shape, std::span<Scalar> params, Rng& rng) {
  const double a1 = std::sqrt(6.0 / double(shape.in + shape.hidden));
  const double a2 = std::sqrt(6.0 / double(shape.hidden + shape.out));
  for (std::size_t i = 0; i < shape.parameter_count(); ++i) {
    if (i < shape.b1_offset())
      params[i] = static_cast<Scalar>(rng.uniform(-a1, a1));
    else if (i >= shape.w2_offset() && i < shape.b2_offset())
      params[i] = static_cast<Scalar>(rng.uniform(-a2, a2));
    else
      params[i] = Scalar(0);
  }
}

/// Self-contained network (shape + parameters).
template <typename Scalar>
struct Mlp {
  MlpShape shape;
  std::vector<Scalar> params;

  explicit Mlp(const MlpShape& s) : shape(s), params(s.parameter_count(), Scalar(0)) {}
  MlpView<Scalar> view() const { return MlpView<Scalar>(shape, params); }
};

/// Log-space density is clamped here before exponentiation.
inline constexpr double kMaxLogDensity = 15.0;

template <typename Scalar>
Scalar density_activation(Scalar log_density) {
  return std::exp(std::min(log_density, Scalar(kMaxLogDensity)));
}

template <typename Scalar>
Scalar density_activation_derivative(Scalar log_density) {
  return log_density > Scalar(kMaxLogDensity) ? Scalar(0) : std::exp(log_density);
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

inline MlpShape density_net_shape(std::size_t hash_features) {
  return {hash_features + kExpressionDim, kHiddenWidth, kSigmaDim};
}
inline MlpShape color_net_shape() { return {kSigmaDim + 16, kHiddenWidth, 3}; }

template <typename Scalar>
struct DensityOutput {
  std::array<Scalar, kSigmaDim> sigma_features{};
  Scalar density = Scalar(0);
};

/// Density network on one sample. Channel 0 of the output is log density.
template <typename Scalar>
DensityOutput<Scalar> density_forward(const MlpView<Scalar>& net, std::span<const Scalar> hash_features,
                                      const ExpressionCode& expression) {
  if (net.shape.out != kSigmaDim || hash_features.size() + kExpressionDim != net.shape.in)
    fail(ErrorKind::ShapeMismatch, "density net input");
  Matrix<Scalar> x(net.shape.in, 1);
  for (std::size_t i = 0; i < hash_features.size(); ++i) x(i, 0) = hash_features[i];
  for (std::size_t i = 0; i < kExpressionDim; ++i)
    x(hash_features.size() + i, 0) = static_cast<Scalar>(expression[i]);
  MlpTape<Scalar> tape;
  net.forward(x, tape);
  DensityOutput<Scalar> out;
  for (std::size_t i = 0; i < kSigmaDim; ++i) out.sigma_features[i] = tape.output(i, 0);
  out.density = density_activation(out.sigma_features[0]);
  return out;
}

template <typename Scalar>
std::array<Scalar, 3> color_forward(const MlpView<Scalar>& net, std::span<const Scalar> sigma_features,
                                    std::span<const Scalar> dir_encoding) {
  if (net.shape.out != 3 || sigma_features.size() + dir_encoding.size() != net.shape.in)
    fail(ErrorKind::ShapeMismatch, "color net input");
  Matrix<Scalar> x(net.shape.in, 1);
  for (std::size_t i = 0; i < sigma_features.size(); ++i) x(i, 0) = sigma_features[i];
  for (std::size_t i = 0; i < dir_encoding.size(); ++i) x(sigma_features.size() + i, 0) = dir_encoding[i];
  MlpTape<Scalar> tape;
  net.forward(x, tape);
  return {sigmoid(tape.output(0, 0)), sigmoid(tape.output(1, 0)), sigmoid(tape.output(2, 0))};
}

/// Tape of the joint density -> color pipeline over a batch.
template <typename Scalar>
struct FieldNetTape {
  MlpTape<Scalar> density;
  MlpTape<Scalar> color;
  Vector<Scalar> sigma;  // B, activated density
  Matrix<Scalar> rgb;    // 3 x B, activated color
};

/// Runs both networks. `density_input` is (hash features ++ expression) per
/// column and `dir_encoding` is 16 x B.
template <typename Scalar>
void field_networks_forward(const MlpView<Scalar>& density_net, const MlpView<Scalar>& color_net,
                            const Matrix<Scalar>& density_input, const Matrix<Scalar>& dir_encoding,
                            FieldNetTape<Scalar>& tape) {
  if (density_input.cols() != dir_encoding.cols()) fail(ErrorKind::ShapeMismatch, "batch sizes differ");
  density_net.forward(density_input, tape.density);
  const auto batch = density_input.cols();
  Matrix<Scalar> color_in(color_net.shape.in, batch);
  color_in.topRows(kSigmaDim) = tape.density.output;
  color_in.bottomRows(dir_encoding.rows()) = dir_encoding;
  color_net.forward(color_in, tape.color);
  tape.sigma.resize(batch);
  tape.rgb.resize(3, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    tape.sigma[b] = density_activation(tape.density.output(0, b));
    for (int c = 0; c < 3; ++c) tape.rgb(c, b) = sigmoid(tape.color.output(c, b));
  }
}

/// Backpropagates d(loss)/d(sigma) and d(loss)/d(rgb) through both nets,
/// including color -> sigma features -> density net. Returns the gradient
/// w.r.t. the density-net input (hash features ++ expression).
template <typename Scalar>
Matrix<Scalar> field_networks_backward(const MlpView<Scalar>& density_net, const MlpView<Scalar>& color_net,
                                       const FieldNetTape<Scalar>& tape, const Vector<Scalar>& d_sigma,
                                       const Matrix<Scalar>& d_rgb, std::span<Scalar> density_grad,
                                       std::span<Scalar> color_grad) {
  const auto batch = tape.sigma.size();
  if (d_sigma.size() != batch || d_rgb.cols() != batch || d_rgb.rows() != 3)
    fail(ErrorKind::TapeMismatch, "upstream gradients do not match the recorded batch");
  Matrix<Scalar> d_color_out(3, batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int c = 0; c < 3; ++c) {
      const Scalar s = tape.rgb(c, b);
      d_color_out(c, b) = d_rgb(c, b) * s * (Scalar(1) - s);
    }
  const Matrix<Scalar> d_color_in = color_net.backward(tape.color, d_color_out, color_grad);
  Matrix<Scalar> d_density_out = d_color_in.topRows(kSigmaDim);
  for (Eigen::Index b = 0; b < batch; ++b)
    d_density_out(0, b) += d_sigma[b] * density_activation_derivative(tape.density.output(0, b));
  return density_net.backward(tape.density, d_density_out, density_grad);
}

// ---------------------------------------------------------------------------
// Adam with an exponential moving average of the weights.

struct AdamConfig {
  double learning_rate = 2.5e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-15;
  double ema_decay = 0.95;
};

template <typename Scalar>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Scalar> first_moment;
  std::vector<Scalar> second_moment;
  /// EMA of the parameters; used for rendering and evaluation.
  std::vector<Scalar> shadow;

  AdamState() = default;
  AdamState(const AdamConfig& cfg, std::span<const Scalar> initial_params)
      : config(cfg),
        first_moment(initial_params.size(), Scalar(0)),
        second_moment(initial_params.size(), Scalar(0)),
        shadow(initial_params.begin(), initial_params.end()) {}
};

template <typename Scalar>
void adam_step(AdamState<Scalar>& state, std::span<Scalar> params, std::span<const Scalar> grads) {
  const std::size_t n = params.size();
  if (grads.size() != n || state.first_moment.size() != n || state.second_moment.size() != n ||
      state.shadow.size() != n)
    fail(ErrorKind::ShapeMismatch, "Adam buffers do not match parameters");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(grads[i]))
      fail(ErrorKind::NonFiniteGradient, "parameter " + std::to_string(i) + " at optimizer step " +
                                             std::to_string(state.step + 1));
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = double(state.step);
  const Scalar b1 = Scalar(c.beta1), b2 = Scalar(c.beta2);
  const Scalar corr1 = Scalar(1.0 - std::pow(c.beta1, t));
  const Scalar corr2 = Scalar(1.0 - std::pow(c.beta2, t));
  const Scalar lr = Scalar(c.learning_rate), eps = Scalar(c.epsilon);
  const Scalar decay = Scalar(c.ema_decay);
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar g = grads[i];
    Scalar& m = state.first_moment[i];
    Scalar& v = state.second_moment[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g * g;
    const Scalar m_hat = m / corr1;
    const Scalar v_hat = v / corr2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    state.shadow[i] = decay * state.shadow[i] + (Scalar(1) - decay) * params[i];
  }
}

}  // namespace dnrf
