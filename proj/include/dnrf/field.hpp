// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/encoding.hpp"
#include "dnrf/network.hpp"

namespace dnrf {

struct FieldConfig {
  HashGridConfig grid;
  /// Initial bias of the log-density output channel.
  double density_bias_init = 0.0;
  /// Half-width of the uniform hash-table initialisation.
  double table_init_scale = 1e-4;
};

/// Where each component lives in the flat parameter vector.
struct FieldLayout {
  HashGridLayout grid;
  MlpShape density_shape;
  MlpShape color_shape;
  std::size_t hash_offset = 0;
  std::size_t density_offset = 0;
  std::size_t color_offset = 0;
  std::size_t total = 0;

  FieldLayout() = default;
  explicit FieldLayout(const HashGridConfig& config)
      : grid(config), density_shape(density_net_shape(config.output_dim())), color_shape(color_net_shape()) {
    hash_offset = 0;
    density_offset = grid.parameter_count();
    color_offset = density_offset + density_shape.parameter_count();
    total = color_offset + color_shape.parameter_count();
  }

  std::size_t hash_count() const { return grid.parameter_count(); }
  std::size_t density_count() const { return density_shape.parameter_count(); }
  std::size_t color_count() const { return color_shape.parameter_count(); }

  template <typename Scalar>
  std::span<Scalar> hash_part(std::span<Scalar> p) const { return p.subspan(hash_offset, hash_count()); }
  template <typename Scalar>
  std::span<Scalar> density_part(std::span<Scalar> p) const { return p.subspan(density_offset, density_count()); }
  template <typename Scalar>
  std::span<Scalar> color_part(std::span<Scalar> p) const { return p.subspan(color_offset, color_count()); }
};

/// Per-sample network inputs for a batch, column per sample.
template <typename Scalar>
struct FieldInputs {
  std::vector<Vec3> canonical;
  Matrix<Scalar> dir_encoding;  // 16 x B
  Matrix<Scalar> expression;    // 16 x B

  std::size_t size() const { return canonical.size(); }

  void resize(std::size_t n) {
    canonical.resize(n);
    dir_encoding.resize(kShDim, static_cast<Eigen::Index>(n));
    expression.resize(kExpressionDim, static_cast<Eigen::Index>(n));
  }

  void set(std::size_t i, const Vec3& p, const std::array<Scalar, kShDim>& dir, const ExpressionCode& e) {
    canonical[i] = p;
    for (std::size_t k = 0; k < kShDim; ++k) dir_encoding(k, i) = dir[k];
    for (std::size_t k = 0; k < kExpressionDim; ++k) expression(k, i) = static_cast<Scalar>(e[k]);
  }
};

template <typename Scalar>
struct FieldTape {
  std::vector<Vec3> canonical;
  FieldNetTape<Scalar> nets;
};

/// Read-only evaluation of a field with a given parameter vector (live or EMA).
template <typename Scalar>
class FieldView {
 public:
  using scalar_type = Scalar;

  FieldView(const FieldLayout& layout, std::span<const Scalar> params) : layout_(&layout), params_(params) {
    if (params.size() != layout.total) fail(ErrorKind::ShapeMismatch, "field parameter count");
  }

  const FieldLayout& layout() const { return *layout_; }
  std::span<const Scalar> params() const { return params_; }

  MlpView<Scalar> density_net() const {
    return MlpView<Scalar>(layout_->density_shape, layout_->density_part(params_));
  }
  MlpView<Scalar> color_net() const { return MlpView<Scalar>(layout_->color_shape, layout_->color_part(params_)); }

  Matrix<Scalar> density_input(const std::vector<Vec3>& canonical, const Matrix<Scalar>& expression) const {
    const std::size_t hash_dim = layout_->grid.output_dim();
    const auto batch = static_cast<Eigen::Index>(canonical.size());
    Matrix<Scalar> x(hash_dim + kExpressionDim, batch);
    const auto tables = layout_->hash_part(params_);
    for (Eigen::Index b = 0; b < batch; ++b) layout_->grid.encode(tables, canonical[b], x.col(b).data());
    x.bottomRows(kExpressionDim) = expression;
    return x;
  }

  void evaluate(const FieldInputs<Scalar>& in, FieldTape<Scalar>& tape) const {
    tape.canonical = in.canonical;
    field_networks_forward(density_net(), color_net(), density_input(in.canonical, in.expression),
                           in.dir_encoding, tape.nets);
  }

  /// Densities only (no color network).
  Vector<Scalar> density(const std::vector<Vec3>& canonical, const Matrix<Scalar>& expression) const {
    MlpTape<Scalar> tape;
    density_net().forward(density_input(canonical, expression), tape);
    Vector<Scalar> sigma(tape.output.cols());
    for (Eigen::Index b = 0; b < sigma.size(); ++b) sigma[b] = density_activation(tape.output(0, b));
    return sigma;
  }

  /// Accumulates the gradient of all parameters into `grad` (layout order).
  void backward(const FieldTape<Scalar>& tape, const Vector<Scalar>& d_sigma, const Matrix<Scalar>& d_rgb,
                std::span<Scalar> grad) const {
    if (grad.size() != layout_->total) fail(ErrorKind::ShapeMismatch, "field gradient size");
    const Matrix<Scalar> d_input =
        field_networks_backward(density_net(), color_net(), tape.nets, d_sigma, d_rgb,
                                layout_->density_part(grad), layout_->color_part(grad));
    const auto hash_grad = layout_->hash_part(grad);
    for (std::size_t b = 0; b < tape.canonical.size(); ++b)
      layout_->grid.backward(tape.canonical[b], d_input.col(static_cast<Eigen::Index>(b)).data(), hash_grad);
  }

 private:
  const FieldLayout* layout_;
  std::span<const Scalar> params_;
};

/// Hash grid plus density and color networks in one flat parameter vector.
template <typename Scalar>
class RadianceField {
 public:
  RadianceField() = default;
  explicit RadianceField(const FieldConfig& config)
      : config_(config), layout_(config.grid), params_(layout_.total, Scalar(0)) {}

  void initialize(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6669656c64ULL));
    std::span<Scalar> p(params_);
    init_hash_tables(layout_.hash_part(p), rng, config_.table_init_scale);
    init_mlp(layout_.density_shape, layout_.density_part(p), rng);
    init_mlp(layout_.color_shape, layout_.color_part(p), rng);
    layout_.density_part(p)[layout_.density_shape.b2_offset()] = static_cast<Scalar>(config_.density_bias_init);
  }

  const FieldConfig& config() const { return config_; }
  const FieldLayout& layout() const { return layout_; }
  std::vector<Scalar>& params() { return params_; }
  const std::vector<Scalar>& params() const { return params_; }
  FieldView<Scalar> view() const { return FieldView<Scalar>(layout_, params_); }
  FieldView<Scalar> view(std::span<const Scalar> other) const { return FieldView<Scalar>(layout_, other); }

 private:
  FieldConfig config_;
  FieldLayout layout_;
  std::vector<Scalar> params_;
};

}  // namespace dnrf
