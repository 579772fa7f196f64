#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "l2sm/kernels.hpp"
#include "l2sm/rng.hpp"
#include "l2sm/tensor.hpp"

namespace l2sm {

/**
 * A trainable tensor with its accumulated gradient and the per-parameter
 * learning-rate and weight-decay multipliers. lr_mult == 0 freezes it.
 */
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  double lr_mult = 1.0;
  double decay_mult = 1.0;

  Parameter() = default;
  Parameter(std::string n, Tensor v, double lr = 1.0, double decay = 1.0)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), lr_mult(lr), decay_mult(decay) {
    if (lr_mult < 0 || decay_mult < 0) throw InvalidArgument("parameter multipliers must be >= 0");
  }

  void zero_grad() { grad.fill(0.0); }
};

/// He-style Gaussian initialisation, stddev sqrt(2 / fan_in).
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

/**
 * Hand-written forward/backward layer. backward() accumulates into the
 * gradients of parameters() and returns the gradient with respect to the
 * input of the most recent forward().
 */
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  /// Hook run after each optimizer update (used for projections).
  virtual void after_update() {}
  /// Output shape (excluding batch axis) for a given per-sample input shape.
  virtual Shape output_shape(const Shape& input) const = 0;
};

namespace detail {
inline void require_cache(bool populated, const char* layer) {
  if (!populated) throw StateError(std::string(layer) + ": backward called before forward");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// L2 normalisation: y = x / ||x||_2, row-wise over an [M x D] batch.

inline constexpr double kDegenerateNorm = 1e-12;

struct NormalizedRows {
  Tensor y;
  std::vector<double> norms;
};

inline NormalizedRows l2norm_forward(const Tensor& x, double epsilon = kDegenerateNorm) {
  require_rank(x, 2, "l2norm_forward");
  NormalizedRows r{Tensor(x.shape()), std::vector<double>(x.extent(0))};
  for (std::size_t m = 0; m < x.extent(0); ++m) {
    const double n = l2_norm(x.row(m));
    if (!(n > epsilon)) {
      throw DegenerateInputError("l2norm_forward: row " + std::to_string(m) + " has norm " +
                                 std::to_string(n) + " (must exceed " + std::to_string(epsilon) +
                                 ")");
    }
    r.norms[m] = n;
    auto src = x.row(m);
    auto dst = r.y.row(m);
    for (std::size_t d = 0; d < src.size(); ++d) dst[d] = src[d] / n;
  }
  return r;
}

/**
 * dL/dx_i = sum_j dL/dy_j * dy_j/dx_i with
 *   dy_i/dx_i = (||x||^2 - x_i^2) / ||x||^3,   dy_j/dx_i = -x_i x_j / ||x||^3.
 * Summed in closed form: dL/dx_i = dL/dy_i / ||x|| - x_i (dL/dy . x) / ||x||^3.
 */
inline Tensor l2norm_backward(const Tensor& x, std::span<const double> norms, const Tensor& grad_y) {
  require_same_shape(x, grad_y, "l2norm_backward");
  if (norms.size() != x.extent(0)) throw ShapeError("l2norm_backward: norm count mismatch");
  Tensor grad_x(x.shape());
  for (std::size_t m = 0; m < x.extent(0); ++m) {
    auto xr = x.row(m);
    auto gy = grad_y.row(m);
    auto gx = grad_x.row(m);
    const double n = norms[m];
    const double n3 = n * n * n;
    const double radial = dot(gy, xr);
    for (std::size_t i = 0; i < xr.size(); ++i) gx[i] = gy[i] / n - xr[i] * radial / n3;
  }
  return grad_x;
}

class L2NormalizeLayer final : public Layer {
 public:
  explicit L2NormalizeLayer(double epsilon = kDegenerateNorm) : epsilon_(epsilon) {}

  std::string kind() const override { return "l2norm"; }

  Tensor forward(const Tensor& x) override {
    auto r = l2norm_forward(x, epsilon_);
    cached_input_ = x;
    cached_norms_ = std::move(r.norms);
    return std::move(r.y);
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(cached_input_.has_value(), "l2norm");
    return l2norm_backward(*cached_input_, cached_norms_, grad_out);
  }

  Shape output_shape(const Shape& input) const override { return input; }

  double epsilon() const { return epsilon_; }
  const std::vector<double>& cached_norms() const { return cached_norms_; }

 private:
  double epsilon_;
  std::optional<Tensor> cached_input_;
  std::vector<double> cached_norms_;
};

// ---------------------------------------------------------------------------
// Scale: z = alpha * y with a single scalar alpha.

inline constexpr double kMinAlpha = 1e-3;

inline Tensor scale_forward(const Tensor& y, double alpha) {
  if (!(alpha > 0.0)) throw InvalidArgument("scale_forward: alpha must be > 0, got " + std::to_string(alpha));
  return scaled(y, alpha);
}

struct ScaleGrads {
  Tensor grad_y;
  double grad_alpha;
};

/// dL/dy = alpha * dL/dz; dL/dalpha = sum over batch and dims of dL/dz * y (not averaged).
inline ScaleGrads scale_backward(const Tensor& y, double alpha, const Tensor& grad_z) {
  require_same_shape(y, grad_z, "scale_backward");
  ScaleGrads g{scaled(grad_z, alpha), 0.0};
  for (std::size_t i = 0; i < y.size(); ++i) g.grad_alpha += grad_z[i] * y[i];
  return g;
}

class ScaleLayer final : public Layer {
 public:
  /// Trainable alpha gets lr/decay multipliers 1; fixed alpha gets 0 for both.
  ScaleLayer(double alpha, bool trainable)
      : alpha_("scale.alpha", Tensor::vector({alpha}), trainable ? 1.0 : 0.0, trainable ? 1.0 : 0.0) {
    if (!(alpha > 0.0)) throw InvalidArgument("scale layer: alpha must be > 0, got " + std::to_string(alpha));
  }

  std::string kind() const override { return "scale"; }

  Tensor forward(const Tensor& y) override {
    cached_input_ = y;
    return scale_forward(y, alpha());
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(cached_input_.has_value(), "scale");
    auto g = scale_backward(*cached_input_, alpha(), grad_out);
    alpha_.grad[0] += g.grad_alpha;
    return std::move(g.grad_y);
  }

  std::vector<Parameter*> parameters() override { return {&alpha_}; }

  void after_update() override { alpha_.value[0] = std::max(alpha_.value[0], kMinAlpha); }

  Shape output_shape(const Shape& input) const override { return input; }

  double alpha() const { return alpha_.value[0]; }
  bool trainable() const { return alpha_.lr_mult > 0.0; }
  Parameter& alpha_param() { return alpha_; }

 private:
  Parameter alpha_;
  std::optional<Tensor> cached_input_;
};

// ---------------------------------------------------------------------------
// Fully connected: y = x W + b, W is [D_in x D_out].

class DenseLayer final : public Layer {
 public:
  DenseLayer(std::size_t in, std::size_t out, bool use_bias, Rng& rng, std::string name = "dense")
      : weight_(name + ".W", he_normal({in, out}, in, rng)) {
    if (use_bias) bias_.emplace(name + ".b", Tensor({out}));
  }

  DenseLayer(Tensor weight, std::optional<Tensor> bias, std::string name = "dense")
      : weight_(name + ".W", std::move(weight)) {
    require_rank(weight_.value, 2, "dense weight");
    if (bias) {
      if (bias->shape() != Shape{weight_.value.extent(1)}) throw ShapeError("dense: bias shape mismatch");
      bias_.emplace(name + ".b", std::move(*bias));
    }
  }

  std::string kind() const override { return "dense"; }

  Tensor forward(const Tensor& x) override {
    if (x.rank() != 2 || x.extent(1) != in_dim()) {
      throw ShapeError("dense: expected [M x " + std::to_string(in_dim()) + "] input, got " +
                       shape_str(x.shape()));
    }
    Tensor y = matmul(x, weight_.value);
    if (bias_) {
      for (std::size_t m = 0; m < y.extent(0); ++m) {
        auto r = y.row(m);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias_->value[j];
      }
    }
    cached_input_ = x;
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(cached_input_.has_value(), "dense");
    const Tensor& x = *cached_input_;
    if (grad_out.shape() != Shape{x.extent(0), out_dim()}) {
      throw ShapeError("dense backward: gradient shape " + shape_str(grad_out.shape()));
    }
    gemm(x.raw(), grad_out.raw(), weight_.grad.raw(), in_dim(), x.extent(0), out_dim(), true, false, true);
    if (bias_) {
      for (std::size_t m = 0; m < grad_out.extent(0); ++m) {
        auto r = grad_out.row(m);
        for (std::size_t j = 0; j < r.size(); ++j) bias_->grad[j] += r[j];
      }
    }
    return matmul_nt(grad_out, weight_.value);
  }

  std::vector<Parameter*> parameters() override {
    if (bias_) return {&weight_, &*bias_};
    return {&weight_};
  }

  Shape output_shape(const Shape& input) const override {
    if (shape_numel(input) != in_dim()) throw ShapeError("dense: input " + shape_str(input) + " does not flatten to " + std::to_string(in_dim()));
    return {out_dim()};
  }

  std::size_t in_dim() const { return weight_.value.extent(0); }
  std::size_t out_dim() const { return weight_.value.extent(1); }
  bool has_bias() const { return bias_.has_value(); }
  Parameter& weight() { return weight_; }
  Parameter* bias() { return bias_ ? &*bias_ : nullptr; }

 private:
  Parameter weight_;
  std::optional<Parameter> bias_;
  std::optional<Tensor> cached_input_;
};

// ---------------------------------------------------------------------------
// Convolution with per-filter bias.

class ConvLayer final : public Layer {
 public:
  ConvLayer(std::size_t in_channels, std::size_t filters, std::size_t kernel, std::size_t stride,
            std::size_t pad, Rng& rng, std::string name = "conv")
      : kernels_(name + ".W", he_normal({filters, in_channels, kernel, kernel},
                                         in_channels * kernel * kernel, rng)),
        bias_(name + ".b", Tensor({filters})),
        stride_(stride),
        pad_(pad) {}

  ConvLayer(Tensor kernels, Tensor bias, std::size_t stride, std::size_t pad, std::string name = "conv")
      : kernels_(name + ".W", std::move(kernels)), bias_(name + ".b", std::move(bias)), stride_(stride), pad_(pad) {
    require_rank(kernels_.value, 4, "conv kernels");
    if (bias_.value.shape() != Shape{kernels_.value.extent(0)}) throw ShapeError("conv: bias shape mismatch");
  }

  std::string kind() const override { return "conv"; }

  Tensor forward(const Tensor& x) override {
    Tensor y = conv2d(x, kernels_.value, stride_, pad_);
    const std::size_t F = y.extent(1), P = y.extent(2) * y.extent(3);
    for (std::size_t n = 0; n < y.extent(0); ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        double* p = y.raw() + (n * F + f) * P;
        for (std::size_t i = 0; i < P; ++i) p[i] += bias_.value[f];
      }
    }
    cached_input_ = x;
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(cached_input_.has_value(), "conv");
    add_inplace(kernels_.grad,
                conv2d_backward_kernels(*cached_input_, grad_out, kernels_.value.shape(), stride_, pad_));
    const std::size_t F = grad_out.extent(1), P = grad_out.extent(2) * grad_out.extent(3);
    for (std::size_t n = 0; n < grad_out.extent(0); ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        const double* p = grad_out.raw() + (n * F + f) * P;
        double s = 0.0;
        for (std::size_t i = 0; i < P; ++i) s += p[i];
        bias_.grad[f] += s;
      }
    }
    return conv2d_backward_input(grad_out, kernels_.value, cached_input_->shape(), stride_, pad_);
  }

  std::vector<Parameter*> parameters() override { return {&kernels_, &bias_}; }

  Shape output_shape(const Shape& input) const override {
    Shape batched{1};
    batched.insert(batched.end(), input.begin(), input.end());
    const auto g = conv_geometry(batched, kernels_.value.shape(), stride_, pad_);
    return {kernels_.value.extent(0), g.out_h, g.out_w};
  }

 private:
  Parameter kernels_;
  Parameter bias_;
  std::size_t stride_, pad_;
  std::optional<Tensor> cached_input_;
};

// ---------------------------------------------------------------------------
// PReLU with one slope per channel (axis 1 for both [M x D] and [N x C x H x W]).

inline constexpr double kPReLUInitSlope = 0.25;

class PReLULayer final : public Layer {
 public:
  explicit PReLULayer(std::size_t channels, std::string name = "prelu")
      : slopes_(name + ".slope", Tensor({channels}, kPReLUInitSlope)) {}

  PReLULayer(Tensor slopes, std::string name = "prelu") : slopes_(name + ".slope", std::move(slopes)) {
    require_rank(slopes_.value, 1, "prelu slopes");
  }

  std::string kind() const override { return "prelu"; }

  Tensor forward(const Tensor& x) override {
    check(x);
    Tensor y(x.shape());
    const std::size_t N = x.extent(0), C = channels(), inner = x.size() / (N * C);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const double a = slopes_.value[c];
        const double* src = x.raw() + (n * C + c) * inner;
        double* dst = y.raw() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] >= 0.0 ? src[i] : a * src[i];
      }
    }
    cached_input_ = x;
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(cached_input_.has_value(), "prelu");
    const Tensor& x = *cached_input_;
    require_same_shape(x, grad_out, "prelu backward");
    Tensor gx(x.shape());
    const std::size_t N = x.extent(0), C = channels(), inner = x.size() / (N * C);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const double a = slopes_.value[c];
        const double* xs = x.raw() + (n * C + c) * inner;
        const double* go = grad_out.raw() + (n * C + c) * inner;
        double* gi = gx.raw() + (n * C + c) * inner;
        double ga = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const bool pos = xs[i] >= 0.0;
          gi[i] = pos ? go[i] : a * go[i];
          ga += pos ? 0.0 : go[i] * xs[i];
        }
        slopes_.grad[c] += ga;
      }
    }
    return gx;
  }

  std::vector<Parameter*> parameters() override { return {&slopes_}; }

  Shape output_shape(const Shape& input) const override {
    if (input.empty() || input[0] != channels()) throw ShapeError("prelu: channel mismatch for " + shape_str(input));
    return input;
  }

  std::size_t channels() const { return slopes_.value.size(); }

 private:
  void check(const Tensor& x) const {
    if (x.rank() < 2 || x.extent(1) != channels()) {
      throw ShapeError("prelu: expected " + std::to_string(channels()) + " channels on axis 1, got " +
                       shape_str(x.shape()));
    }
  }

  Parameter slopes_;
  std::optional<Tensor> cached_input_;
};

// ---------------------------------------------------------------------------

class MaxPoolLayer final : public Layer {
 public:
  MaxPoolLayer(std::size_t window, std::size_t stride) : window_(window), stride_(stride) {}

  std::string kind() const override { return "maxpool"; }

  Tensor forward(const Tensor& x) override {
    auto r = maxpool2d(x, window_, stride_);
    input_shape_ = x.shape();
    argmax_ = std::move(r.argmax);
    return std::move(r.output);
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(input_shape_.has_value(), "maxpool");
    return maxpool2d_backward(grad_out, argmax_, *input_shape_);
  }

  Shape output_shape(const Shape& input) const override {
    if (input.size() != 3 || window_ > input[1] || window_ > input[2]) {
      throw ShapeError("maxpool: window does not fit input " + shape_str(input));
    }
    return {input[0], (input[1] - window_) / stride_ + 1, (input[2] - window_) / stride_ + 1};
  }

 private:
  std::size_t window_, stride_;
  std::optional<Shape> input_shape_;
  std::vector<std::size_t> argmax_;
};

class FlattenLayer final : public Layer {
 public:
  std::string kind() const override { return "flatten"; }

  Tensor forward(const Tensor& x) override {
    input_shape_ = x.shape();
    return x.reshaped({x.extent(0), x.size() / x.extent(0)});
  }

  Tensor backward(const Tensor& grad_out) override {
    detail::require_cache(input_shape_.has_value(), "flatten");
    return grad_out.reshaped(*input_shape_);
  }

  Shape output_shape(const Shape& input) const override { return {shape_numel(input)}; }

 private:
  std::optional<Shape> input_shape_;
};

}  // namespace l2sm
