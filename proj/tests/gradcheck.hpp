#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>

#include "l2sm/l2sm.hpp"

namespace l2sm::testing {

inline constexpr double kStep = 1e-5;
inline constexpr double kRelTol = 1e-4;

/// |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of loss() with respect to one scalar slot.
inline double central_difference(double& slot, const std::function<double()>& loss, double h = kStep) {
  const double saved = slot;
  slot = saved + h;
  const double up = loss();
  slot = saved - h;
  const double down = loss();
  slot = saved;
  return (up - down) / (2.0 * h);
}

struct GradReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::string worst;

  void add(double analytic, double numeric, const std::string& where) {
    const double e = rel_error(analytic, numeric);
    ++checked;
    if (e > max_rel) {
      max_rel = e;
      worst = where;
    }
  }
  void merge(const GradReport& o) {
    checked += o.checked;
    if (o.max_rel > max_rel) {
      max_rel = o.max_rel;
      worst = o.worst;
    }
  }
};

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero so piecewise-linear kinks stay outside the stencil.
inline Tensor random_away_from_zero(Shape shape, Rng& rng, double margin = 1e-2) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    const double mag = rng.uniform(margin, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Distinct values spaced at least `gap` apart, randomly placed (keeps max-pool argmax stable).
inline Tensor random_distinct(Shape shape, Rng& rng, double gap = 1e-2) {
  Tensor t(std::move(shape));
  const auto perm = rng.permutation(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (static_cast<double>(perm[i]) + rng.uniform(0.0, 0.5)) * gap;
  return t;
}

/**
 * Checks a layer with the scalar probe loss sum(forward(x) * probe): the
 * analytic input and parameter gradients against central differences.
 */
inline GradReport check_layer(Layer& layer, Tensor x, Rng& rng) {
  const Tensor y0 = layer.forward(x);
  const Tensor probe = random_tensor(y0.shape(), rng);
  auto loss = [&] {
    const Tensor y = layer.forward(x);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  for (auto* p : layer.parameters()) p->zero_grad();
  layer.forward(x);
  const Tensor gx = layer.backward(probe);
  std::vector<Tensor> grads;
  for (auto* p : layer.parameters()) grads.push_back(p->grad);

  GradReport r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.add(gx[i], central_difference(x[i], loss), layer.kind() + " input[" + std::to_string(i) + "]");
  }
  auto params = layer.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t j = 0; j < params[k]->value.size(); ++j) {
      r.add(grads[k][j], central_difference(params[k]->value[j], loss),
            params[k]->name + "[" + std::to_string(j) + "]");
    }
  }
  return r;
}

/// Softmax cross-entropy gradient with respect to the logits.
inline GradReport check_softmax_ce(Tensor logits, const std::vector<std::size_t>& labels) {
  SoftmaxCrossEntropy ce;
  ce.forward(logits, labels);
  const Tensor g = ce.backward();
  auto loss = [&] {
    SoftmaxCrossEntropy probe;
    return probe.forward(logits, labels);
  };
  GradReport r;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.add(g[i], central_difference(logits[i], loss), "logits[" + std::to_string(i) + "]");
  }
  return r;
}

/**
 * normalize -> scale -> dense -> softmax-CE composed head: gradients for the
 * head input, alpha, W and b.
 */
inline GradReport check_l2_head(std::size_t batch, std::size_t dim, std::size_t classes, double alpha, Rng& rng) {
  L2NormalizeLayer norm;
  ScaleLayer scale(alpha, true);
  DenseLayer dense(dim, classes, true, rng, "head");
  Tensor x = random_tensor({batch, dim}, rng);
  for (std::size_t m = 0; m < batch; ++m) x.row(m)[0] += m % 2 ? 0.5 : -0.5;
  std::vector<std::size_t> labels(batch);
  for (auto& l : labels) l = rng.below(classes);
  // Keep logits moderate so the check is not dominated by a saturated softmax.
  for (double& w : dense.weight().value.data()) w *= 4.0 / alpha;

  auto loss = [&] {
    SoftmaxCrossEntropy ce;
    return ce.forward(dense.forward(scale.forward(norm.forward(x))), labels);
  };
  SoftmaxCrossEntropy ce;
  ce.forward(dense.forward(scale.forward(norm.forward(x))), labels);
  for (auto* p : dense.parameters()) p->zero_grad();
  scale.alpha_param().zero_grad();
  const Tensor gx = norm.backward(scale.backward(dense.backward(ce.backward())));

  GradReport r;
  for (std::size_t i = 0; i < x.size(); ++i) r.add(gx[i], central_difference(x[i], loss), "x[" + std::to_string(i) + "]");
  const double ga = scale.alpha_param().grad[0];
  r.add(ga, central_difference(scale.alpha_param().value[0], loss), "alpha");
  for (auto* p : dense.parameters()) {
    const Tensor g = p->grad;
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      r.add(g[j], central_difference(p->value[j], loss), p->name + "[" + std::to_string(j) + "]");
    }
  }
  return r;
}

}  // namespace l2sm::testing
