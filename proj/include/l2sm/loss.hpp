#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "l2sm/tensor.hpp"

namespace l2sm {

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax");
  Tensor p(logits.shape());
  for (std::size_t m = 0; m < logits.extent(0); ++m) {
    auto z = logits.row(m);
    auto out = p.row(m);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      out[j] = std::exp(z[j] - mx);
      sum += out[j];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

/**
 * Mean softmax cross-entropy over a batch,
 *   L = -(1/M) sum_i log softmax(logits_i)[label_i],
 * with its gradient (softmax - onehot) / M.
 */
class SoftmaxCrossEntropy {
 public:
  double forward(const Tensor& logits, std::span<const std::size_t> labels) {
    require_rank(logits, 2, "softmax_ce_forward");
    const std::size_t M = logits.extent(0), C = logits.extent(1);
    if (labels.size() != M) {
      throw ShapeError("softmax_ce_forward: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(M) + " rows");
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (labels[m] >= C) {
        throw InvalidArgument("softmax_ce_forward: label " + std::to_string(labels[m]) + " at index " +
                              std::to_string(m) + " outside [0, " + std::to_string(C) + ")");
      }
    }
    double total = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      auto z = logits.row(m);
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - mx);
      total += std::log(sum) + mx - z[labels[m]];
    }
    probs_ = softmax(logits);
    labels_.assign(labels.begin(), labels.end());
    loss_ = total / static_cast<double>(M);
    return loss_;
  }

  Tensor backward() const {
    if (!probs_) throw StateError("softmax_ce_backward: backward called before forward");
    Tensor g = *probs_;
    const std::size_t M = g.extent(0);
    for (std::size_t m = 0; m < M; ++m) g.at(m, labels_[m]) -= 1.0;
    const double inv = 1.0 / static_cast<double>(M);
    for (double& v : g.data()) v *= inv;
    return g;
  }

  double loss() const { return loss_; }
  const Tensor& probabilities() const {
    if (!probs_) throw StateError("softmax_ce: no forward pass yet");
    return *probs_;
  }

  /// Fraction of rows whose arg-max (first on ties) equals the label.
  double accuracy() const {
    const Tensor& p = probabilities();
    std::size_t hits = 0;
    for (std::size_t m = 0; m < p.extent(0); ++m) {
      auto r = p.row(m);
      std::size_t best = 0;
      for (std::size_t j = 1; j < r.size(); ++j) {
        if (r[j] > r[best]) best = j;
      }
      hits += best == labels_[m];
    }
    return static_cast<double>(hits) / static_cast<double>(p.extent(0));
  }

 private:
  std::optional<Tensor> probs_;
  std::vector<std::size_t> labels_;
  double loss_ = 0.0;
};

}  // namespace l2sm
