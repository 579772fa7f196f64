#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "l2sm/error.hpp"

namespace l2sm {

// Idealised class geometry: C class centres on a radius-alpha hypersphere,
// pairwise at least 90 degrees apart, unit classifier weights pointing at the
// centres, no bias. Valid while C < 2D.

struct BoundQuery {
  std::size_t num_classes = 0;
  double target_prob = 0.0;
  std::optional<std::size_t> feature_dim;  // enables the C >= 2D annotation
};

struct BoundResult {
  double alpha_low = 0.0;
  std::optional<std::string> warning;
};

struct ProbCurvePoint {
  double alpha;
  double prob;
};

namespace detail {
inline void require_classes(std::size_t c) {
  if (c < 3) throw InvalidArgument("number of classes must be >= 3, got " + std::to_string(c));
}
}  // namespace detail

/// Average correct-class probability p = e^a / (e^a + C - 2), evaluated as
/// 1 / (1 + (C - 2) e^-a) so large alpha cannot overflow.
inline double avg_prob(double alpha, std::size_t num_classes) {
  detail::require_classes(num_classes);
  if (!std::isfinite(alpha)) throw InvalidArgument("alpha must be finite");
  const double log_rest = std::log(static_cast<double>(num_classes - 2)) - alpha;
  return 1.0 / (1.0 + std::exp(log_rest));
}

/// alpha_low = ln(p (C - 2) / (1 - p)).
inline BoundResult alpha_lower_bound(const BoundQuery& q) {
  detail::require_classes(q.num_classes);
  if (!(q.target_prob > 0.0 && q.target_prob < 1.0)) {
    throw InvalidArgument("target probability must lie in (0, 1), got " + std::to_string(q.target_prob));
  }
  BoundResult r;
  const double p = q.target_prob;
  r.alpha_low = std::log(p) + std::log(static_cast<double>(q.num_classes - 2)) - std::log1p(-p);
  if (q.feature_dim && q.num_classes >= 2 * *q.feature_dim) {
    r.warning = "C = " + std::to_string(q.num_classes) + " >= 2D = " + std::to_string(2 * *q.feature_dim) +
                ": classes cannot all be placed 90 degrees apart; the bound is heuristic here";
  }
  return r;
}

inline double alpha_lower_bound(std::size_t num_classes, double target_prob) {
  return alpha_lower_bound(BoundQuery{num_classes, target_prob, std::nullopt}).alpha_low;
}

inline std::vector<ProbCurvePoint> prob_curve(std::size_t num_classes, double alpha_max, std::size_t steps) {
  detail::require_classes(num_classes);
  if (steps < 2) throw InvalidArgument("prob_curve needs at least 2 steps");
  if (!(alpha_max > 0.0) || !std::isfinite(alpha_max)) throw InvalidArgument("alpha_max must be positive");
  std::vector<ProbCurvePoint> pts;
  pts.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double a = alpha_max * static_cast<double>(k) / static_cast<double>(steps - 1);
    pts.push_back({a, avg_prob(a, num_classes)});
  }
  return pts;
}

inline void write_curve_csv(std::ostream& os, const std::vector<ProbCurvePoint>& pts) {
  os << "alpha,prob\n";
  char buf[64];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", p.alpha, p.prob);
    os << buf;
  }
}

}  // namespace l2sm
