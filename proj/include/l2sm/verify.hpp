#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "l2sm/kernels.hpp"
#include "l2sm/pairs.hpp"
#include "l2sm/tensor.hpp"

namespace l2sm {

/// Raw (unnormalised) descriptors with their ids, labels, media ids and cached norms.
struct FeatureSet {
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  std::vector<std::string> media;
  Tensor features;  // [N x D]
  std::vector<double> norms;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return features.extent(1); }
};

inline FeatureSet make_feature_set(std::vector<std::string> ids, std::vector<std::size_t> labels,
                                   std::vector<std::string> media, Tensor features) {
  require_rank(features, 2, "feature set");
  const std::size_t n = features.extent(0);
  if (ids.size() != n || labels.size() != n || media.size() != n) {
    throw ShapeError("feature set: ids/labels/media must have one entry per feature row");
  }
  FeatureSet fs{std::move(ids), std::move(labels), std::move(media), std::move(features), {}};
  fs.norms.resize(n);
  for (std::size_t i = 0; i < n; ++i) fs.norms[i] = l2_norm(fs.features.row(i));
  return fs;
}

/// Feature set whose ids and media are the row indices.
inline FeatureSet make_feature_set(Tensor features, std::vector<std::size_t> labels) {
  std::vector<std::string> ids(labels.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
  auto media = ids;
  return make_feature_set(std::move(ids), std::move(labels), std::move(media), std::move(features));
}

// ---------------------------------------------------------------------------
// Scoring

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (!(na > 1e-12) || !(nb > 1e-12)) throw DegenerateInputError("cosine_similarity: zero-norm vector");
  return dot(a, b) / (na * nb);
}

inline std::vector<double> unit(std::span<const double> v) {
  const double n = l2_norm(v);
  if (!(n > 1e-12)) throw DegenerateInputError("cannot normalise a zero-norm vector");
  std::vector<double> u(v.begin(), v.end());
  for (double& x : u) x /= n;
  return u;
}

inline std::vector<double> score_pairs(const FeatureSet& fs, const PairList& pairs) {
  std::vector<double> s(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    try {
      s[i] = cosine_similarity(fs.features.row(p.a), fs.features.row(p.b));
    } catch (const DegenerateInputError&) {
      throw DegenerateInputError("pair " + std::to_string(i) + " (" + fs.ids[p.a] + ", " + fs.ids[p.b] +
                                 ") has a zero-norm descriptor");
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// ROC / TAR@FAR / accuracy

struct RocPoint {
  double far;
  double tar;
  double threshold;  // accept when score >= threshold; +inf rejects everything
};

inline const std::vector<double>& standard_far_targets() {
  static const std::vector<double> targets{1e-4, 1e-3, 1e-2, 1e-1};
  return targets;
}

struct EvalReport;

/// One bucket-pair cell; `report` is empty when the cell lacks a genuine or an impostor pair.
struct BucketCell {
  std::size_t genuine = 0;
  std::size_t impostor = 0;
  std::shared_ptr<const EvalReport> report;
};

struct EvalReport {
  std::vector<RocPoint> roc;
  std::vector<std::pair<double, double>> tar_at_far;  // (far target, tar)
  double best_accuracy = 0.0;
  double best_threshold = 0.0;
  std::size_t genuine = 0;
  std::size_t impostor = 0;
  std::map<std::pair<int, int>, BucketCell> bucket_results;
};

/// Highest TAR over ROC points with FAR <= target (no interpolation).
inline double tar_at_far(const std::vector<RocPoint>& roc, double target) {
  double best = 0.0;
  for (const auto& p : roc) {
    if (p.far <= target) best = std::max(best, p.tar);
  }
  return best;
}

/**
 * Sweeps every distinct score as an accept threshold (score >= t), plus +inf.
 * ROC points are ordered by decreasing threshold, so FAR and TAR are non-decreasing.
 */
inline EvalReport evaluate_scores(std::span<const double> scores, const std::vector<bool>& is_same,
                                  const std::vector<double>& far_targets = standard_far_targets()) {
  if (scores.size() != is_same.size()) throw ShapeError("evaluate_scores: score/label count mismatch");
  EvalReport r;
  for (bool s : is_same) (s ? r.genuine : r.impostor)++;
  if (r.genuine == 0 || r.impostor == 0) {
    throw InvalidArgument("evaluation needs at least one genuine and one impostor pair");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  const double G = static_cast<double>(r.genuine), I = static_cast<double>(r.impostor);
  const double total = G + I;
  std::size_t ta = 0, fa = 0;
  r.roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  r.best_accuracy = I / total;
  r.best_threshold = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < order.size();) {
    const double t = scores[order[k]];
    while (k < order.size() && scores[order[k]] == t) {
      (is_same[order[k]] ? ta : fa)++;
      ++k;
    }
    r.roc.push_back({static_cast<double>(fa) / I, static_cast<double>(ta) / G, t});
    const double acc = static_cast<double>(ta + (r.impostor - fa)) / total;
    if (acc > r.best_accuracy) {
      r.best_accuracy = acc;
      r.best_threshold = t;
    }
  }
  for (double target : far_targets) r.tar_at_far.emplace_back(target, tar_at_far(r.roc, target));
  return r;
}

inline EvalReport evaluate_pairs(const FeatureSet& fs, const PairList& pairs,
                                 const std::vector<double>& far_targets = standard_far_targets()) {
  validate_pairs(pairs, fs.size());
  const auto scores = score_pairs(fs, pairs);
  std::vector<bool> same(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) same[i] = pairs[i].is_same;
  return evaluate_scores(scores, same, far_targets);
}

// ---------------------------------------------------------------------------
// Cosine vs. unit-L2 distance

struct EquivalenceResult {
  bool identity_holds = false;      // d^2 == 2 - 2s within tolerance for every pair
  bool roc_identical = false;       // (far, tar) sequences agree point for point
  double max_identity_error = 0.0;

  bool ok() const { return identity_holds && roc_identical; }
};

inline EquivalenceResult ranking_equivalence_check(const FeatureSet& fs, const PairList& pairs,
                                                   double tolerance = 1e-9) {
  EquivalenceResult r;
  std::vector<double> cos_scores(pairs.size()), neg_dist(pairs.size());
  std::vector<bool> same(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto ua = unit(fs.features.row(pairs[i].a));
    const auto ub = unit(fs.features.row(pairs[i].b));
    double d2 = 0.0;
    for (std::size_t k = 0; k < ua.size(); ++k) d2 += (ua[k] - ub[k]) * (ua[k] - ub[k]);
    const double s = cosine_similarity(fs.features.row(pairs[i].a), fs.features.row(pairs[i].b));
    r.max_identity_error = std::max(r.max_identity_error, std::abs(d2 - (2.0 - 2.0 * s)));
    cos_scores[i] = s;
    neg_dist[i] = -std::sqrt(d2);
    same[i] = pairs[i].is_same;
  }
  r.identity_holds = r.max_identity_error <= tolerance;
  const auto a = evaluate_scores(cos_scores, same).roc;
  const auto b = evaluate_scores(neg_dist, same).roc;
  r.roc_identical = a.size() == b.size() &&
                    std::equal(a.begin(), a.end(), b.begin(), [](const RocPoint& x, const RocPoint& y) {
                      return x.far == y.far && x.tar == y.tar;
                    });
  return r;
}

// ---------------------------------------------------------------------------
// Norm buckets: [0, t1) -> 1, [t1, t2) -> 2, [t2, inf) -> 3.

inline std::vector<int> norm_buckets(std::span<const double> norms, double t1, double t2) {
  if (!(t1 < t2)) throw InvalidArgument("norm_buckets: thresholds must satisfy t1 < t2");
  std::vector<int> b(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) b[i] = norms[i] < t1 ? 1 : (norms[i] < t2 ? 2 : 3);
  return b;
}

/// The six unordered bucket pairs (1-1, 1-2, 1-3, 2-2, 2-3, 3-3).
inline std::vector<std::pair<int, int>> bucket_pair_sets() {
  std::vector<std::pair<int, int>> sets;
  for (int x = 1; x <= 3; ++x) {
    for (int y = x; y <= 3; ++y) sets.emplace_back(x, y);
  }
  return sets;
}

/// Evaluates pairs split by the buckets of their two members; cells lacking
/// a genuine or impostor pair are left empty.
inline void attach_bucket_results(EvalReport& report, const FeatureSet& fs, const PairList& pairs,
                                  const std::vector<int>& buckets,
                                  const std::vector<double>& far_targets = standard_far_targets()) {
  const auto scores = score_pairs(fs, pairs);
  for (const auto& cell : bucket_pair_sets()) {
    std::vector<double> s;
    std::vector<bool> same;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      int x = buckets[pairs[i].a], y = buckets[pairs[i].b];
      if (x > y) std::swap(x, y);
      if (std::pair{x, y} != cell) continue;
      s.push_back(scores[i]);
      same.push_back(pairs[i].is_same);
    }
    BucketCell c;
    c.genuine = static_cast<std::size_t>(std::count(same.begin(), same.end(), true));
    c.impostor = same.size() - c.genuine;
    if (c.genuine > 0 && c.impostor > 0) {
      c.report = std::make_shared<const EvalReport>(evaluate_scores(s, same, far_targets));
    }
    report.bucket_results[cell] = std::move(c);
  }
}

// ---------------------------------------------------------------------------
// Template pooling

namespace detail {
/// Mean over media of the per-media mean of `row_fn(i)` descriptors.
template <typename RowFn>
std::vector<double> two_level_mean(std::size_t count, std::size_t dim, const std::vector<std::string>& media_ids,
                                   RowFn&& row_fn) {
  if (count == 0) throw InvalidArgument("pool_template: empty template");
  if (media_ids.size() != count) throw ShapeError("pool_template: one media id per descriptor required");
  std::vector<std::string> order;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::size_t>> acc;
  for (std::size_t i = 0; i < count; ++i) {
    auto [it, fresh] = acc.try_emplace(media_ids[i], std::vector<double>(dim, 0.0), 0);
    if (fresh) order.push_back(media_ids[i]);
    const auto v = row_fn(i);
    for (std::size_t k = 0; k < dim; ++k) it->second.first[k] += v[k];
    ++it->second.second;
  }
  std::vector<double> mean(dim, 0.0);
  for (const auto& m : order) {
    const auto& [sum, n] = acc.at(m);
    for (std::size_t k = 0; k < dim; ++k) mean[k] += sum[k] / static_cast<double>(n);
  }
  for (double& v : mean) v /= static_cast<double>(order.size());
  return mean;
}
}  // namespace detail

/// Unit-normalises each descriptor, averages within media, averages the
/// media means, and unit-normalises the result.
inline std::vector<double> pool_template(const Tensor& descriptors, const std::vector<std::string>& media_ids) {
  require_rank(descriptors, 2, "pool_template");
  const auto mean = detail::two_level_mean(descriptors.extent(0), descriptors.extent(1), media_ids,
                                           [&](std::size_t i) { return unit(descriptors.row(i)); });
  return unit(mean);
}

/// Norm of the two-level mean of raw descriptors; the quantity templates are bucketed by.
inline double template_norm(const Tensor& descriptors, const std::vector<std::string>& media_ids) {
  require_rank(descriptors, 2, "template_norm");
  const auto mean = detail::two_level_mean(descriptors.extent(0), descriptors.extent(1), media_ids,
                                           [&](std::size_t i) {
                                             auto r = descriptors.row(i);
                                             return std::vector<double>(r.begin(), r.end());
                                           });
  return l2_norm(mean);
}

// ---------------------------------------------------------------------------
// Angular spread

struct ClassSpread {
  std::size_t label;
  std::size_t count;
  double spread;  // radians
};

struct AngularSpreadReport {
  std::vector<ClassSpread> classes;
  double macro_average = 0.0;
  std::vector<std::string> notices;
};

/**
 * Per class: mean direction of the unit-normalised features, then the RMS of
 * the angles between each feature and that direction (deviation around the
 * mean direction, which is the zero of the angle).
 */
inline AngularSpreadReport angular_spread(const FeatureSet& fs) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < fs.size(); ++i) by_class[fs.labels[i]].push_back(i);
  AngularSpreadReport r;
  const std::size_t D = fs.dim();
  for (const auto& [label, rows] : by_class) {
    if (rows.size() < 2) {
      r.notices.push_back("class " + std::to_string(label) + " skipped: fewer than 2 samples");
      continue;
    }
    std::vector<std::vector<double>> units;
    std::vector<double> mean(D, 0.0);
    for (auto i : rows) {
      units.push_back(unit(fs.features.row(i)));
      for (std::size_t k = 0; k < D; ++k) mean[k] += units.back()[k];
    }
    if (!(l2_norm(mean) > 1e-12)) {
      r.notices.push_back("class " + std::to_string(label) + " skipped: mean direction undefined");
      continue;
    }
    mean = unit(mean);
    double sq = 0.0;
    for (const auto& u : units) {
      const double theta = std::acos(std::clamp(dot(u, mean), -1.0, 1.0));
      sq += theta * theta;
    }
    r.classes.push_back({label, rows.size(), std::sqrt(sq / static_cast<double>(rows.size()))});
  }
  if (!r.classes.empty()) {
    double s = 0.0;
    for (const auto& c : r.classes) s += c.spread;
    r.macro_average = s / static_cast<double>(r.classes.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {
inline std::string fmt9(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}
}  // namespace detail

/// CSV: id,label,media,f0,...,f{D-1}; values with 9 significant digits.
inline void write_features_csv(std::ostream& os, const FeatureSet& fs) {
  os << "id,label,media";
  for (std::size_t k = 0; k < fs.dim(); ++k) os << ",f" << k;
  os << '\n';
  for (std::size_t i = 0; i < fs.size(); ++i) {
    os << fs.ids[i] << ',' << fs.labels[i] << ',' << fs.media[i];
    for (double v : fs.features.row(i)) os << ',' << detail::fmt9(v);
    os << '\n';
  }
}

inline FeatureSet read_features_csv(std::istream& is, const std::string& origin = "features") {
  std::string line;
  if (!std::getline(is, line)) throw DataError(origin + ": empty feature file");
  const auto header = detail::split(detail::strip_cr(line), ',');
  if (header.size() < 4 || header[0] != "id" || header[1] != "label" || header[2] != "media") {
    throw DataError(origin + ": header must start with id,label,media,f0");
  }
  const std::size_t D = header.size() - 3;
  std::vector<std::string> ids, media;
  std::vector<std::size_t> labels;
  std::vector<double> values;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto cols = detail::split(line, ',');
    if (cols.size() != D + 3) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected " + std::to_string(D + 3) + " columns");
    }
    try {
      ids.push_back(cols[0]);
      std::size_t used = 0;
      const long long lab = std::stoll(cols[1], &used);
      if (used != cols[1].size() || lab < 0) throw std::invalid_argument("label");
      labels.push_back(static_cast<std::size_t>(lab));
      media.push_back(cols[2]);
      for (std::size_t k = 0; k < D; ++k) {
        const double v = std::stod(cols[3 + k], &used);
        if (used != cols[3 + k].size()) throw std::invalid_argument("value");
        values.push_back(v);
      }
    } catch (const std::logic_error&) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": unparseable row");
    }
  }
  if (ids.empty()) throw DataError(origin + ": no feature rows");
  const std::size_t n = ids.size();
  return make_feature_set(std::move(ids), std::move(labels), std::move(media), Tensor({n, D}, std::move(values)));
}

/// Text pairs: one "<id_a>\t<id_b>\t<0|1>" per line.
inline void write_pairs(std::ostream& os, const FeatureSet& fs, const PairList& pairs) {
  for (const auto& p : pairs) os << fs.ids[p.a] << '\t' << fs.ids[p.b] << '\t' << (p.is_same ? 1 : 0) << '\n';
}

inline PairList read_pairs(std::istream& is, const FeatureSet& fs, const std::string& origin = "pairs") {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < fs.size(); ++i) index.emplace(fs.ids[i], i);
  PairList pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto cols = detail::split(line, '\t');
    if (cols.size() != 3 || (cols[2] != "0" && cols[2] != "1")) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected <id_a>\\t<id_b>\\t<0|1>");
    }
    PairRecord p{};
    for (int k = 0; k < 2; ++k) {
      auto it = index.find(cols[static_cast<std::size_t>(k)]);
      if (it == index.end()) {
        throw DataError(origin + ":" + std::to_string(lineno) + ": unknown id '" + cols[static_cast<std::size_t>(k)] + "'");
      }
      (k == 0 ? p.a : p.b) = it->second;
    }
    p.is_same = cols[2] == "1";
    pairs.push_back(p);
  }
  return pairs;
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "# roc\nfar,tar,threshold\n";
  for (const auto& p : r.roc) os << detail::fmt9(p.far) << ',' << detail::fmt9(p.tar) << ',' << detail::fmt9(p.threshold) << '\n';
  os << "\n# tar_at_far\nfar,tar\n";
  for (const auto& [far, tar] : r.tar_at_far) os << detail::fmt9(far) << ',' << detail::fmt9(tar) << '\n';
  os << "\n# accuracy\nbest_accuracy,threshold,genuine,impostor\n"
     << detail::fmt9(r.best_accuracy) << ',' << detail::fmt9(r.best_threshold) << ',' << r.genuine << ','
     << r.impostor << '\n';
  if (!r.bucket_results.empty()) {
    os << "\n# bucket_matrix\nset_a,set_b,genuine,impostor,best_accuracy";
    for (const auto& [far, tar] : r.tar_at_far) os << ",tar@" << detail::fmt9(far);
    os << '\n';
    for (const auto& [cell, c] : r.bucket_results) {
      os << cell.first << ',' << cell.second << ',' << c.genuine << ',' << c.impostor << ',';
      if (c.report) {
        os << detail::fmt9(c.report->best_accuracy);
        for (const auto& [far, tar] : c.report->tar_at_far) os << ',' << detail::fmt9(tar);
      } else {
        for (std::size_t k = 0; k < r.tar_at_far.size(); ++k) os << ',';
      }
      os << '\n';
    }
  }
}

inline void write_spread_csv(std::ostream& os, const AngularSpreadReport& r) {
  os << "label,count,spread\n";
  for (const auto& c : r.classes) os << c.label << ',' << c.count << ',' << detail::fmt9(c.spread) << '\n';
  os << "macro_average,," << detail::fmt9(r.macro_average) << '\n';
}

}  // namespace l2sm
