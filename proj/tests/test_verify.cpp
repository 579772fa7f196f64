#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "l2sm/l2sm.hpp"

using namespace l2sm;
using namespace l2sm::testing;

namespace {

EvalReport eval(const std::vector<double>& scores, const std::vector<bool>& same) {
  return evaluate_scores(scores, same);
}

}  // namespace

TEST(Cosine, Examples) {
  const std::vector<double> a{3, 4};
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 2}, std::vector<double>{2, 1}), 0.8, 1e-15);
  EXPECT_THROW(cosine_similarity(std::vector<double>{0, 0}, a), DegenerateInputError);
}

TEST(Cosine, SymmetricAndBounded) {
  Rng r(1);
  for (int t = 0; t < 500; ++t) {
    const Tensor x = random_away_from_zero({2, 1 + r.below(16)}, r);
    const double s = cosine_similarity(x.row(0), x.row(1));
    EXPECT_EQ(s, cosine_similarity(x.row(1), x.row(0)));
    EXPECT_LE(std::abs(s), 1.0 + 1e-12);
  }
}

TEST(EvaluatePairs, HandExample) {
  const auto r = evaluate_scores(std::vector<double>{0.9, 0.8, 0.7, 0.1}, {true, true, false, false},
                                 std::vector<double>{0.5});
  EXPECT_EQ(r.tar_at_far[0].second, 1.0);
  EXPECT_EQ(r.best_accuracy, 1.0);
  EXPECT_EQ(r.best_threshold, 0.8);
}

TEST(EvaluatePairs, SeparableScores) {
  const auto r = eval({0.99, 0.95, 0.9, 0.2, 0.1, -0.3}, {true, true, true, false, false, false});
  EXPECT_EQ(r.best_accuracy, 1.0);
  for (const auto& [far, tar] : r.tar_at_far) EXPECT_EQ(tar, 1.0);
}

TEST(EvaluatePairs, AllScoresEqualGivesMajorityPrior) {
  const auto r = eval({0.5, 0.5, 0.5, 0.5, 0.5}, {true, false, false, false, true});
  EXPECT_DOUBLE_EQ(r.best_accuracy, 0.6);
  const auto g = eval({0.5, 0.5, 0.5}, {true, true, false});
  EXPECT_DOUBLE_EQ(g.best_accuracy, 2.0 / 3.0);
}

TEST(EvaluatePairs, RocMonotoneAndTarAtFarNonDecreasing) {
  Rng r(2);
  for (int t = 0; t < 50; ++t) {
    auto [fs, pairs] = random_pair_set(r, 4 + r.below(60));
    const auto rep = evaluate_pairs(fs, pairs, {1e-3, 1e-2, 0.05, 0.1, 0.3, 0.6, 1.0});
    for (std::size_t i = 1; i < rep.roc.size(); ++i) {
      EXPECT_GE(rep.roc[i].far, rep.roc[i - 1].far);
      EXPECT_GE(rep.roc[i].tar, rep.roc[i - 1].tar);
    }
    EXPECT_EQ(rep.roc.back().far, 1.0);
    EXPECT_EQ(rep.roc.back().tar, 1.0);
    for (std::size_t i = 1; i < rep.tar_at_far.size(); ++i) EXPECT_GE(rep.tar_at_far[i].second, rep.tar_at_far[i - 1].second);
  }
}

TEST(EvaluatePairs, MatchesBruteForceSweep) {
  Rng r(3);
  const std::vector<double> targets{0.0, 0.1, 0.25, 0.5, 1.0};
  for (int t = 0; t < 200; ++t) {
    auto [fs, pairs] = random_pair_set(r, 2 + r.below(49));
    const auto scores = score_pairs(fs, pairs);
    std::vector<bool> same;
    for (const auto& p : pairs) same.push_back(p.is_same);
    EXPECT_TRUE(same_eval(evaluate_pairs(fs, pairs, targets), brute_force_eval(scores, same, targets)));
  }
}

TEST(EvaluatePairs, NeedsBothKinds) {
  EXPECT_THROW(eval({0.1, 0.2}, {true, true}), InvalidArgument);
  FeatureSet fs = make_feature_set(Tensor::matrix({{1, 0}, {0, 1}}), {0, 1});
  EXPECT_THROW(evaluate_pairs(fs, {{0, 1, false}}), InvalidArgument);
  EXPECT_THROW(evaluate_pairs(fs, {{0, 5, false}, {0, 0, true}}), InvalidArgument);
}

TEST(Equivalence, RandomPairs) {
  Rng r(4);
  Tensor f = random_away_from_zero({2000, 8}, r);
  std::vector<std::size_t> labels(2000, 0);
  FeatureSet fs = make_feature_set(f, labels);
  PairList pairs;
  for (std::size_t i = 0; i < 1000; ++i) pairs.push_back({2 * i, 2 * i + 1, r.uniform() < 0.5});
  const auto eq = ranking_equivalence_check(fs, pairs);
  EXPECT_TRUE(eq.identity_holds) << eq.max_identity_error;
  EXPECT_TRUE(eq.roc_identical);
}

TEST(Equivalence, IdenticalAndAntipodal) {
  FeatureSet fs = make_feature_set(Tensor::matrix({{3, 4}, {3, 4}, {-3, -4}}), {0, 0, 1});
  EXPECT_NEAR(cosine_similarity(fs.features.row(0), fs.features.row(1)), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(fs.features.row(0), fs.features.row(2)), -1.0, 1e-15);
  const auto eq = ranking_equivalence_check(fs, {{0, 1, true}, {0, 2, false}});
  EXPECT_TRUE(eq.ok());
  EXPECT_LT(eq.max_identity_error, 1e-12);
}

TEST(NormBuckets, Examples) {
  EXPECT_EQ(norm_buckets(std::vector<double>{10, 100, 200}, 90, 150), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(norm_buckets(std::vector<double>{90, 90}, 90, 150), (std::vector<int>{2, 2}));
  EXPECT_EQ(norm_buckets(std::vector<double>{150}, 90, 150), (std::vector<int>{3}));
  EXPECT_EQ(bucket_pair_sets().size(), 6u);
  EXPECT_THROW(norm_buckets(std::vector<double>{1}, 5, 5), InvalidArgument);
}

TEST(NormBuckets, SixCellsPopulated) {
  Rng r(5);
  const std::size_t n = 300;
  Tensor f({n, 2});
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = r.below(3);
    const double mag = std::array<double, 3>{50, 120, 200}[i % 3];
    const double ang = static_cast<double>(labels[i]) * 2.0 + r.uniform(-0.3, 0.3);
    f.at(i, 0) = mag * std::cos(ang);
    f.at(i, 1) = mag * std::sin(ang);
  }
  FeatureSet fs = make_feature_set(f, labels);
  const PairList pairs = generate_pairs(fs.labels, 2000, 2000, 7);
  EvalReport rep = evaluate_pairs(fs, pairs);
  attach_bucket_results(rep, fs, pairs, norm_buckets(fs.norms, 90, 150));
  ASSERT_EQ(rep.bucket_results.size(), 6u);
  std::size_t total = 0;
  for (const auto& [cell, c] : rep.bucket_results) {
    EXPECT_TRUE(c.report) << cell.first << "-" << cell.second;
    total += c.genuine + c.impostor;
  }
  EXPECT_EQ(total, pairs.size());
}

TEST(PoolTemplate, Examples) {
  const auto single = pool_template(Tensor::matrix({{3, 4}}), {"m"});
  EXPECT_NEAR(single[0], 0.6, 1e-15);
  EXPECT_NEAR(single[1], 0.8, 1e-15);

  const auto same = pool_template(Tensor::matrix({{1, 2}, {1, 2}}), {"a", "b"});
  EXPECT_NEAR(same[0], 1 / std::sqrt(5.0), 1e-15);

  const auto two = pool_template(Tensor::matrix({{1, 0}, {1, 0}, {0, 1}}), {"A", "A", "B"});
  EXPECT_NEAR(two[0], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(two[1], 1 / std::sqrt(2.0), 1e-15);
  // A per-descriptor mean would lean towards media A instead.
  EXPECT_NEAR(template_norm(Tensor::matrix({{1, 0}, {1, 0}, {0, 1}}), {"A", "A", "B"}), std::sqrt(0.5), 1e-15);
}

TEST(PoolTemplate, UnitNorm) {
  Rng r(6);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + r.below(10);
    const Tensor d = random_away_from_zero({n, 1 + r.below(16)}, r);
    std::vector<std::string> media(n);
    for (auto& m : media) m = std::to_string(r.below(3));
    const auto p = pool_template(d, media);
    EXPECT_NEAR(l2_norm(p), 1.0, 1e-9);
  }
}

TEST(AngularSpread, Examples) {
  auto collinear = make_feature_set(Tensor::matrix({{1, 1}, {2, 2}, {5, 5}}), {0, 0, 0});
  EXPECT_NEAR(angular_spread(collinear).classes.at(0).spread, 0.0, 1e-7);

  auto orth = make_feature_set(Tensor::matrix({{1, 0}, {0, 3}}), {4, 4});
  const auto rep = angular_spread(orth);
  EXPECT_NEAR(rep.classes.at(0).spread, std::numbers::pi / 4, 1e-12);
  EXPECT_NEAR(rep.macro_average, std::numbers::pi / 4, 1e-12);
}

TEST(AngularSpread, InvariantToPositiveScaling) {
  Rng r(7);
  const std::size_t n = 60;
  Tensor f = random_away_from_zero({n, 3}, r);
  std::vector<std::size_t> labels(n);
  for (auto& l : labels) l = r.below(4);
  const auto base = angular_spread(make_feature_set(f, labels));
  Tensor g = f;
  for (std::size_t i = 0; i < n; ++i) {
    const double k = i % 2 ? 7.0 : r.uniform(0.1, 10.0);
    for (double& v : g.row(i)) v *= k;
  }
  const auto scaledrep = angular_spread(make_feature_set(g, labels));
  ASSERT_EQ(base.classes.size(), scaledrep.classes.size());
  for (std::size_t c = 0; c < base.classes.size(); ++c) EXPECT_NEAR(base.classes[c].spread, scaledrep.classes[c].spread, 1e-9);
}

TEST(FileFormats, FeatureCsvRoundTrip) {
  Rng r(8);
  FeatureSet fs = make_feature_set({"x1", "x2", "x3"}, {0, 1, 1}, {"m1", "m1", "m2"}, random_tensor({3, 2}, r));
  std::ostringstream os;
  write_features_csv(os, fs);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "id,label,media,f0,f1");
  std::istringstream is(os.str());
  const FeatureSet back = read_features_csv(is);
  EXPECT_EQ(back.ids, fs.ids);
  EXPECT_EQ(back.labels, fs.labels);
  EXPECT_EQ(back.media, fs.media);
  for (std::size_t i = 0; i < fs.features.size(); ++i) EXPECT_NEAR(back.features[i], fs.features[i], 1e-8);
}

TEST(FileFormats, PairsRoundTripAndUnknownId) {
  FeatureSet fs = make_feature_set(Tensor::matrix({{1, 0}, {0, 1}, {1, 1}}), {0, 1, 0});
  const PairList pairs{{0, 2, true}, {0, 1, false}};
  std::ostringstream os;
  write_pairs(os, fs, pairs);
  EXPECT_EQ(os.str(), "0\t2\t1\n0\t1\t0\n");
  std::istringstream is(os.str());
  EXPECT_EQ(read_pairs(is, fs), pairs);
  std::istringstream bad("0\t9\t1\n");
  try {
    read_pairs(bad, fs);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'9'"), std::string::npos);
  }
}

TEST(FileFormats, ReportSections) {
  const auto r = eval({0.9, 0.1}, {true, false});
  std::ostringstream os;
  write_report_csv(os, r);
  const std::string s = os.str();
  for (const char* section : {"# roc", "# tar_at_far", "# accuracy"}) EXPECT_NE(s.find(section), std::string::npos);
  EXPECT_EQ(s.find("# bucket_matrix"), std::string::npos);
}
