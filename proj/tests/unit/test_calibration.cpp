#include "uqseq/calibration.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace uqseq;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::Io;
}

struct Instance {
  BoundedPrediction p;
  Matrix y;
};

Instance random_instance(Index D, Index M, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.05, 2.0);
  Instance in{{Matrix(D, M), Matrix(D, M), Matrix(D, M)}, Matrix(D, M)};
  for (Index i = 0; i < in.y.size(); ++i) {
    in.p.yhat.data()[i] = n01(rng);
    in.p.z_lower.data()[i] = u(rng);
    in.p.z_upper.data()[i] = u(rng);
    in.y.data()[i] = 2.0 * n01(rng);
  }
  return in;
}

}  // namespace

TEST(ZScores, Examples) {
  const auto p = BoundedPrediction::symmetric(row({0, 1, 5}), row({4, 1, 0}));
  const auto z = z_scores(row({2, 1, 6}), p, 1e-6);
  EXPECT_DOUBLE_EQ(z.z(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(z.z(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(z.z(0, 2), 1e6);
}

TEST(ZScores, AsymmetricRejected) {
  BoundedPrediction p{row({0}), row({1}), row({2})};
  EXPECT_EQ(code_of([&] { z_scores(row({0}), p); }), ErrorCode::AsymmetricInput);
}

TEST(QuantileScale, Examples) {
  EXPECT_DOUBLE_EQ(quantile_scale(ZScores{row({-2, -1, 0, 1, 2})}, 0.8).per_dimension_scale[0], 2.0);
  EXPECT_DOUBLE_EQ(quantile_scale(ZScores{row({0.5, -3, 1})}, 0.999).per_dimension_scale[0], 3.0);
  EXPECT_DOUBLE_EQ(quantile_scale(ZScores{row({0, 0, 0})}, 0.5).per_dimension_scale[0], kMinScale);
}

TEST(QuantileScale, EmptyDimension) {
  EXPECT_EQ(code_of([] { quantile_scale(ZScores{Matrix(2, 0)}, 0.9); }), ErrorCode::EmptyDimension);
}

TEST(QuantileScale, CoverageOnCalibrationSet) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n01;
  const Index M = 5000;
  Matrix y(2, M), sigma(2, M);
  for (Index t = 0; t < M; ++t) {
    for (Index d = 0; d < 2; ++d) {
      sigma(d, t) = 0.2 + std::abs(n01(rng));
      y(d, t) = sigma(d, t) * n01(rng);
    }
  }
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(2, M), sigma);
  const auto z = z_scores(y, p);
  for (double target : {0.9, 0.95, 0.99}) {
    const auto scaled = apply_scale(p, quantile_scale(z, target));
    for (Index d = 0; d < 2; ++d) {
      const BoundedPrediction pd{scaled.yhat.row(d), scaled.z_lower.row(d), scaled.z_upper.row(d)};
      EXPECT_NEAR(missrate(pd, y.row(d)), 1.0 - target, 1.0 / M + 1e-12);
    }
  }
}

TEST(ApplyScale, Examples) {
  const auto p = BoundedPrediction::symmetric(row({7, 7}), row({1, 2}));
  const auto half = apply_scale(p, CalibrationScale{{}, 0.5, ""});
  EXPECT_EQ(half.z_lower, row({0.5, 1}));
  EXPECT_EQ(half.yhat, p.yhat);
  const auto same = apply_scale(p, CalibrationScale{{1.0}, 1.0, ""});
  EXPECT_EQ(same.z_upper, p.z_upper);
  EXPECT_EQ(code_of([&] { apply_scale(p, CalibrationScale{{1.0, 2.0}, 1.0, ""}); }), ErrorCode::ShapeMismatch);
  EXPECT_THROW(apply_scale(p, CalibrationScale{{}, 0.0, ""}), Error);
}

TEST(ApplyScale, DoublingNeverRaisesMissrate) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(2, 15, rng);
    const auto doubled = apply_scale(in.p, CalibrationScale{{}, 2.0, ""});
    EXPECT_LE(missrate(doubled, in.y), missrate(in.p, in.y));
    EXPECT_EQ(doubled.yhat, in.p.yhat);
    EXPECT_GE(doubled.z_lower.minCoeff(), 0.0);
  }
}

TEST(FindScale, HandExamples) {
  BoundedPrediction single{row({1}), row({2}), row({5})};
  for (double target : {0.0, 0.3, 1.0}) {
    EXPECT_DOUBLE_EQ(find_scale_for_metric(row({0}), single, MetricKind::missrate, target).global_scale, 0.5);
  }
  const auto p = BoundedPrediction::symmetric(row({1, 3}), row({1, 1}));
  const auto y = row({0, 0});
  EXPECT_DOUBLE_EQ(find_scale_for_metric(y, p, MetricKind::missrate, 0.0).global_scale, 3.0);
  EXPECT_DOUBLE_EQ(find_scale_for_metric(y, p, MetricKind::missrate, 1.0).global_scale, 1.0);
}

TEST(FindScale, AllZeroBands) {
  const auto p = BoundedPrediction::symmetric(row({1, 2}), row({0, 0}));
  EXPECT_EQ(code_of([&] { find_scale_for_metric(row({0, 0}), p, MetricKind::excess, 0.1); }),
            ErrorCode::AllZeroBands);
}

TEST(FindScale, UpperBandIsAdded) {
  // Observation above the prediction: the candidate uses z_upper.
  BoundedPrediction p{row({0}), row({10}), row({4})};
  EXPECT_DOUBLE_EQ(find_scale_for_metric(row({2}), p, MetricKind::missrate, 0.0).global_scale, 0.5);
}

TEST(FindScale, AttainsCandidateMinimumExhaustively) {
  std::mt19937_64 rng(17);
  const std::array kinds{MetricKind::missrate, MetricKind::bandwidth, MetricKind::excess, MetricKind::deficit};
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(1 + trial % 3, 1 + trial % 20, rng);
    const auto kind = kinds[static_cast<std::size_t>(trial) % kinds.size()];
    const double target = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double s = find_scale_for_metric(in.y, in.p, kind, target).global_scale;
    const double got = std::abs(select(evaluate_at_scale(in.p, in.y, s), kind) - target);
    for (double c : candidate_scales(in.p, in.y)) {
      EXPECT_LE(got, std::abs(select(evaluate_at_scale(in.p, in.y, c), kind) - target) + 1e-15);
    }
  }
}

TEST(FindScale, MissrateNonIncreasingOnGrid) {
  std::mt19937_64 rng(18);
  const auto grid = log_grid(0.01, 10.0, 100);
  for (int trial = 0; trial < 30; ++trial) {
    const auto in = random_instance(2, 10, rng);
    double prev = 2.0;
    for (double s : grid) {
      const double m = evaluate_at_scale(in.p, in.y, s).missrate;
      EXPECT_LE(m, prev);
      prev = m;
    }
  }
}

TEST(FindScale, EveryMissrateAttainedAtACandidate) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 30; ++trial) {
    const auto in = random_instance(1, 12, rng);
    const auto cands = candidate_scales(in.p, in.y);
    std::vector<double> attained;
    for (double c : cands) attained.push_back(evaluate_at_scale(in.p, in.y, c).missrate);
    const double lo = *std::min_element(cands.begin(), cands.end());
    for (double s : log_grid(lo, 20.0, 200)) {
      const double m = evaluate_at_scale(in.p, in.y, s).missrate;
      EXPECT_TRUE(std::any_of(attained.begin(), attained.end(), [&](double a) { return a == m; }));
    }
  }
}

TEST(OperatingPoints, ConstantBandWidthEqualsScale) {
  std::mt19937_64 rng(21);
  auto in = random_instance(1, 200, rng);
  const auto p = BoundedPrediction::symmetric(in.p.yhat, Matrix::Ones(1, 200));
  const auto table = operating_point_table(in.y, p, in.y, p);
  ASSERT_EQ(table.points.size(), 3u);
  for (const auto& op : table.points) {
    EXPECT_NEAR(op.achieved.bandwidth, op.scale, 1e-12);
    EXPECT_NEAR(op.achieved.missrate, op.target_missrate, 1.0 / 200 + 1e-12);
  }
}

TEST(OperatingPoints, PerfectBandsHaveNoDeficit) {
  const Matrix y = row({1, -2, 0.5, 3});
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(1, 4), y.cwiseAbs());
  const auto table = operating_point_table(y, p, y, p);
  for (const auto& op : table.points) EXPECT_EQ(op.achieved.deficit, 0.0);
  EXPECT_EQ(table.min_cost.cost, 0.0);
}

TEST(OperatingPoints, MinCostNoWorseThanAnyOperatingPoint) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const auto eval = random_instance(2, 50, rng);
    const auto calib = random_instance(2, 50, rng);
    const auto table = operating_point_table(eval.y, eval.p, calib.y, calib.p);
    for (const auto& op : table.points) EXPECT_LE(table.min_cost.cost, op.achieved.cost() + 1e-15);
  }
}

TEST(Gains, TableAgainstItselfIsZero) {
  std::mt19937_64 rng(23);
  const auto in = random_instance(1, 80, rng);
  const auto table = operating_point_table(in.y, in.p, in.y, in.p);
  const auto g = compare_tables(table, table);
  EXPECT_EQ(g.excess_deficit_average(), 0.0);
  EXPECT_EQ(g.bandwidth_average(), 0.0);
}

TEST(Gains, AverageOverSevenGains) {
  GainSummary g;
  g.deficit_gain = {10, 20, 30};
  g.excess_gain = {0, 0, 0};
  g.min_cost_gain = 10;
  EXPECT_DOUBLE_EQ(g.excess_deficit_average(), 70.0 / 7.0);
  EXPECT_EQ(gain_or_tie(0.0, 0.0), 0.0);
  EXPECT_THROW(gain_or_tie(1.0, 0.0), Error);
}

TEST(CalibrationScale, JsonRoundTrip) {
  CalibrationScale s{{1.5, 0.25}, 3.0, "missrate=0.1"};
  const auto back = CalibrationScale::from_json(nlohmann::json::parse(s.to_json().dump()));
  EXPECT_EQ(back.per_dimension_scale, s.per_dimension_scale);
  EXPECT_EQ(back.global_scale, s.global_scale);
  EXPECT_EQ(back.target_description, s.target_description);
  EXPECT_DOUBLE_EQ(back.factor(1), 0.75);
}
