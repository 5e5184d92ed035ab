#include "uqseq/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace uqseq;

namespace {

// Straight transcription of the metric definitions, one (d, t) at a time.
struct Oracle {
  double missrate, bandwidth, excess, deficit;
};

Oracle oracle(const BoundedPrediction& p, const Matrix& y) {
  const double n = static_cast<double>(y.size());
  double inside = 0, width = 0, ex = 0, de = 0;
  for (Index d = 0; d < y.rows(); ++d) {
    for (Index t = 0; t < y.cols(); ++t) {
      const double lo = p.yhat(d, t) - p.z_lower(d, t);
      const double hi = p.yhat(d, t) + p.z_upper(d, t);
      const double v = y(d, t);
      width += hi - lo;
      if (lo <= v && v <= hi) {
        inside += 1;
        ex += std::min(v - lo, hi - v);
      } else {
        de += std::min(std::abs(v - lo), std::abs(v - hi));
      }
    }
  }
  return {1.0 - inside / n, width / (2.0 * n), ex / n, de / n};
}

BoundedPrediction random_prediction(Index D, Index M, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.0, 2.0);
  BoundedPrediction p{Matrix(D, M), Matrix(D, M), Matrix(D, M)};
  for (Index i = 0; i < p.yhat.size(); ++i) {
    p.yhat.data()[i] = n01(rng);
    p.z_lower.data()[i] = u(rng);
    p.z_upper.data()[i] = u(rng);
  }
  return p;
}

Matrix random_obs(Index D, Index M, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.5);
  Matrix y(D, M);
  for (Index i = 0; i < y.size(); ++i) y.data()[i] = n(rng);
  return y;
}

BoundedPrediction worked_example() {
  Matrix z(1, 2);
  z << 1, 2;
  return BoundedPrediction::symmetric(Matrix::Zero(1, 2), z);
}

Matrix worked_obs() {
  Matrix y(1, 2);
  y << 0.5, 3.0;
  return y;
}

// Exact two-sided p over every sign pattern.
double exhaustive_p(const std::vector<double>& diff) {
  const std::size_t n = diff.size();
  double obs = 0;
  for (double d : diff) obs += d;
  obs = std::abs(obs / n);
  std::size_t count = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1 ? 1.0 : -1.0) * diff[i];
    if (std::abs(s / n) >= obs * (1 - 1e-12)) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(std::size_t{1} << n);
}

}  // namespace

TEST(Metrics, WorkedExample) {
  const auto p = worked_example();
  const auto y = worked_obs();
  EXPECT_DOUBLE_EQ(missrate(p, y), 0.5);
  EXPECT_DOUBLE_EQ(bandwidth(p), 1.5);
  EXPECT_DOUBLE_EQ(excess(p, y), 0.25);
  EXPECT_DOUBLE_EQ(deficit(p, y), 0.5);
  EXPECT_DOUBLE_EQ(core_metrics(p, y).cost(), 0.375);
}

TEST(Metrics, DeficitTakesNearestBound) {
  BoundedPrediction p{Matrix::Zero(1, 1), Matrix::Zero(1, 1), Matrix::Ones(1, 1)};
  EXPECT_DOUBLE_EQ(deficit(p, Matrix::Constant(1, 1, -2.0)), 2.0);
}

TEST(Metrics, TrivialCases) {
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(2, 3), Matrix::Constant(2, 3, 0.7));
  EXPECT_DOUBLE_EQ(missrate(p, Matrix::Zero(2, 3)), 0.0);
  EXPECT_DOUBLE_EQ(missrate(p, Matrix::Constant(2, 3, 5.0)), 1.0);
  EXPECT_DOUBLE_EQ(excess(p, Matrix::Constant(2, 3, 5.0)), 0.0);
  EXPECT_DOUBLE_EQ(bandwidth(p), 0.7);
  EXPECT_DOUBLE_EQ(deficit(p, Matrix::Zero(2, 3)), 0.0);
  // Observations exactly on a bound are covered and leave no slack.
  EXPECT_DOUBLE_EQ(missrate(p, Matrix::Constant(2, 3, 0.7)), 0.0);
  EXPECT_DOUBLE_EQ(excess(p, Matrix::Constant(2, 3, -0.7)), 0.0);
  const auto zero = BoundedPrediction::symmetric(Matrix::Zero(1, 4), Matrix::Zero(1, 4));
  EXPECT_DOUBLE_EQ(bandwidth(zero), 0.0);
}

TEST(Metrics, ShapeErrorsPropagate) {
  const auto p = worked_example();
  try {
    missrate(p, Matrix::Zero(1, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Metrics, MatchDirectSummationOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const Index D = 1 + trial % 3;
    const Index M = 1 + (trial * 7) % 20;
    const auto p = random_prediction(D, M, rng);
    const auto y = random_obs(D, M, rng);
    const auto got = core_metrics(p, y);
    const auto want = oracle(p, y);
    EXPECT_NEAR(got.missrate, want.missrate, 1e-12);
    EXPECT_NEAR(got.bandwidth, want.bandwidth, 1e-12);
    EXPECT_NEAR(got.excess, want.excess, 1e-12);
    EXPECT_NEAR(got.deficit, want.deficit, 1e-12);
  }
}

TEST(Metrics, ScalingMonotonicity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_prediction(2, 10, rng);
    const auto y = random_obs(2, 10, rng);
    const auto base = evaluate_at_scale(p, y, 1.0);
    const double up = 1.0 + 3.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double down = 1.0 / up;
    const auto wide = evaluate_at_scale(p, y, up);
    const auto narrow = evaluate_at_scale(p, y, down);
    EXPECT_LE(wide.missrate, base.missrate);
    EXPECT_LE(wide.deficit, base.deficit + 1e-15);
    EXPECT_LE(narrow.excess, base.excess + 1e-15);
    EXPECT_LE(narrow.bandwidth, base.bandwidth + 1e-15);
  }
}

TEST(Metrics, ExcessBoundedByBandwidthAndDeficitZeroIffCovered) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = random_prediction(1 + trial % 3, 1 + trial % 20, rng);
    const auto y = random_obs(p.rows(), p.cols(), rng);
    const auto m = core_metrics(p, y);
    EXPECT_LE(m.excess, m.bandwidth + 1e-15);
    EXPECT_EQ(m.deficit == 0.0, m.missrate == 0.0);
    EXPECT_GE(m.missrate, 0.0);
    EXPECT_LE(m.missrate, 1.0);
  }
}

TEST(Metrics, MissrateInvariantUnderIncreasingAffineMap) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_prediction(2, 8, rng);
    const auto y = random_obs(2, 8, rng);
    const double a = 0.25 + trial * 0.1;
    const double b = -3.0 + trial * 0.05;
    BoundedPrediction q{(a * p.yhat.array() + b).matrix(), a * p.z_lower, a * p.z_upper};
    const Matrix y2 = (a * y.array() + b).matrix();
    EXPECT_EQ(missrate(q, y2), missrate(p, y));
  }
}

TEST(BaseError, Examples) {
  Matrix yhat(1, 2), y(1, 2);
  yhat << 2, 0;
  y << 1, 1;
  EXPECT_DOUBLE_EQ(base_error(yhat, y), 1.0);
  EXPECT_DOUBLE_EQ(base_error(y, y), 0.0);
  Matrix yhat2(2, 2), y2(2, 2);
  y2 << 1, 1, 1, 1;
  yhat2 << 1, 1, 2, 0;
  EXPECT_DOUBLE_EQ(base_error(yhat2, y2), 0.5);
}

TEST(BaseError, ZeroNormRow) {
  Matrix y = Matrix::Ones(2, 3);
  y.row(1).setZero();
  try {
    base_error(Matrix::Ones(2, 3), y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroNormRow);
  }
}

TEST(RelativeGain, Examples) {
  EXPECT_DOUBLE_EQ(relative_gain(0.25, 0.5), 50.0);
  EXPECT_DOUBLE_EQ(relative_gain(0.3, 0.3), 0.0);
  EXPECT_THROW(relative_gain(0.1, 0.0), Error);
  EXPECT_THROW(relative_gain(0.1, -1.0), Error);
}

TEST(MinCost, Examples) {
  const auto p = worked_example();
  const auto y = worked_obs();
  const std::vector<double> one{1.0};
  const auto at_one = min_cost(p, y, one, false);
  EXPECT_DOUBLE_EQ(at_one.cost, 0.375);
  EXPECT_DOUBLE_EQ(at_one.scale, 1.0);
  // Candidates {0.5, 1.5}; at 1.5 both points are covered with slack {1, 0}.
  const auto best = min_cost(p, y, one, true);
  EXPECT_DOUBLE_EQ(best.cost, 0.25);
  EXPECT_DOUBLE_EQ(best.scale, 1.5);
}

TEST(MinCost, PerfectBandsCostNothing) {
  Matrix y(1, 3);
  y << 1, -2, 0.5;
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(1, 3), y.cwiseAbs());
  const std::vector<double> grid{1.0};
  const auto c = min_cost(p, y, grid);
  EXPECT_DOUBLE_EQ(c.cost, 0.0);
  EXPECT_DOUBLE_EQ(c.scale, 1.0);
}

TEST(MinCost, NoWorseThanAnyProbedScale) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_prediction(2, 12, rng);
    const auto y = random_obs(2, 12, rng);
    std::vector<double> grid;
    for (int i = 1; i <= 40; ++i) grid.push_back(0.1 * i);
    const auto best = min_cost(p, y, grid);
    for (double s : grid) EXPECT_LE(best.cost, evaluate_at_scale(p, y, s).cost());
    for (double s : candidate_scales(p, y)) EXPECT_LE(best.cost, evaluate_at_scale(p, y, s).cost());
  }
}

TEST(Permutation, IdenticalListsGiveOne) {
  const std::vector<double> a{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(paired_permutation_test(a, a, 500, 1), 1.0);
}

TEST(Permutation, SinglePairGivesOne) {
  const std::vector<double> a{3.0}, b{1.0};
  EXPECT_DOUBLE_EQ(paired_permutation_test(a, b, 100, 1), 1.0);
}

TEST(Permutation, ConstantShiftReachesSmallestAttainable) {
  std::vector<double> b(20), a(20);
  for (int i = 0; i < 20; ++i) {
    b[i] = 0.1 * i;
    a[i] = b[i] + 10.0;
  }
  const int resamples = 10000;
  const double p = paired_permutation_test(a, b, resamples, 3);
  EXPECT_DOUBLE_EQ(exhaustive_p(std::vector<double>(20, 10.0)), 2.0 / (1 << 20));
  EXPECT_LE(p, 2.0 / (1 << 19) + 1.0 / resamples);
  EXPECT_GT(p, 0.0);
}

TEST(Permutation, AgreesWithExhaustiveEnumeration) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t n = 8 + 2 * trial;
    std::vector<double> a(n), b(n), diff(n);
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = n01(rng);
      a[i] = b[i] + 0.3 + n01(rng);
      diff[i] = a[i] - b[i];
    }
    const double exact = exhaustive_p(diff);
    const int resamples = 20000;
    const double mc = paired_permutation_test(a, b, resamples, 100 + trial);
    const double sd = std::sqrt(exact * (1 - exact) / resamples);
    EXPECT_NEAR(mc, exact, 4 * sd + 2.0 / resamples) << "n=" << n;
  }
}

TEST(Permutation, Errors) {
  const std::vector<double> a{1, 2}, b{1};
  EXPECT_THROW(paired_permutation_test(a, b, 10, 1), Error);
  try {
    paired_permutation_test(a, b, 10, 1);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
}

TEST(Permutation, SeededAndReproducible) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{1.5, 1.0, 3.5, 3.0, 5.2, 5.0};
  EXPECT_EQ(paired_permutation_test(a, b, 999, 42), paired_permutation_test(a, b, 999, 42));
}

TEST(Aggregation, PooledEqualsConcatenated) {
  std::mt19937_64 rng(12);
  std::vector<BoundedPrediction> ps;
  std::vector<Matrix> ys;
  for (int i = 0; i < 5; ++i) {
    ps.push_back(random_prediction(2, 4 + i, rng));
    ys.push_back(random_obs(2, 4 + i, rng));
  }
  const auto pooled = aggregate_metrics(ps, ys, Aggregation::pooled);
  const auto direct = oracle(concat_predictions(ps), concat_columns(ys));
  EXPECT_NEAR(pooled.missrate, direct.missrate, 1e-12);
  EXPECT_NEAR(pooled.excess, direct.excess, 1e-12);
  const auto per_seq = aggregate_metrics(ps, ys, Aggregation::per_sequence);
  double mean_miss = 0;
  for (int i = 0; i < 5; ++i) mean_miss += oracle(ps[i], ys[i]).missrate / 5;
  EXPECT_NEAR(per_seq.missrate, mean_miss, 1e-12);
}

TEST(Report, JsonAndCsvColumns) {
  auto r = make_report("jms", worked_example(), worked_obs());
  r.gain_pct = 12.5;
  const auto j = r.to_json();
  for (const char* key : {"missrate", "bandwidth", "excess", "deficit", "e_base", "gain_pct"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_NE(r.csv_row().find("0.5"), std::string::npos);
}
