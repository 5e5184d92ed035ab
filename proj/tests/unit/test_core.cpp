#include "uqseq/core.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace uqseq;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -3, double hi = 3) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
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

}  // namespace

TEST(BoundedPrediction, SymmetricHasEqualBands) {
  Matrix z(1, 3);
  z << 1, 2, 3;
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(1, 3), z);
  EXPECT_TRUE(p.is_symmetric());
  EXPECT_EQ(p.upper()(0, 2), 3.0);
  EXPECT_EQ(p.lower()(0, 1), -2.0);
}

TEST(Validation, ShapeMismatchReported) {
  BoundedPrediction p{Matrix::Zero(1, 3), Matrix::Zero(1, 3), Matrix::Zero(1, 2)};
  const auto v = validate_bounded_prediction(p, Matrix::Zero(1, 3));
  ASSERT_FALSE(v.ok());
  EXPECT_EQ(*v.violation, ErrorCode::ShapeMismatch);
}

TEST(Validation, NegativeBandReported) {
  Matrix zl = Matrix::Ones(2, 2);
  zl(1, 0) = -0.5;
  BoundedPrediction p{Matrix::Zero(2, 2), zl, Matrix::Ones(2, 2)};
  const auto v = validate_bounded_prediction(p, Matrix::Zero(2, 2));
  ASSERT_FALSE(v.ok());
  EXPECT_EQ(*v.violation, ErrorCode::NegativeBand);
}

TEST(Validation, NonFiniteReported) {
  Matrix y = Matrix::Zero(1, 2);
  y(0, 1) = std::numeric_limits<double>::quiet_NaN();
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(1, 2), Matrix::Ones(1, 2));
  const auto v = validate_bounded_prediction(p, y);
  ASSERT_FALSE(v.ok());
  EXPECT_EQ(*v.violation, ErrorCode::NonFiniteValue);
  EXPECT_EQ(code_of([&] { require_valid(p, y); }), ErrorCode::NonFiniteValue);
}

TEST(Validation, ZeroBandsAreValid) {
  const auto p = BoundedPrediction::symmetric(Matrix::Zero(2, 4), Matrix::Zero(2, 4));
  EXPECT_TRUE(validate_bounded_prediction(p, Matrix::Ones(2, 4)).ok());
}

TEST(Standardization, RoundTripProperty) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Index D = 1 + trial % 4;
    const Matrix y = random_matrix(D, 17, rng, -100, 100);
    Standardization s{random_matrix(D, 1, rng).col(0), random_matrix(D, 1, rng, 0.1, 5).col(0)};
    const Matrix back = restore_units(standardize(y, s), s);
    EXPECT_LT((back - y).cwiseAbs().maxCoeff(), 1e-12 * 100);
  }
}

TEST(Standardization, BandsScaleOnly) {
  Standardization s{Vector::Constant(1, 10.0), Vector::Constant(1, 2.0)};
  Matrix z(1, 2);
  z << 0.5, 0.0;
  const Matrix out = restore_band_units(z, s);
  EXPECT_EQ(out(0, 0), 1.0);
  EXPECT_EQ(out(0, 1), 0.0);
}

TEST(Standardization, ZeroStdRejected) {
  Standardization s{Vector::Zero(2), Vector::Ones(2)};
  s.std[1] = 0.0;
  EXPECT_EQ(code_of([&] { standardize(Matrix::Zero(2, 3), s); }), ErrorCode::ZeroStd);
}

TEST(SequenceSample, ValidateRejectsBadPrefix) {
  SequenceSample s{Matrix::Zero(4, 2), Matrix::Zero(1, 4), 5};
  EXPECT_EQ(code_of([&] { validate_sample(s); }), ErrorCode::InvalidArgument);
  s.observed_steps = 4;
  EXPECT_NO_THROW(validate_sample(s));
}

TEST(Errors, CodesHaveNames) {
  EXPECT_EQ(to_string(ErrorCode::AllZeroBands), "AllZeroBands");
  const Error e(ErrorCode::SplitTooShort, "x");
  EXPECT_EQ(e.code(), ErrorCode::SplitTooShort);
}
