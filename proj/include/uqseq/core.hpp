#pragma once

// Shared domain types for sequence regression with uncertainty bands.
//
// Matrices are dimension-major everywhere: an output sequence is D x M
// (rows are output dimensions, columns are time steps). Input sequences are
// N x F (rows are time steps, columns are features).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uqseq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

enum class ErrorCode {
  ShapeMismatch,
  NegativeBand,
  NonFiniteValue,
  ZeroStd,
  ZeroNormRow,
  NonPositiveReference,
  LengthMismatch,
  AsymmetricInput,
  SymmetricInput,
  EmptyDimension,
  AllZeroBands,
  BetaOutOfRange,
  IndexOutOfRange,
  RateOutOfRange,
  ConfigMismatch,
  EmptyTrainingSet,
  UnknownVariant,
  RunsForNonDropoutVariant,
  InsufficientHistory,
  SeriesTooShort,
  NonConvergence,
  MissingColumn,
  UnparseableRow,
  SizesExceedTotal,
  SplitTooShort,
  InconsistentWindows,
  EmptyRange,
  InvalidArgument,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NegativeBand: return "NegativeBand";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ZeroStd: return "ZeroStd";
    case ErrorCode::ZeroNormRow: return "ZeroNormRow";
    case ErrorCode::NonPositiveReference: return "NonPositiveReference";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::AsymmetricInput: return "AsymmetricInput";
    case ErrorCode::SymmetricInput: return "SymmetricInput";
    case ErrorCode::EmptyDimension: return "EmptyDimension";
    case ErrorCode::AllZeroBands: return "AllZeroBands";
    case ErrorCode::BetaOutOfRange: return "BetaOutOfRange";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::RateOutOfRange: return "RateOutOfRange";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::UnknownVariant: return "UnknownVariant";
    case ErrorCode::RunsForNonDropoutVariant: return "RunsForNonDropoutVariant";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::SeriesTooShort: return "SeriesTooShort";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::UnparseableRow: return "UnparseableRow";
    case ErrorCode::SizesExceedTotal: return "SizesExceedTotal";
    case ErrorCode::SplitTooShort: return "SplitTooShort";
    case ErrorCode::InconsistentWindows: return "InconsistentWindows";
    case ErrorCode::EmptyRange: return "EmptyRange";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool same_shape(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
  if (!same_shape(a, b)) {
    fail(ErrorCode::ShapeMismatch,
         std::string(what) + " (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
}

/// One input sequence paired with its output sequence.
struct SequenceSample {
  Matrix inputs;   // N x F
  Matrix targets;  // D x M
  int observed_steps = 0;

  Index input_length() const { return inputs.rows(); }
  Index feature_dim() const { return inputs.cols(); }
  Index output_dim() const { return targets.rows(); }
  Index horizon() const { return targets.cols(); }
};

inline void validate_sample(const SequenceSample& s) {
  if (s.inputs.rows() < 1 || s.inputs.cols() < 1 || s.targets.rows() < 1 || s.targets.cols() < 1) {
    fail(ErrorCode::ShapeMismatch, "sample must have N, F, D, M >= 1");
  }
  if (s.observed_steps < 0 || s.observed_steps > s.targets.cols()) {
    fail(ErrorCode::InvalidArgument, "observed_steps outside [0, M]");
  }
  if (!s.inputs.allFinite() || !s.targets.allFinite()) {
    fail(ErrorCode::NonFiniteValue, "sample contains NaN or infinite entries");
  }
}

/// Base prediction with lower and upper band magnitudes. The interval is
/// [yhat - z_lower, yhat + z_upper].
struct BoundedPrediction {
  Matrix yhat;
  Matrix z_lower;
  Matrix z_upper;

  static BoundedPrediction symmetric(Matrix yhat, const Matrix& z) {
    return BoundedPrediction{std::move(yhat), z, z};
  }

  Matrix lower() const { return yhat - z_lower; }
  Matrix upper() const { return yhat + z_upper; }
  Index rows() const { return yhat.rows(); }
  Index cols() const { return yhat.cols(); }
  bool is_symmetric() const { return z_lower == z_upper; }
};

struct ResidualTarget {
  Matrix z;      // |delta|
  Matrix delta;  // yhat - y
};

/// Result of validate_bounded_prediction: either ok, or the first violation.
struct Validation {
  std::optional<ErrorCode> violation;
  std::string message;

  bool ok() const { return !violation.has_value(); }
  explicit operator bool() const { return ok(); }
};

inline Validation validate_bounded_prediction(const BoundedPrediction& p, const Matrix& y) {
  if (!same_shape(p.yhat, p.z_lower) || !same_shape(p.yhat, p.z_upper) || !same_shape(p.yhat, y)) {
    return {ErrorCode::ShapeMismatch, "yhat " + shape_str(p.yhat) + ", z_lower " + shape_str(p.z_lower) +
                                          ", z_upper " + shape_str(p.z_upper) + ", y " + shape_str(y)};
  }
  if (!p.yhat.allFinite() || !p.z_lower.allFinite() || !p.z_upper.allFinite() || !y.allFinite()) {
    return {ErrorCode::NonFiniteValue, "prediction or observation is not finite"};
  }
  if ((p.z_lower.array() < 0.0).any() || (p.z_upper.array() < 0.0).any()) {
    return {ErrorCode::NegativeBand, "band magnitudes must be nonnegative"};
  }
  return {};
}

inline void require_valid(const BoundedPrediction& p, const Matrix& y) {
  if (auto v = validate_bounded_prediction(p, y); !v) fail(*v.violation, v.message);
}

/// Per-dimension mean and standard deviation fit on the training split.
struct Standardization {
  Vector mean;
  Vector std;

  Index size() const { return mean.size(); }
};

inline void require_positive_std(const Standardization& stats) {
  if (stats.mean.size() != stats.std.size()) fail(ErrorCode::ShapeMismatch, "mean/std length differ");
  for (Index i = 0; i < stats.std.size(); ++i) {
    if (!(stats.std[i] > 0.0)) fail(ErrorCode::ZeroStd, "std of dimension " + std::to_string(i) + " is not positive");
  }
}

/// Standardizes a D x M output matrix row by row.
inline Matrix standardize(const Matrix& values, const Standardization& stats) {
  require_positive_std(stats);
  if (values.rows() != stats.size()) fail(ErrorCode::ShapeMismatch, "rows do not match statistics");
  Matrix out(values.rows(), values.cols());
  for (Index d = 0; d < values.rows(); ++d) {
    out.row(d) = (values.row(d).array() - stats.mean[d]) / stats.std[d];
  }
  return out;
}

/// Inverse of standardize: values * std + mean per output dimension (row).
inline Matrix restore_units(const Matrix& values, const Standardization& stats) {
  require_positive_std(stats);
  if (values.rows() != stats.size()) fail(ErrorCode::ShapeMismatch, "rows do not match statistics");
  Matrix out(values.rows(), values.cols());
  for (Index d = 0; d < values.rows(); ++d) {
    out.row(d) = values.row(d).array() * stats.std[d] + stats.mean[d];
  }
  return out;
}

/// Band magnitudes are scale-only: multiplied by std, no shift.
inline Matrix restore_band_units(const Matrix& bands, const Standardization& stats) {
  require_positive_std(stats);
  if (bands.rows() != stats.size()) fail(ErrorCode::ShapeMismatch, "rows do not match statistics");
  Matrix out = bands;
  for (Index d = 0; d < bands.rows(); ++d) out.row(d) *= stats.std[d];
  return out;
}

/// Train/dev/dev2/test partitions plus the training-split statistics.
struct SplitDataset {
  std::vector<SequenceSample> train;
  std::vector<SequenceSample> dev;
  std::vector<SequenceSample> dev2;
  std::vector<SequenceSample> test;
  std::optional<std::vector<SequenceSample>> test_drift;

  Standardization input_stats;   // over real-valued input columns; categorical columns carry mean 0, std 1
  Standardization output_stats;  // per output dimension
};

}  // namespace uqseq
