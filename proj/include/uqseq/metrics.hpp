#pragma once

// Interval quality metrics: Missrate, Bandwidth, Excess, Deficit, the base
// predictor error, relative gains against a reference system, the minimum
// Excess-Deficit cost over band scales, and a paired permutation test.

#include "uqseq/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace uqseq {

/// The four core metrics of one bounded prediction.
struct CoreMetrics {
  double missrate = 0.0;
  double bandwidth = 0.0;
  double excess = 0.0;
  double deficit = 0.0;

  double cost() const { return 0.5 * (excess + deficit); }
};

namespace detail {

// Sums over (d, t) of the band quantities with the bands multiplied by
// `scale`. Returns totals (not averages) so callers can normalize.
struct MetricSums {
  double covered = 0.0;
  double width = 0.0;
  double excess = 0.0;
  double deficit = 0.0;
};

// Coverage is decided on the ratio |delta| / band, the same expression that
// defines candidate scales, so an observation placed exactly on a bound by a
// candidate scale is covered bit for bit.
inline bool covered(double delta, double z_lower, double z_upper, double scale) {
  if (delta == 0.0) return true;
  const double band = delta > 0.0 ? z_lower : z_upper;
  if (!(band > 0.0)) return false;
  return std::abs(delta) / band <= scale;
}

inline MetricSums metric_sums(const Matrix& yhat, const Matrix& zl, const Matrix& zu, const Matrix& y,
                              Index row, double scale) {
  MetricSums s;
  for (Index t = 0; t < y.cols(); ++t) {
    const double lo = yhat(row, t) - zl(row, t) * scale;
    const double hi = yhat(row, t) + zu(row, t) * scale;
    const double obs = y(row, t);
    s.width += hi - lo;
    if (covered(yhat(row, t) - obs, zl(row, t), zu(row, t), scale)) {
      s.covered += 1.0;
      s.excess += std::max(0.0, std::min(obs - lo, hi - obs));
    } else {
      s.deficit += std::min(std::abs(obs - lo), std::abs(obs - hi));
    }
  }
  return s;
}

inline CoreMetrics from_sums(const MetricSums& s, double count) {
  return CoreMetrics{1.0 - s.covered / count, s.width / (2.0 * count), s.excess / count, s.deficit / count};
}

}  // namespace detail

/// All four metrics in one pass, with bands scaled by `scale`. Closed
/// intervals: an observation on a bound counts as covered.
inline CoreMetrics evaluate_at_scale(const BoundedPrediction& p, const Matrix& y, double scale = 1.0) {
  detail::MetricSums total;
  for (Index d = 0; d < y.rows(); ++d) {
    const auto s = detail::metric_sums(p.yhat, p.z_lower, p.z_upper, y, d, scale);
    total.covered += s.covered;
    total.width += s.width;
    total.excess += s.excess;
    total.deficit += s.deficit;
  }
  return detail::from_sums(total, static_cast<double>(y.size()));
}

/// Per-dimension metrics (each row averaged over its M steps).
inline std::vector<CoreMetrics> evaluate_per_dimension(const BoundedPrediction& p, const Matrix& y,
                                                       double scale = 1.0) {
  require_valid(p, y);
  std::vector<CoreMetrics> out;
  out.reserve(static_cast<std::size_t>(y.rows()));
  for (Index d = 0; d < y.rows(); ++d) {
    out.push_back(detail::from_sums(detail::metric_sums(p.yhat, p.z_lower, p.z_upper, y, d, scale),
                                    static_cast<double>(y.cols())));
  }
  return out;
}

/// Core metrics with optional per-dimension weights. Empty weights means
/// uniform averaging over all (d, t) pairs.
inline CoreMetrics core_metrics(const BoundedPrediction& p, const Matrix& y, std::span<const double> weights = {}) {
  require_valid(p, y);
  if (weights.empty()) return evaluate_at_scale(p, y, 1.0);
  if (static_cast<Index>(weights.size()) != y.rows()) fail(ErrorCode::ShapeMismatch, "one weight per dimension");
  const auto per_dim = evaluate_per_dimension(p, y);
  CoreMetrics out;
  double wsum = 0.0;
  for (std::size_t d = 0; d < per_dim.size(); ++d) {
    if (weights[d] < 0.0) fail(ErrorCode::InvalidArgument, "negative dimension weight");
    wsum += weights[d];
    out.missrate += weights[d] * per_dim[d].missrate;
    out.bandwidth += weights[d] * per_dim[d].bandwidth;
    out.excess += weights[d] * per_dim[d].excess;
    out.deficit += weights[d] * per_dim[d].deficit;
  }
  if (!(wsum > 0.0)) fail(ErrorCode::InvalidArgument, "dimension weights sum to zero");
  out.missrate /= wsum;
  out.bandwidth /= wsum;
  out.excess /= wsum;
  out.deficit /= wsum;
  return out;
}

inline double missrate(const BoundedPrediction& p, const Matrix& y) { return core_metrics(p, y).missrate; }
inline double bandwidth(const BoundedPrediction& p) {
  require_valid(p, p.yhat);
  return evaluate_at_scale(p, p.yhat).bandwidth;
}
inline double excess(const BoundedPrediction& p, const Matrix& y) { return core_metrics(p, y).excess; }
inline double deficit(const BoundedPrediction& p, const Matrix& y) { return core_metrics(p, y).deficit; }

/// Mean over dimensions of the relative L1 error of each row.
inline double base_error(const Matrix& yhat, const Matrix& y) {
  require_same_shape(yhat, y, "base_error");
  double total = 0.0;
  for (Index d = 0; d < y.rows(); ++d) {
    const double norm = y.row(d).lpNorm<1>();
    if (!(norm > 0.0)) fail(ErrorCode::ZeroNormRow, "row " + std::to_string(d) + " of y has zero L1 norm");
    total += (yhat.row(d) - y.row(d)).lpNorm<1>() / norm;
  }
  return total / static_cast<double>(y.rows());
}

/// Percent improvement of `m_system` over the reference `m_fixed` (lower is better).
inline double relative_gain(double m_system, double m_fixed) {
  if (!(m_fixed > 0.0)) fail(ErrorCode::NonPositiveReference, "reference metric must be positive");
  return 100.0 * (m_fixed - m_system) / m_fixed;
}

/// Scale at which the observation at each flattened (d, t) pair lies exactly
/// on its bound: delta / z_lower when yhat >= y, else -delta / z_upper.
/// Pairs whose relevant band is zero have no such scale and are skipped.
/// Order is row-major over (d, t).
inline std::vector<double> candidate_scales(const BoundedPrediction& p, const Matrix& y) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(y.size()));
  for (Index d = 0; d < y.rows(); ++d) {
    for (Index t = 0; t < y.cols(); ++t) {
      const double delta = p.yhat(d, t) - y(d, t);
      const double band = delta >= 0.0 ? p.z_lower(d, t) : p.z_upper(d, t);
      if (band > 0.0) out.push_back(std::abs(delta) / band);
    }
  }
  return out;
}

struct CostPoint {
  double cost = 0.0;
  double scale = 1.0;
};

/// Minimum of cost = (Excess + Deficit) / 2 over the given scales and, when
/// `include_candidates` is set, over every candidate scale. Ties keep the
/// first scale visited (grid first, then candidates in (d, t) order).
inline CostPoint min_cost(const BoundedPrediction& p, const Matrix& y, std::span<const double> scale_grid,
                          bool include_candidates = true) {
  require_valid(p, y);
  if (scale_grid.empty() && !include_candidates) fail(ErrorCode::InvalidArgument, "empty scale grid");
  CostPoint best{std::numeric_limits<double>::infinity(), 1.0};
  auto visit = [&](double s) {
    const double c = evaluate_at_scale(p, y, s).cost();
    if (c < best.cost) best = {c, s};
  };
  for (double s : scale_grid) {
    if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorCode::InvalidArgument, "scales must be positive and finite");
    visit(s);
  }
  if (include_candidates) {
    for (double s : candidate_scales(p, y)) visit(s);
  }
  if (!std::isfinite(best.cost)) fail(ErrorCode::AllZeroBands, "no scale could be evaluated");
  return best;
}

/// Two-sided paired permutation test on the mean of paired differences,
/// using random sign flips. p = (1 + #{|stat_perm| >= |stat_obs|}) / (1 + resamples).
inline double paired_permutation_test(std::span<const double> costs_a, std::span<const double> costs_b,
                                      int resamples, std::uint64_t seed) {
  if (costs_a.size() != costs_b.size()) fail(ErrorCode::LengthMismatch, "paired lists differ in length");
  if (costs_a.empty()) fail(ErrorCode::LengthMismatch, "paired lists are empty");
  if (resamples < 1) fail(ErrorCode::InvalidArgument, "resamples must be >= 1");
  const std::size_t n = costs_a.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = costs_a[i] - costs_b[i];
  auto mean_abs = [&](auto&& sign) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += sign(i) * diff[i];
    return std::abs(s / static_cast<double>(n));
  };
  const double observed = mean_abs([](std::size_t) { return 1.0; });
  // Relative slack so that sign patterns reproducing the observed magnitude
  // are not lost to summation-order rounding.
  const double threshold = observed * (1.0 - 1e-12);
  std::mt19937_64 rng(seed);
  std::vector<double> signs(n);
  long extreme = 0;
  for (int r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < n; ++i) signs[i] = (rng() >> 63) ? 1.0 : -1.0;
    if (mean_abs([&](std::size_t i) { return signs[i]; }) >= threshold) ++extreme;
  }
  return (1.0 + static_cast<double>(extreme)) / (1.0 + static_cast<double>(resamples));
}

/// Concatenates per-sequence predictions along time so that metrics pool
/// all (d, t) pairs.
inline BoundedPrediction concat_predictions(std::span<const BoundedPrediction> parts) {
  if (parts.empty()) fail(ErrorCode::EmptyRange, "no predictions to concatenate");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorCode::ShapeMismatch, "predictions differ in output dimension");
    cols += p.cols();
  }
  BoundedPrediction out{Matrix(rows, cols), Matrix(rows, cols), Matrix(rows, cols)};
  Index at = 0;
  for (const auto& p : parts) {
    out.yhat.middleCols(at, p.cols()) = p.yhat;
    out.z_lower.middleCols(at, p.cols()) = p.z_lower;
    out.z_upper.middleCols(at, p.cols()) = p.z_upper;
    at += p.cols();
  }
  return out;
}

inline Matrix concat_columns(std::span<const Matrix> parts) {
  if (parts.empty()) fail(ErrorCode::EmptyRange, "no matrices to concatenate");
  Index cols = 0;
  for (const auto& m : parts) {
    if (m.rows() != parts.front().rows()) fail(ErrorCode::ShapeMismatch, "row count differs");
    cols += m.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Index at = 0;
  for (const auto& m : parts) {
    out.middleCols(at, m.cols()) = m;
    at += m.cols();
  }
  return out;
}

enum class Aggregation { pooled, per_sequence };

inline std::string_view to_string(Aggregation a) { return a == Aggregation::pooled ? "pooled" : "per_sequence"; }

/// Core metrics over a set of sequences, either pooled over all (d, t)
/// pairs or averaged over per-sequence values.
inline CoreMetrics aggregate_metrics(std::span<const BoundedPrediction> preds, std::span<const Matrix> ys,
                                     Aggregation mode = Aggregation::pooled) {
  if (preds.size() != ys.size()) fail(ErrorCode::LengthMismatch, "one observation per prediction");
  if (mode == Aggregation::pooled) return core_metrics(concat_predictions(preds), concat_columns(ys));
  if (preds.empty()) fail(ErrorCode::EmptyRange, "no predictions");
  CoreMetrics out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto m = core_metrics(preds[i], ys[i]);
    out.missrate += m.missrate;
    out.bandwidth += m.bandwidth;
    out.excess += m.excess;
    out.deficit += m.deficit;
  }
  const double n = static_cast<double>(preds.size());
  out.missrate /= n;
  out.bandwidth /= n;
  out.excess /= n;
  out.deficit /= n;
  return out;
}

/// Metrics of one system on one evaluation set.
struct MetricReport {
  std::string system;
  CoreMetrics metrics;
  double e_base = 0.0;
  std::optional<double> gain_pct;
  std::vector<CoreMetrics> per_dimension;
  Aggregation aggregation = Aggregation::pooled;

  static constexpr const char* csv_header = "system,missrate,bandwidth,excess,deficit,e_base,gain_pct";

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["system"] = system;
    j["missrate"] = metrics.missrate;
    j["bandwidth"] = metrics.bandwidth;
    j["excess"] = metrics.excess;
    j["deficit"] = metrics.deficit;
    j["e_base"] = e_base;
    j["gain_pct"] = gain_pct ? nlohmann::json(*gain_pct) : nlohmann::json(nullptr);
    j["aggregation"] = std::string(to_string(aggregation));
    return j;
  }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(17);
    os << system << ',' << metrics.missrate << ',' << metrics.bandwidth << ',' << metrics.excess << ','
       << metrics.deficit << ',' << e_base << ',';
    if (gain_pct) os << *gain_pct;
    return os.str();
  }
};

inline MetricReport make_report(std::string system, const BoundedPrediction& p, const Matrix& y) {
  MetricReport r;
  r.system = std::move(system);
  r.metrics = core_metrics(p, y);
  r.per_dimension = evaluate_per_dimension(p, y);
  r.e_base = base_error(p.yhat, y);
  return r;
}

}  // namespace uqseq
