#pragma once

// Operating points by band scaling: empirical quantile scales from
// standardized residuals, and an exhaustive search over the scales at which
// single observations sit exactly on a bound.

#include "uqseq/core.hpp"
#include "uqseq/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace uqseq {

inline constexpr double kBandFloor = 1e-6;
inline constexpr double kMinScale = 1e-12;
inline constexpr std::array<double, 3> kDefaultMissrateTargets{0.1, 0.05, 0.01};

struct CalibrationScale {
  std::vector<double> per_dimension_scale;  // empty means 1 for every dimension
  double global_scale = 1.0;
  std::string target_description;

  double factor(Index d) const {
    const double pd = per_dimension_scale.empty() ? 1.0 : per_dimension_scale[static_cast<std::size_t>(d)];
    return pd * global_scale;
  }

  nlohmann::json to_json() const {
    return {{"per_dimension_scale", per_dimension_scale},
            {"global_scale", global_scale},
            {"target_description", target_description}};
  }

  static CalibrationScale from_json(const nlohmann::json& j) {
    CalibrationScale s;
    s.per_dimension_scale = j.at("per_dimension_scale").get<std::vector<double>>();
    s.global_scale = j.at("global_scale").get<double>();
    s.target_description = j.value("target_description", "");
    return s;
  }
};

struct ZScores {
  Matrix z;  // D x M_total
};

/// Standardized residuals (y - yhat) / max(zhat, floor) of a symmetric prediction.
inline ZScores z_scores(const Matrix& y, const BoundedPrediction& p, double floor = kBandFloor) {
  require_valid(p, y);
  if (!p.is_symmetric()) fail(ErrorCode::AsymmetricInput, "z-scores need z_lower == z_upper");
  ZScores out{Matrix(y.rows(), y.cols())};
  for (Index d = 0; d < y.rows(); ++d) {
    for (Index t = 0; t < y.cols(); ++t) {
      out.z(d, t) = (y(d, t) - p.yhat(d, t)) / std::max(p.z_lower(d, t), floor);
    }
  }
  return out;
}

/// Per-dimension empirical quantile of |Z|: the smallest s such that at least
/// a fraction p of the scores satisfy |Z| <= s.
inline CalibrationScale quantile_scale(const ZScores& scores, double p) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::InvalidArgument, "coverage target must be in (0, 1)");
  CalibrationScale out;
  out.target_description = "quantile p=" + std::to_string(p);
  for (Index d = 0; d < scores.z.rows(); ++d) {
    const Index count = scores.z.cols();
    if (count == 0) fail(ErrorCode::EmptyDimension, "dimension " + std::to_string(d) + " has no scores");
    std::vector<double> a(static_cast<std::size_t>(count));
    for (Index t = 0; t < count; ++t) a[static_cast<std::size_t>(t)] = std::abs(scores.z(d, t));
    std::sort(a.begin(), a.end());
    // The 1e-9 absorbs representation error in p * count (0.9 * 5000 is not 4500 exactly).
    auto k = static_cast<Index>(std::ceil(p * static_cast<double>(count) - 1e-9));
    k = std::clamp<Index>(k, 1, count);
    out.per_dimension_scale.push_back(std::max(a[static_cast<std::size_t>(k - 1)], kMinScale));
  }
  if (scores.z.rows() == 0) fail(ErrorCode::EmptyDimension, "no dimensions");
  return out;
}

/// Multiplies both bands of dimension d by per_dimension_scale[d] * global_scale.
inline BoundedPrediction apply_scale(const BoundedPrediction& p, const CalibrationScale& s) {
  if (!s.per_dimension_scale.empty() && static_cast<Index>(s.per_dimension_scale.size()) != p.rows()) {
    fail(ErrorCode::ShapeMismatch, "one scale per output dimension");
  }
  BoundedPrediction out = p;
  for (Index d = 0; d < p.rows(); ++d) {
    const double f = s.factor(d);
    if (!(f > 0.0) || !std::isfinite(f)) fail(ErrorCode::InvalidArgument, "scale must be positive and finite");
    out.z_lower.row(d) *= f;
    out.z_upper.row(d) *= f;
  }
  return out;
}

enum class MetricKind { missrate, bandwidth, excess, deficit };

inline std::string_view to_string(MetricKind m) {
  switch (m) {
    case MetricKind::missrate: return "missrate";
    case MetricKind::bandwidth: return "bandwidth";
    case MetricKind::excess: return "excess";
    case MetricKind::deficit: return "deficit";
  }
  return "?";
}

inline double select(const CoreMetrics& m, MetricKind k) {
  switch (k) {
    case MetricKind::missrate: return m.missrate;
    case MetricKind::bandwidth: return m.bandwidth;
    case MetricKind::excess: return m.excess;
    case MetricKind::deficit: return m.deficit;
  }
  return m.missrate;
}

/// All four metrics evaluated at every candidate scale. Building it costs
/// O(K^2) for K flattened (d, t) pairs; lookups for any metric and target
/// are then O(K).
class CandidateEvaluation {
 public:
  CandidateEvaluation(const Matrix& y, const BoundedPrediction& p) {
    require_valid(p, y);
    scales_ = candidate_scales(p, y);
    if (scales_.empty()) fail(ErrorCode::AllZeroBands, "every band is zero; no candidate scale exists");
    values_.reserve(scales_.size());
    for (double s : scales_) values_.push_back(evaluate_at_scale(p, y, s));
  }

  const std::vector<double>& scales() const { return scales_; }
  const std::vector<CoreMetrics>& values() const { return values_; }

  /// Index of the candidate minimizing |rho - target|; ties keep the first.
  std::size_t best_index(MetricKind metric, double target) const {
    std::size_t best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double gap = std::abs(select(values_[i], metric) - target);
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    return best;
  }

 private:
  std::vector<double> scales_;
  std::vector<CoreMetrics> values_;
};

/// Scale search over candidate scales. Both bands share one global scale;
/// the upper bound is yhat + scale * z_upper.
inline CalibrationScale find_scale_for_metric(const Matrix& y, const BoundedPrediction& p, MetricKind metric,
                                              double target) {
  const CandidateEvaluation eval(y, p);
  CalibrationScale out;
  // A zero residual yields candidate 0; scales must stay positive.
  out.global_scale = std::max(eval.scales()[eval.best_index(metric, target)], kMinScale);
  out.target_description = std::string(to_string(metric)) + "=" + std::to_string(target);
  return out;
}

/// Candidate search followed by a dense grid: returns whichever of the two
/// gets closer to the target (candidate wins ties).
inline CalibrationScale find_scale_with_grid(const Matrix& y, const BoundedPrediction& p, MetricKind metric,
                                             double target, std::span<const double> grid) {
  CalibrationScale best = find_scale_for_metric(y, p, metric, target);
  double best_gap = std::abs(select(evaluate_at_scale(p, y, best.global_scale), metric) - target);
  for (double s : grid) {
    if (!(s > 0.0)) continue;
    const double gap = std::abs(select(evaluate_at_scale(p, y, s), metric) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best.global_scale = s;
    }
  }
  best.target_description += " (grid refined)";
  return best;
}

/// Geometric grid between lo and hi (inclusive).
inline std::vector<double> log_grid(double lo, double hi, int points) {
  if (!(lo > 0.0 && hi > lo) || points < 2) fail(ErrorCode::InvalidArgument, "bad grid specification");
  std::vector<double> g(static_cast<std::size_t>(points));
  const double step = std::log(hi / lo) / (points - 1);
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = lo * std::exp(step * i);
  return g;
}

struct OperatingPoint {
  double target_missrate = 0.0;
  double scale = 1.0;
  CoreMetrics achieved;  // on the evaluated set
};

struct OperatingPointTable {
  std::vector<OperatingPoint> points;
  CostPoint min_cost;

  /// Mean over operating points of (Excess + Deficit) / 2.
  double excess_deficit_average() const {
    double s = 0.0;
    for (const auto& p : points) s += p.achieved.cost();
    return points.empty() ? 0.0 : s / static_cast<double>(points.size());
  }

  double bandwidth_average() const {
    double s = 0.0;
    for (const auto& p : points) s += p.achieved.bandwidth;
    return points.empty() ? 0.0 : s / static_cast<double>(points.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["points"] = nlohmann::json::array();
    for (const auto& p : points) {
      j["points"].push_back({{"target_missrate", p.target_missrate},
                             {"scale", p.scale},
                             {"missrate", p.achieved.missrate},
                             {"bandwidth", p.achieved.bandwidth},
                             {"excess", p.achieved.excess},
                             {"deficit", p.achieved.deficit}});
    }
    j["min_cost"] = {{"cost", min_cost.cost}, {"scale", min_cost.scale}};
    return j;
  }
};

/// Operating points on (eval_y, eval_p) with scales found on the
/// calibration set (calib_y, calib_p). Passing the evaluation set as the
/// calibration set yields optimistic ("oracle") operating points; passing a
/// held-out set yields cross-validated ones. The minimum-cost entry is always
/// taken over the evaluated set.
inline OperatingPointTable operating_point_table(const Matrix& eval_y, const BoundedPrediction& eval_p,
                                                 const Matrix& calib_y, const BoundedPrediction& calib_p,
                                                 std::span<const double> targets = kDefaultMissrateTargets,
                                                 std::span<const double> extra_grid = {}) {
  const CandidateEvaluation calib(calib_y, calib_p);
  OperatingPointTable table;
  for (double target : targets) {
    OperatingPoint op;
    op.target_missrate = target;
    op.scale = std::max(calib.scales()[calib.best_index(MetricKind::missrate, target)], kMinScale);
    op.achieved = core_metrics(apply_scale(eval_p, CalibrationScale{{}, op.scale, ""}), eval_y);
    table.points.push_back(op);
  }
  table.min_cost = min_cost(eval_p, eval_y, extra_grid, true);
  return table;
}

/// Gains of a system's operating-point table over a reference table built
/// the same way (typically the constant band around the same base).
struct GainSummary {
  std::vector<double> deficit_gain;    // one per operating point
  std::vector<double> excess_gain;     // one per operating point
  std::vector<double> bandwidth_gain;  // one per operating point
  double min_cost_gain = 0.0;

  /// Mean of the per-operating-point Excess and Deficit gains together with
  /// the minimum-cost gain.
  double excess_deficit_average() const {
    double s = min_cost_gain;
    for (double g : deficit_gain) s += g;
    for (double g : excess_gain) s += g;
    return s / static_cast<double>(deficit_gain.size() + excess_gain.size() + 1);
  }

  double bandwidth_average() const {
    double s = 0.0;
    for (double g : bandwidth_gain) s += g;
    return bandwidth_gain.empty() ? 0.0 : s / static_cast<double>(bandwidth_gain.size());
  }

  nlohmann::json to_json() const {
    return {{"deficit_gain", deficit_gain},
            {"excess_gain", excess_gain},
            {"bandwidth_gain", bandwidth_gain},
            {"min_cost_gain", min_cost_gain},
            {"excess_deficit_average", excess_deficit_average()},
            {"bandwidth_average", bandwidth_average()}};
  }
};

// A zero reference metric with a zero system metric is a tie (0% gain);
// any other non-positive reference is an error.
inline double gain_or_tie(double system, double reference) {
  if (reference == 0.0 && system == 0.0) return 0.0;
  return relative_gain(system, reference);
}

inline GainSummary compare_tables(const OperatingPointTable& system, const OperatingPointTable& reference) {
  if (system.points.size() != reference.points.size()) fail(ErrorCode::LengthMismatch, "tables differ in OPs");
  GainSummary g;
  for (std::size_t i = 0; i < system.points.size(); ++i) {
    const auto& s = system.points[i].achieved;
    const auto& r = reference.points[i].achieved;
    g.deficit_gain.push_back(gain_or_tie(s.deficit, r.deficit));
    g.excess_gain.push_back(gain_or_tie(s.excess, r.excess));
    g.bandwidth_gain.push_back(gain_or_tie(s.bandwidth, r.bandwidth));
  }
  g.min_cost_gain = gain_or_tie(system.min_cost.cost, reference.min_cost.cost);
  return g;
}

}  // namespace uqseq
