#pragma once

// GARCH(p, q) conditional variance on base-model residuals:
//   sigma^2_t = alpha0 + sum_{i=1..q} alpha_i eps^2_{t-i} + sum_{i=1..p} beta_i sigma^2_{t-i}
// Maximum-likelihood fit by Nelder-Mead over an unconstrained
// reparameterization, multi-step forecasts, and band construction.

#include "uqseq/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace uqseq {

struct GarchParams {
  double alpha0 = 1.0;
  std::vector<double> alpha;  // q lags of eps^2
  std::vector<double> beta;   // p lags of sigma^2

  int p() const { return static_cast<int>(beta.size()); }
  int q() const { return static_cast<int>(alpha.size()); }
  double persistence() const {
    return std::accumulate(alpha.begin(), alpha.end(), 0.0) + std::accumulate(beta.begin(), beta.end(), 0.0);
  }
  double unconditional_variance() const { return alpha0 / (1.0 - persistence()); }

  bool valid() const {
    if (!(alpha0 > 0.0)) return false;
    for (double a : alpha) {
      if (!(a >= 0.0)) return false;
    }
    for (double b : beta) {
      if (!(b >= 0.0)) return false;
    }
    return persistence() < 1.0;
  }
};

/// One step of the recursion. Histories are most recent first:
/// past_eps_sq[i - 1] = eps^2_{t-i}, past_var[i - 1] = sigma^2_{t-i}.
inline double variance_step(const GarchParams& g, std::span<const double> past_eps_sq, std::span<const double> past_var) {
  if (past_eps_sq.size() < g.alpha.size() || past_var.size() < g.beta.size()) {
    fail(ErrorCode::InsufficientHistory, "GARCH(" + std::to_string(g.p()) + "," + std::to_string(g.q()) +
                                             ") step needs q squared residuals and p variances");
  }
  double v = g.alpha0;
  for (std::size_t i = 0; i < g.alpha.size(); ++i) v += g.alpha[i] * past_eps_sq[i];
  for (std::size_t i = 0; i < g.beta.size(); ++i) v += g.beta[i] * past_var[i];
  return v;
}

/// Conditional variances over a residual series; pre-sample eps^2 and
/// sigma^2 are both set to `presample`.
inline std::vector<double> conditional_variances(const GarchParams& g, std::span<const double> eps, double presample) {
  const std::size_t n = eps.size();
  const std::size_t q = g.alpha.size();
  const std::size_t p = g.beta.size();
  std::vector<double> var(n);
  for (std::size_t t = 0; t < n; ++t) {
    double v = g.alpha0;
    for (std::size_t i = 1; i <= q; ++i) v += g.alpha[i - 1] * (t >= i ? eps[t - i] * eps[t - i] : presample);
    for (std::size_t i = 1; i <= p; ++i) v += g.beta[i - 1] * (t >= i ? var[t - i] : presample);
    var[t] = v;
  }
  return var;
}

/// Gaussian log-likelihood without the constant: -1/2 sum(log s2 + e2 / s2).
inline double garch_log_likelihood(const GarchParams& g, std::span<const double> eps, double presample) {
  const auto var = conditional_variances(g, eps, presample);
  double ll = 0.0;
  for (std::size_t t = 0; t < eps.size(); ++t) ll -= 0.5 * (std::log(var[t]) + eps[t] * eps[t] / var[t]);
  return ll;
}

struct GarchFit {
  GarchParams params;
  double log_likelihood = 0.0;
  double unconditional_variance = 0.0;
  double presample = 0.0;
  std::vector<double> variance;  // fitted sigma^2 series
  bool converged = true;

  nlohmann::json to_json() const {
    return {{"p", params.p()},
            {"q", params.q()},
            {"alpha0", params.alpha0},
            {"alpha", params.alpha},
            {"beta", params.beta},
            {"loglik", log_likelihood},
            {"presample", presample},
            {"converged", converged}};
  }

  static GarchFit from_json(const nlohmann::json& j) {
    GarchFit f;
    f.params.alpha0 = j.at("alpha0").get<double>();
    f.params.alpha = j.at("alpha").get<std::vector<double>>();
    f.params.beta = j.at("beta").get<std::vector<double>>();
    if (f.params.p() != j.at("p").get<int>() || f.params.q() != j.at("q").get<int>()) {
      fail(ErrorCode::ConfigMismatch, "GARCH order does not match coefficient counts");
    }
    f.log_likelihood = j.at("loglik").get<double>();
    f.presample = j.value("presample", f.params.unconditional_variance());
    f.converged = j.value("converged", true);
    f.unconditional_variance = f.params.unconditional_variance();
    return f;
  }
};

// ---------------------------------------------------------------- Nelder-Mead

struct NelderMeadResult {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct NelderMeadOptions {
  int max_iterations = 20000;
  double f_tolerance = 1e-15;  // relative spread of simplex values
  double x_tolerance = 1e-9;
  double initial_step = 0.5;
};

/// Minimizes f with the standard reflection/expansion/contraction/shrink moves.
inline NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                    std::vector<double> x0, const NelderMeadOptions& opt = {}) {
  const std::size_t n = x0.size();
  std::vector<std::vector<double>> simplex(n + 1, x0);
  for (std::size_t i = 0; i < n; ++i) simplex[i + 1][i] += opt.initial_step;
  std::vector<double> fv(n + 1);
  for (std::size_t i = 0; i <= n; ++i) fv[i] = f(simplex[i]);

  auto point = [&](const std::vector<double>& c, const std::vector<double>& w, double t) {
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = c[k] + t * (w[k] - c[k]);
    return out;
  };

  NelderMeadResult r;
  std::vector<std::size_t> idx(n + 1);
  for (r.iterations = 0; r.iterations < opt.max_iterations; ++r.iterations) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
    const auto best = idx.front();
    const auto worst = idx.back();
    const auto second = idx[n > 0 ? n - 1 : 0];

    double spread = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      for (std::size_t k = 0; k < n; ++k) spread = std::max(spread, std::abs(simplex[i][k] - simplex[best][k]));
    }
    // Stop once the simplex has collapsed, or its values agree to round-off.
    if (spread <= opt.x_tolerance ||
        std::abs(fv[worst] - fv[best]) <= opt.f_tolerance * std::abs(fv[best])) {
      r.converged = true;
      break;
    }

    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (std::size_t k = 0; k < n; ++k) centroid[k] += simplex[i][k] / static_cast<double>(n);
    }
    const auto xr = point(centroid, simplex[worst], -1.0);
    const double fr = f(xr);
    if (fr < fv[best]) {
      const auto xe = point(centroid, simplex[worst], -2.0);
      const double fe = f(xe);
      if (fe < fr) {
        simplex[worst] = xe;
        fv[worst] = fe;
      } else {
        simplex[worst] = xr;
        fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second]) {
      simplex[worst] = xr;
      fv[worst] = fr;
      continue;
    }
    const bool outside = fr < fv[worst];
    const auto xc = point(centroid, outside ? xr : simplex[worst], 0.5);
    const double fc = f(xc);
    if (fc < (outside ? fr : fv[worst])) {
      simplex[worst] = xc;
      fv[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == best) continue;
      simplex[i] = point(simplex[best], simplex[i], 0.5);
      fv[i] = f(simplex[i]);
    }
  }
  const auto it = std::min_element(fv.begin(), fv.end());
  r.x = simplex[static_cast<std::size_t>(it - fv.begin())];
  r.value = *it;
  return r;
}

// ---------------------------------------------------------------- fitting

namespace detail {

/// theta = [log alpha0, r_1..r_{q+p}] with weights exp(r_i) / (1 + sum exp(r_j)),
/// so every coefficient is positive and their sum stays below 1.
inline GarchParams garch_from_theta(std::span<const double> theta, int p, int q) {
  GarchParams g;
  g.alpha0 = std::exp(theta[0]);
  const std::size_t k = static_cast<std::size_t>(p + q);
  double m = 0.0;
  for (std::size_t i = 0; i < k; ++i) m = std::max(m, theta[1 + i]);
  double denom = std::exp(-m);
  std::vector<double> e(k);
  for (std::size_t i = 0; i < k; ++i) {
    e[i] = std::exp(theta[1 + i] - m);
    denom += e[i];
  }
  for (int i = 0; i < q; ++i) g.alpha.push_back(e[static_cast<std::size_t>(i)] / denom);
  for (int i = 0; i < p; ++i) g.beta.push_back(e[static_cast<std::size_t>(q + i)] / denom);
  return g;
}

inline std::vector<double> theta_from_garch(const GarchParams& g) {
  const double slack = 1.0 - g.persistence();
  std::vector<double> t{std::log(g.alpha0)};
  for (double a : g.alpha) t.push_back(std::log(std::max(a, 1e-12) / slack));
  for (double b : g.beta) t.push_back(std::log(std::max(b, 1e-12) / slack));
  return t;
}

}  // namespace detail

struct GarchFitOptions {
  int restarts = 5;
  std::uint64_t seed = 0;
  NelderMeadOptions nelder_mead{};
};

/// Maximum-likelihood GARCH(p, q). The best of `restarts` seeded starts is
/// returned; `converged` is false when that start hit the iteration cap.
inline GarchFit fit_mle(std::span<const double> residuals, int p, int q, const GarchFitOptions& opt = {}) {
  if (p < 0 || q < 0) fail(ErrorCode::InvalidArgument, "GARCH orders must be >= 0");
  const std::size_t need = static_cast<std::size_t>(10 * (p + q + 1));
  if (residuals.size() < need) {
    fail(ErrorCode::SeriesTooShort, "GARCH(" + std::to_string(p) + "," + std::to_string(q) + ") needs at least " +
                                        std::to_string(need) + " residuals, got " + std::to_string(residuals.size()));
  }
  for (double e : residuals) {
    if (!std::isfinite(e)) fail(ErrorCode::NonFiniteValue, "non-finite residual");
  }
  double presample = 0.0;
  for (double e : residuals) presample += e * e;
  presample /= static_cast<double>(residuals.size());
  if (!(presample > 0.0)) fail(ErrorCode::ZeroStd, "residuals are all zero");

  auto objective = [&](const std::vector<double>& theta) {
    const auto g = detail::garch_from_theta(theta, p, q);
    const double ll = garch_log_likelihood(g, residuals, presample);
    return std::isfinite(ll) ? -ll : std::numeric_limits<double>::max();
  };

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> share(0.05, 0.9);
  std::normal_distribution<double> jitter(0.0, 0.5);
  NelderMeadResult best;
  best.value = std::numeric_limits<double>::infinity();
  const int restarts = std::max(1, opt.restarts);
  for (int r = 0; r < restarts; ++r) {
    GarchParams start;
    const double persistence = (p + q) > 0 ? (r == 0 ? 0.5 : share(rng)) : 0.0;
    for (int i = 0; i < q; ++i) start.alpha.push_back(persistence * 0.3 / q);
    for (int i = 0; i < p; ++i) start.beta.push_back(persistence * 0.7 / p);
    start.alpha0 = presample * (1.0 - start.persistence());
    auto theta = detail::theta_from_garch(start);
    if (r > 0) {
      for (auto& t : theta) t += jitter(rng);
    }
    auto res = nelder_mead(objective, theta, opt.nelder_mead);
    // A restart from the optimum tightens convergence on flat likelihoods.
    auto polish = nelder_mead(objective, res.x, [&] {
      auto o = opt.nelder_mead;
      o.initial_step = 0.05;
      return o;
    }());
    if (polish.value <= res.value) {
      polish.iterations += res.iterations;
      polish.converged = polish.converged && res.converged;
      res = std::move(polish);
    }
    if (res.value < best.value) best = std::move(res);
  }

  GarchFit fit;
  fit.params = detail::garch_from_theta(best.x, p, q);
  fit.presample = presample;
  fit.log_likelihood = -best.value;
  fit.unconditional_variance = fit.params.unconditional_variance();
  fit.variance = conditional_variances(fit.params, residuals, presample);
  fit.converged = best.converged;
  if (!fit.converged) {
    std::cerr << "warning: GARCH(" << p << "," << q << ") fit reached the iteration limit\n";
  }
  return fit;
}

/// Variance forecast for the `horizon` steps after `observed`. Inside the
/// observed window the recursion uses actual residuals; beyond it each
/// unknown eps^2 is replaced by its conditional expectation sigma^2.
inline std::vector<double> forecast(const GarchFit& fit, std::span<const double> observed, std::size_t horizon) {
  const auto& g = fit.params;
  const std::size_t lags = static_cast<std::size_t>(std::max(g.p(), g.q()));
  if (observed.size() < lags) {
    fail(ErrorCode::InsufficientHistory, "forecast needs at least max(p, q) observed residuals");
  }
  const auto var = conditional_variances(g, observed, fit.presample);
  // Most-recent-first histories, extended as the forecast proceeds.
  std::vector<double> eps_sq;
  std::vector<double> past_var;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const std::size_t t = observed.size() - 1 - i;
    eps_sq.push_back(observed[t] * observed[t]);
    past_var.push_back(var[t]);
    if (eps_sq.size() >= lags) break;
  }
  std::vector<double> out;
  out.reserve(horizon);
  for (std::size_t h = 0; h < horizon; ++h) {
    const double v = variance_step(g, eps_sq, past_var);
    out.push_back(v);
    eps_sq.insert(eps_sq.begin(), v);
    past_var.insert(past_var.begin(), v);
    if (eps_sq.size() > lags) {
      eps_sq.pop_back();
      past_var.pop_back();
    }
  }
  return out;
}

/// Band magnitudes sqrt(forecast variance) for the next `horizon` steps.
inline Vector garch_band(const GarchFit& fit, std::span<const double> residual_history, std::size_t horizon) {
  const auto var = forecast(fit, residual_history, horizon);
  Vector z(static_cast<Index>(horizon));
  for (std::size_t h = 0; h < horizon; ++h) z[static_cast<Index>(h)] = std::sqrt(var[h]);
  return z;
}

/// Symmetric GARCH bands around a 1 x horizon base prediction.
inline BoundedPrediction garch_bounds(const GarchFit& fit, std::span<const double> residual_history,
                                      const Matrix& yhat) {
  if (yhat.rows() != 1) fail(ErrorCode::ShapeMismatch, "GARCH bands cover one output dimension");
  const Vector z = garch_band(fit, residual_history, static_cast<std::size_t>(yhat.cols()));
  return BoundedPrediction::symmetric(yhat, z.transpose());
}

/// Independent fits per output dimension of a D x T residual matrix.
inline std::vector<GarchFit> fit_per_dimension(const Matrix& residuals, int p, int q, const GarchFitOptions& opt = {}) {
  std::vector<GarchFit> fits;
  for (Index d = 0; d < residuals.rows(); ++d) {
    const Vector row = residuals.row(d).transpose();
    fits.push_back(fit_mle(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), p, q, opt));
  }
  return fits;
}

}  // namespace uqseq
