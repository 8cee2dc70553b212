#pragma once
// Model fitting: penalized IRLS for Tweedie log-link models with exposure
// weight schemes, ridge selection by generalized cross-validation, and the
// iterative curve-weighted scheme with an oscillation guard.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexrate/portfolio.hpp"
#include "flexrate/spline.hpp"
#include "flexrate/tweedie.hpp"

namespace flexrate {

struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Traditional schemes keep the proportional mean mu = t*exp(x'b); flexible
// schemes estimate a smooth exposure curve. The weight function is what
// distinguishes members of each family.
enum class WeightScheme { TraditionalOffset, TraditionalRatio, Cwm, Gwm, Ewm };

inline bool is_flexible(WeightScheme s) {
  return s == WeightScheme::Cwm || s == WeightScheme::Gwm || s == WeightScheme::Ewm;
}

inline std::string to_string(WeightScheme s) {
  switch (s) {
    case WeightScheme::TraditionalOffset:
      return "offset";
    case WeightScheme::TraditionalRatio:
      return "ratio";
    case WeightScheme::Cwm:
      return "cwm";
    case WeightScheme::Gwm:
      return "gwm";
    case WeightScheme::Ewm:
      return "ewm";
  }
  return "ewm";
}

inline WeightScheme parse_scheme(const std::string& s) {
  if (s == "offset") return WeightScheme::TraditionalOffset;
  if (s == "ratio") return WeightScheme::TraditionalRatio;
  if (s == "cwm") return WeightScheme::Cwm;
  if (s == "gwm") return WeightScheme::Gwm;
  if (s == "ewm") return WeightScheme::Ewm;
  throw std::invalid_argument("unknown weight scheme: " + s);
}

struct FitSpec {
  WeightScheme scheme = WeightScheme::Ewm;
  double power = 1.42;
  KnotGrid grid = KnotGrid::default_grid();
  // Curvature penalty weight; unset selects it by GCV on the training set.
  std::optional<double> ridge_lambda;
  int max_iter = 50;
  // Convergence tolerance: relative penalized-deviance change for IRLS fits,
  // relative knot-wise curve change for the iterative scheme's outer loop.
  double tol = 1e-9;

  void validate() const {
    if (!(power > 1.0 && power < 2.0))
      throw std::invalid_argument("fit: power must lie strictly inside (1,2)");
    if (max_iter < 1) throw std::invalid_argument("fit: max_iter must be at least 1");
    if (!(tol > 0.0)) throw std::invalid_argument("fit: tol must be positive");
    if (ridge_lambda && !(*ridge_lambda >= 0.0))
      throw std::invalid_argument("fit: ridge_lambda must be nonnegative");
    grid.validate();
  }
};

// How predictions combine beta with the exposure dimension.
enum class MeanStructure {
  TraditionalIdentity,  // mu = t * exp(beta'[1,x])
  Spline,               // mu = exp(beta_0 + beta_cov'x + log-curve(t))
  FixedSchedule,        // mu = gamma_sched(t) * exp(beta'[1,x])
};

struct GwmIteration {
  int iteration = 0;
  ExposureCurve curve;            // snapshot s_k
  double max_weight_change = 0;   // knot-wise, vs previous iteration (NaN for s_1)
  double max_curve_change = 0;    // relative knot-wise metric used for stopping
};

struct IrlsIteration {
  int iteration = 0;
  double penalized_deviance = 0;
  int step_halvings = 0;
};

struct FitResult {
  WeightScheme scheme = WeightScheme::Ewm;
  double power = 1.42;
  MeanStructure mean_structure = MeanStructure::TraditionalIdentity;
  // intercept, x1..x5, bms (bms applies to the centered level - 100).
  Eigen::VectorXd beta;
  // Estimated exposure curve gamma-hat, normalized to 1 at the last knot;
  // identity for traditional schemes.
  ExposureCurve curve;
  // Log-scale curve values at the knots (last pinned to 0). Predictions for
  // spline fits interpolate on this scale, matching the fitted mean exactly.
  Eigen::VectorXd log_curve;
  // Piecewise-linear exposure schedule for offset refits (empty otherwise).
  std::vector<double> schedule_t, schedule_gamma;
  double lambda = 0.0;  // curvature penalty actually used
  double deviance_train = 0.0;
  bool converged = false;
  std::string diagnostic;
  std::vector<GwmIteration> trace;  // outer-iteration curve snapshots
  std::vector<IrlsIteration> irls;  // inner optimizer log (final run)

  static std::vector<std::string> coefficient_names() {
    return {"intercept", "x1", "x2", "x3", "x4", "x5", "bms"};
  }
};

// ---------------------------------------------------------------------------
// Weight schemes
// ---------------------------------------------------------------------------

// Element-wise working weights before normalization. Curve-based weights
// evaluate gamma at max(t, first knot): below the data-supported range the
// curve level is held flat rather than extrapolated.
inline Eigen::VectorXd compute_weights(WeightScheme scheme, const Eigen::VectorXd& exposures,
                                       const ExposureCurve& curve, double power) {
  Eigen::VectorXd w(exposures.size());
  switch (scheme) {
    case WeightScheme::TraditionalOffset:
    case WeightScheme::Cwm:
      w.setOnes();
      return w;
    case WeightScheme::TraditionalRatio:
    case WeightScheme::Ewm:
      for (Eigen::Index i = 0; i < exposures.size(); ++i)
        w[i] = std::pow(exposures[i], power - 1.0);
      return w;
    case WeightScheme::Gwm: {
      const CurveEvaluator eval(curve);
      const double at_one = eval(1.0);
      if (!(at_one > 0.0)) throw FitError("curve weight: curve is nonpositive at t = 1");
      const double t_floor = curve.grid.knots.front();
      for (Eigen::Index i = 0; i < exposures.size(); ++i) {
        const double g = eval(std::max(exposures[i], t_floor));
        if (!(g > 0.0)) {
          std::ostringstream msg;
          msg << "curve weight: curve is nonpositive at exposure t = " << exposures[i];
          throw FitError(msg.str());
        }
        w[i] = std::pow(g / at_one, power - 1.0);
      }
      return w;
    }
  }
  throw std::logic_error("unreachable weight scheme");
}

// ---------------------------------------------------------------------------
// IRLS core
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kEtaClamp = 40.0;  // safety rail: exp(40) ~ 2.4e17

struct Design {
  Eigen::MatrixXd X;
  Eigen::VectorXd offset;   // fixed additive term on the log scale
  Eigen::VectorXd y;
  Eigen::VectorXd weights;  // normalized to mean 1
  Eigen::MatrixXd penalty;  // same order as X columns; empty when unpenalized
};

struct IrlsOutcome {
  Eigen::VectorXd theta;
  double deviance = 0.0;            // weighted data deviance
  double penalized_deviance = 0.0;  // + lambda * theta'P theta
  double edf = 0.0;                 // trace of the ridge hat matrix
  bool converged = false;
  std::vector<IrlsIteration> log;
  std::string diagnostic;
};

inline double weighted_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                                const Eigen::VectorXd& w, double power) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    total += w[i] * unit_deviance(y[i], mu[i], power);
  return total;
}

// Penalized IRLS for the Tweedie log-link model. Working response
// eta + (y - mu)/mu, working weight w * mu^(2-p); dispersion cancels and is
// fixed at 1. Step-halving (up to 10) guards non-monotone steps.
inline IrlsOutcome irls(const Design& d, double power, double lambda, double tol, int max_iter,
                        const Eigen::VectorXd* warm_start = nullptr) {
  const Eigen::Index n = d.X.rows(), q = d.X.cols();
  if (n == 0) throw FitError("fit: empty design");
  if (d.y.minCoeff() < 0.0) throw FitError("fit: negative loss cost");
  if (!(d.y.maxCoeff() > 0.0))
    throw FitError("fit: all loss costs are zero; the log-link mean is unidentified");
  const bool penalized = d.penalty.size() > 0 && lambda > 0.0;

  IrlsOutcome out;
  Eigen::VectorXd theta(q), eta(n), mu(n);
  const auto eta_mu_from = [&](const Eigen::VectorXd& th) {
    eta = (d.X * th + d.offset).cwiseMax(-kEtaClamp).cwiseMin(kEtaClamp);
    mu = eta.array().exp();
  };
  const auto objective = [&](const Eigen::VectorXd& th) {
    double obj = weighted_deviance(d.y, mu, d.weights, power);
    if (penalized) obj += lambda * th.dot(d.penalty * th);
    return obj;
  };

  if (warm_start) {
    theta = *warm_start;
    eta_mu_from(theta);
  } else {
    // Standard GLM start: one working step from mu0 = (y + mean(y))/2.
    const double ybar = d.y.mean();
    mu = ((d.y.array() + ybar) * 0.5).cwiseMax(1e-8);
    eta = mu.array().log();
    theta.setZero();
  }

  Eigen::MatrixXd xtwx(q, q);
  Eigen::VectorXd xtwz(q);
  double prev_obj = std::numeric_limits<double>::infinity();
  bool have_theta = warm_start != nullptr;
  if (have_theta) prev_obj = objective(theta);

  for (int it = 1; it <= max_iter; ++it) {
    // Assemble the weighted normal equations at the current mean.
    Eigen::VectorXd wk(n), z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      wk[i] = d.weights[i] * std::pow(mu[i], 2.0 - power);
      z[i] = (eta[i] - d.offset[i]) + (d.y[i] - mu[i]) / mu[i];
    }
    xtwx.noalias() = d.X.transpose() * wk.asDiagonal() * d.X;
    xtwz.noalias() = d.X.transpose() * wk.cwiseProduct(z);
    Eigen::MatrixXd system = xtwx;
    if (penalized) system += lambda * d.penalty;

    const Eigen::LDLT<Eigen::MatrixXd> solver(system);
    if (solver.info() != Eigen::Success || !solver.isPositive() ||
        solver.vectorD().minCoeff() <= system.diagonal().maxCoeff() * 1e-14)
      throw FitError("fit: design matrix is rank deficient");
    Eigen::VectorXd proposal = solver.solve(xtwz);

    int halvings = 0;
    if (have_theta) {
      // Keep the penalized deviance non-increasing.
      eta_mu_from(proposal);
      double obj = objective(proposal);
      while (obj > prev_obj && halvings < 10) {
        proposal = 0.5 * (proposal + theta);
        eta_mu_from(proposal);
        obj = objective(proposal);
        ++halvings;
      }
    } else {
      eta_mu_from(proposal);
    }
    theta = proposal;
    have_theta = true;
    const double obj = objective(theta);
    out.log.push_back({it, obj, halvings});

    const double rel_change = std::abs(prev_obj - obj) / std::max(1.0, std::abs(obj));
    prev_obj = obj;
    if (it > 1 && rel_change < tol) {
      out.converged = true;
      break;
    }
  }
  if (!out.converged) {
    std::ostringstream msg;
    msg << "optimizer did not reach tol " << tol << " within " << max_iter << " iterations";
    out.diagnostic = msg.str();
  }

  // Fisher scoring converges linearly for this non-canonical link, so the
  // deviance-change stop can leave a small residual score. Polish with plain
  // working steps until the penalized gradient is negligible.
  if (out.converged) {
    const auto gradient_norm = [&]() {
      Eigen::VectorXd g = Eigen::VectorXd::Zero(q);
      for (Eigen::Index i = 0; i < n; ++i)
        g += d.weights[i] * 2.0 * std::pow(mu[i], 1.0 - power) * (mu[i] - d.y[i]) *
             d.X.row(i).transpose();
      if (penalized) g += 2.0 * lambda * (d.penalty * theta);
      return g.cwiseAbs().maxCoeff();
    };
    const double target = 1e-9 * std::max(1.0, std::abs(prev_obj));
    double best_norm = gradient_norm();
    Eigen::VectorXd best_theta = theta;
    for (int extra = 0; extra < 50 && best_norm > target; ++extra) {
      Eigen::VectorXd wk2(n), z2(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        wk2[i] = d.weights[i] * std::pow(mu[i], 2.0 - power);
        z2[i] = (eta[i] - d.offset[i]) + (d.y[i] - mu[i]) / mu[i];
      }
      xtwx.noalias() = d.X.transpose() * wk2.asDiagonal() * d.X;
      xtwz.noalias() = d.X.transpose() * wk2.cwiseProduct(z2);
      Eigen::MatrixXd system = xtwx;
      if (penalized) system += lambda * d.penalty;
      theta = Eigen::LDLT<Eigen::MatrixXd>(system).solve(xtwz);
      eta_mu_from(theta);
      const double norm = gradient_norm();
      if (norm < best_norm) {
        best_norm = norm;
        best_theta = theta;
      } else {
        break;  // contraction exhausted at this precision
      }
    }
    theta = best_theta;
    eta_mu_from(theta);
  }

  out.theta = theta;
  out.deviance = weighted_deviance(d.y, mu, d.weights, power);
  out.penalized_deviance = out.deviance + (penalized ? lambda * theta.dot(d.penalty * theta) : 0.0);

  // Effective degrees of freedom of the final working-weight ridge smoother.
  Eigen::VectorXd wk(n);
  for (Eigen::Index i = 0; i < n; ++i) wk[i] = d.weights[i] * std::pow(mu[i], 2.0 - power);
  xtwx.noalias() = d.X.transpose() * wk.asDiagonal() * d.X;
  Eigen::MatrixXd system = xtwx;
  if (penalized) system += lambda * d.penalty;
  out.edf = Eigen::LDLT<Eigen::MatrixXd>(system).solve(xtwx).trace();
  return out;
}

// GCV over a fixed logarithmic grid; ties resolve to the smallest lambda.
// Returns the winning lambda and its fitted outcome.
inline std::pair<double, IrlsOutcome> gcv_select(const Design& d, double power, double tol,
                                                 int max_iter) {
  constexpr int kGridSize = 20;
  const double n = static_cast<double>(d.X.rows());
  double best_lambda = 0.0, best_score = std::numeric_limits<double>::infinity();
  IrlsOutcome best;
  Eigen::VectorXd warm;
  for (int g = 0; g < kGridSize; ++g) {
    const double lambda = std::pow(10.0, -4.0 + 8.0 * g / (kGridSize - 1.0));
    IrlsOutcome cand = irls(d, power, lambda, tol, max_iter, warm.size() ? &warm : nullptr);
    warm = cand.theta;
    const double dof = n - cand.edf;
    if (!(dof > 0.0)) continue;
    const double score = n * cand.deviance / (dof * dof);
    if (score < best_score) {
      best_score = score;
      best_lambda = lambda;
      best = std::move(cand);
    }
  }
  if (!(best_score < std::numeric_limits<double>::infinity()))
    throw FitError("fit: cross-validation failed on every candidate penalty");
  return {best_lambda, std::move(best)};
}

struct PortfolioView {
  Eigen::VectorXd exposures, y;
  Eigen::MatrixXd covariates;  // x1..x5, bms - 100
};

inline PortfolioView make_view(const Portfolio& p) {
  if (p.empty()) throw FitError("fit: empty portfolio");
  const auto n = static_cast<Eigen::Index>(p.size());
  PortfolioView v;
  v.exposures.resize(n);
  v.y.resize(n);
  v.covariates.resize(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PolicyRecord& r = p.records[static_cast<std::size_t>(i)];
    v.exposures[i] = r.exposure;
    v.y[i] = r.loss_cost;
    for (int j = 0; j < 5; ++j) v.covariates(i, j) = r.x[static_cast<std::size_t>(j)];
    v.covariates(i, 5) = r.bms_level - 100;
  }
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public fitting entry points
// ---------------------------------------------------------------------------

namespace detail {

// Flexible design: covariates plus a full spline block, no intercept column.
// The spline carries the level; the gauge is fixed afterwards by pinning the
// log-curve to 0 at the last knot and moving that level into the intercept.
inline Design flexible_design(const PortfolioView& v, const KnotGrid& grid,
                              const Eigen::VectorXd& raw_weights) {
  Design d;
  const Eigen::Index n = v.y.size();
  const auto k = static_cast<Eigen::Index>(grid.size());
  d.X.resize(n, 6 + k);
  d.X.leftCols(6) = v.covariates;
  d.X.rightCols(k) = build_basis(
      std::vector<double>(v.exposures.data(), v.exposures.data() + n), grid);
  d.offset = Eigen::VectorXd::Zero(n);
  d.y = v.y;
  d.weights = raw_weights * (static_cast<double>(n) / raw_weights.sum());
  d.penalty = Eigen::MatrixXd::Zero(6 + k, 6 + k);
  d.penalty.bottomRightCorner(k, k) = penalty_matrix(grid);
  return d;
}

inline Design traditional_design(const PortfolioView& v, const Eigen::VectorXd& raw_weights) {
  Design d;
  const Eigen::Index n = v.y.size();
  d.X.resize(n, 7);
  d.X.col(0).setOnes();
  d.X.rightCols(6) = v.covariates;
  d.offset = v.exposures.array().log();
  d.y = v.y;
  d.weights = raw_weights * (static_cast<double>(n) / raw_weights.sum());
  return d;
}

// Translate a flexible-design solution into (beta, curve) under the
// gamma-hat(1) = 1 gauge.
inline void unpack_flexible(const Eigen::VectorXd& theta, const KnotGrid& grid, FitResult& out) {
  const auto k = static_cast<Eigen::Index>(grid.size());
  const Eigen::VectorXd c = theta.tail(k);  // log-curve including level
  const double level = c[k - 1];
  out.beta.resize(7);
  out.beta[0] = level;
  out.beta.tail(6) = theta.head(6);
  out.log_curve = c.array() - level;
  out.log_curve[k - 1] = 0.0;
  out.curve.grid = grid;
  out.curve.coefficients = out.log_curve.array().exp();
  out.curve.coefficients[k - 1] = 1.0;
  out.mean_structure = MeanStructure::Spline;
}

}  // namespace detail

inline FitResult fit_gwm(const Portfolio& portfolio, const FitSpec& spec);

// Single-pass fit for every scheme except the iterative one. Weights are
// normalized to mean 1, which makes the fit exactly invariant to rescaling
// all weights by a positive constant even when the penalty comes from GCV.
inline FitResult fit(const Portfolio& portfolio, const FitSpec& spec) {
  spec.validate();
  if (spec.scheme == WeightScheme::Gwm) return fit_gwm(portfolio, spec);
  const detail::PortfolioView v = detail::make_view(portfolio);
  const ExposureCurve ident = ExposureCurve::identity(spec.grid);
  const Eigen::VectorXd raw = compute_weights(spec.scheme, v.exposures, ident, spec.power);

  FitResult out;
  out.scheme = spec.scheme;
  out.power = spec.power;

  if (!is_flexible(spec.scheme)) {
    const detail::Design d = detail::traditional_design(v, raw);
    const detail::IrlsOutcome sol = detail::irls(d, spec.power, 0.0, spec.tol, spec.max_iter);
    out.beta = sol.theta;
    out.curve = ident;
    out.log_curve = Eigen::VectorXd();
    out.mean_structure = MeanStructure::TraditionalIdentity;
    out.lambda = 0.0;
    out.deviance_train = sol.deviance;
    out.converged = sol.converged;
    out.diagnostic = sol.diagnostic;
    out.irls = sol.log;
    return out;
  }

  const detail::Design d = detail::flexible_design(v, spec.grid, raw);
  detail::IrlsOutcome sol;
  if (spec.ridge_lambda) {
    out.lambda = *spec.ridge_lambda;
    sol = detail::irls(d, spec.power, out.lambda, spec.tol, spec.max_iter);
  } else {
    auto [lambda, best] = detail::gcv_select(d, spec.power, spec.tol, spec.max_iter);
    out.lambda = lambda;
    sol = std::move(best);
  }
  detail::unpack_flexible(sol.theta, spec.grid, out);
  out.deviance_train = sol.deviance;
  out.converged = sol.converged;
  out.diagnostic = sol.diagnostic;
  out.irls = sol.log;
  return out;
}

// Iterative curve-weighted fit. Initialization uses weights w(t) = t; each
// outer iteration re-weights by the previous normalized curve raised to
// p - 1 and refits. The ridge penalty is selected once, on the
// initialization fit, and frozen across iterations so the outer loop is a
// fixed-point iteration in the curve alone.
inline FitResult fit_gwm(const Portfolio& portfolio, const FitSpec& spec) {
  spec.validate();
  if (spec.scheme != WeightScheme::Gwm)
    throw std::invalid_argument("fit_gwm requires the iterative scheme");
  const detail::PortfolioView v = detail::make_view(portfolio);
  const auto k = static_cast<Eigen::Index>(spec.grid.size());

  const auto weights_at_knots = [&](const ExposureCurve& curve) {
    // Normalized curves have gamma(knot_j) = coefficient_j > 0.
    Eigen::VectorXd w(k);
    for (Eigen::Index j = 0; j < k; ++j)
      w[j] = std::pow(curve.coefficients[j], spec.power - 1.0);
    return w;
  };

  FitResult out;
  double lambda = 0.0;
  const int max_outer = spec.max_iter;
  bool damped = false;  // set after the first oscillation abort, retried once

  for (int attempt = 0; attempt < 2; ++attempt) {
    out = FitResult{};
    out.scheme = WeightScheme::Gwm;
    out.power = spec.power;

    // s_1: initialization with w(t) = t.
    detail::Design d = detail::flexible_design(v, spec.grid, v.exposures);
    detail::IrlsOutcome sol;
    if (attempt == 0) {
      if (spec.ridge_lambda) {
        lambda = *spec.ridge_lambda;
        sol = detail::irls(d, spec.power, lambda, spec.tol, spec.max_iter);
      } else {
        std::tie(lambda, sol) = detail::gcv_select(d, spec.power, spec.tol, spec.max_iter);
      }
    } else {
      sol = detail::irls(d, spec.power, lambda, spec.tol, spec.max_iter);
    }
    detail::unpack_flexible(sol.theta, spec.grid, out);
    out.lambda = lambda;
    out.trace.push_back({1, out.curve, std::numeric_limits<double>::quiet_NaN(),
                         std::numeric_limits<double>::quiet_NaN()});

    // Curve actually used for the next round of weights; damping blends it
    // halfway toward the previous weight curve to settle oscillations.
    ExposureCurve weight_curve = out.curve;
    Eigen::VectorXd prev_wk = weights_at_knots(weight_curve);
    ExposureCurve prev_curve = out.curve;
    Eigen::VectorXd warm = sol.theta;

    int increases = 0;
    double prev_change = std::numeric_limits<double>::infinity();
    bool oscillated = false;

    for (int it = 2; it <= max_outer; ++it) {
      const Eigen::VectorXd raw =
          compute_weights(WeightScheme::Gwm, v.exposures, weight_curve, spec.power);
      d.weights = raw * (static_cast<double>(v.y.size()) / raw.sum());
      sol = detail::irls(d, spec.power, lambda, spec.tol, spec.max_iter, &warm);
      warm = sol.theta;
      FitResult step;
      detail::unpack_flexible(sol.theta, spec.grid, step);

      double curve_change = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) {
        const double denom = std::max(std::abs(prev_curve.coefficients[j]), 1e-8);
        curve_change =
            std::max(curve_change,
                     std::abs(step.curve.coefficients[j] - prev_curve.coefficients[j]) / denom);
      }
      const Eigen::VectorXd wk_now = weights_at_knots(step.curve);
      const double weight_change = (wk_now - prev_wk).cwiseAbs().maxCoeff();

      out.beta = step.beta;
      out.curve = step.curve;
      out.log_curve = step.log_curve;
      out.mean_structure = MeanStructure::Spline;
      out.deviance_train = sol.deviance;
      out.irls = sol.log;
      out.trace.push_back({it, step.curve, weight_change, curve_change});

      if (curve_change < spec.tol) {
        out.converged = true;
        break;
      }
      if (curve_change > prev_change) {
        if (++increases >= 3) {
          oscillated = true;
          break;
        }
      } else {
        increases = 0;
      }
      prev_change = curve_change;
      prev_wk = wk_now;
      prev_curve = step.curve;
      if (damped) {
        // Halve the weight update: blend the new curve with the curve the
        // weights came from.
        weight_curve.coefficients =
            0.5 * (weight_curve.coefficients + step.curve.coefficients);
        weight_curve.coefficients[k - 1] = 1.0;
      } else {
        weight_curve = step.curve;
      }
    }

    if (out.converged) return out;
    if (oscillated && !damped) {
      damped = true;  // one damped retry
      continue;
    }
    out.diagnostic = oscillated
                         ? "curve weights oscillated; damped retry did not stabilize"
                         : "curve did not stabilize within max_iter outer iterations";
    return out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

namespace detail {

inline double schedule_log_gamma(const std::vector<double>& grid_t,
                                 const std::vector<double>& gamma, double t) {
  // Piecewise-linear interpolation; exact at grid points; constant below the
  // first grid point.
  if (t <= grid_t.front()) return std::log(gamma.front());
  const auto it = std::lower_bound(grid_t.begin(), grid_t.end(), t);
  const auto hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
      std::distance(grid_t.begin(), it), static_cast<std::ptrdiff_t>(grid_t.size()) - 1));
  if (grid_t[hi] == t) return std::log(gamma[hi]);
  const std::size_t lo = hi - 1;
  const double w = (t - grid_t[lo]) / (grid_t[hi] - grid_t[lo]);
  return std::log(gamma[lo] + w * (gamma[hi] - gamma[lo]));
}

}  // namespace detail

// Fitted mean for each record. Spline fits interpolate the log-curve, which
// is the scale the model was estimated on.
inline Eigen::VectorXd predict(const FitResult& fit, const Portfolio& portfolio) {
  const auto n = static_cast<Eigen::Index>(portfolio.size());
  if (fit.beta.size() != 7) throw FitError("predict: fit has no coefficients");
  Eigen::VectorXd mu(n);
  std::optional<CurveEvaluator> log_eval;
  std::optional<ExposureCurve> log_curve_holder;
  if (fit.mean_structure == MeanStructure::Spline) {
    log_curve_holder = ExposureCurve{fit.curve.grid, fit.log_curve};
    log_eval.emplace(*log_curve_holder);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const PolicyRecord& r = portfolio.records[static_cast<std::size_t>(i)];
    double eta = fit.beta[0];
    for (int j = 0; j < 5; ++j) eta += fit.beta[j + 1] * r.x[static_cast<std::size_t>(j)];
    eta += fit.beta[6] * (r.bms_level - 100);
    switch (fit.mean_structure) {
      case MeanStructure::TraditionalIdentity:
        eta += std::log(r.exposure);
        break;
      case MeanStructure::Spline:
        eta += (*log_eval)(r.exposure);
        break;
      case MeanStructure::FixedSchedule:
        if (fit.schedule_t.empty()) throw FitError("predict: refit carries no schedule");
        eta += detail::schedule_log_gamma(fit.schedule_t, fit.schedule_gamma, r.exposure);
        break;
    }
    eta = std::clamp(eta, -detail::kEtaClamp, detail::kEtaClamp);
    mu[i] = std::exp(eta);
  }
  return mu;
}

// ---------------------------------------------------------------------------
// Population-level diagnostics
// ---------------------------------------------------------------------------

// Expected quasi-score of a working model (gamma, beta) against the truth
// (delta, beta_true) for one design point. Zero at beta = beta_true if and
// only if the exposure laws agree.
template <typename DeltaFn, typename GammaFn>
Eigen::VectorXd consistency_gradient(const Eigen::VectorXd& beta, const Eigen::VectorXd& beta_true,
                                     const Eigen::VectorXd& x, double t, DeltaFn&& delta,
                                     GammaFn&& gamma, double power) {
  if (beta.size() != beta_true.size() || beta.size() != x.size())
    throw std::invalid_argument("consistency_gradient: dimension mismatch");
  const double g = gamma(t), del = delta(t);
  if (!(g > 0.0) || !(del > 0.0))
    throw std::invalid_argument("consistency_gradient: exposure functions must be positive at t");
  const double xb = x.dot(beta), xb_true = x.dot(beta_true);
  const double lead = del * std::pow(g, 1.0 - power) * std::exp((1.0 - power) * xb + xb_true) -
                      std::pow(g, 2.0 - power) * std::exp((2.0 - power) * xb);
  return lead * x;
}

// Quasi-likelihood criterion whose maximizer over mu is mu_true.
inline double kl_criterion(double mu, double mu_true, double power) {
  if (!(mu > 0.0) || !(mu_true > 0.0))
    throw std::invalid_argument("kl_criterion: means must be positive");
  return std::pow(mu, 1.0 - power) / (1.0 - power) * mu_true -
         std::pow(mu, 2.0 - power) / (2.0 - power);
}

}  // namespace flexrate
