#pragma once
// Cancellation-penalty engine: project a fitted exposure curve onto the
// ratemaking constraints (monotone, at least pro-rata, capped at 1, unit at
// t = 1), smooth the schedule toward pro-rata, refit coefficients against the
// frozen schedule, and decompose premiums into pro-rata and penalty parts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexrate/fit.hpp"
#include "flexrate/portfolio.hpp"
#include "flexrate/spline.hpp"

namespace flexrate {

struct PenaltySchedule {
  std::vector<double> grid_t;     // 200 equispaced points j/200 in (0,1]
  std::vector<double> gamma_con;  // constrained (possibly smoothed) curve values
  double a = 1.0;                 // smoothing level: 0 = pro-rata, 1 = fully constrained curve
  // Annual-premium coefficients (intercept, x1..x5, bms); empty when the
  // schedule was built from a bare curve.
  Eigen::VectorXd beta;

  void validate() const {
    if (grid_t.size() != gamma_con.size() || grid_t.empty())
      throw std::invalid_argument("penalty schedule: grid and values must align");
    if (!(a >= 0.0 && a <= 1.0))
      throw std::invalid_argument("penalty schedule: smoothing level outside [0,1]");
    for (std::size_t j = 0; j < grid_t.size(); ++j) {
      if (j > 0 && gamma_con[j] < gamma_con[j - 1])
        throw std::invalid_argument("penalty schedule: values must be non-decreasing");
      if (gamma_con[j] < grid_t[j])
        throw std::invalid_argument("penalty schedule: values must dominate pro-rata");
      if (gamma_con[j] > 1.0)
        throw std::invalid_argument("penalty schedule: values must not exceed 1");
    }
    if (gamma_con.back() != 1.0)
      throw std::invalid_argument("penalty schedule: curve must equal 1 at t = 1");
  }

  // pi = exp(beta' [1, x, bms - 100]): the full-year premium for this profile.
  double annual_premium(const PolicyRecord& r) const {
    if (beta.size() != 7)
      throw std::invalid_argument("penalty schedule: no premium coefficients attached");
    double eta = beta[0];
    for (int j = 0; j < 5; ++j) eta += beta[j + 1] * r.x[static_cast<std::size_t>(j)];
    eta += beta[6] * (r.bms_level - 100);
    return std::exp(eta);
  }
};

namespace detail {

constexpr int kScheduleGridSize = 200;

inline std::vector<double> schedule_grid() {
  std::vector<double> g(kScheduleGridSize);
  for (int j = 1; j <= kScheduleGridSize; ++j)
    g[static_cast<std::size_t>(j - 1)] = static_cast<double>(j) / kScheduleGridSize;
  return g;
}

// Pool-adjacent-violators: L2 projection onto non-decreasing sequences.
inline void pava_nondecreasing(std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> mean(n), weight(n);
  std::vector<std::size_t> count(n);
  std::size_t blocks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mean[blocks] = v[i];
    weight[blocks] = 1.0;
    count[blocks] = 1;
    ++blocks;
    while (blocks > 1 && mean[blocks - 2] > mean[blocks - 1]) {
      const double w = weight[blocks - 2] + weight[blocks - 1];
      mean[blocks - 2] =
          (mean[blocks - 2] * weight[blocks - 2] + mean[blocks - 1] * weight[blocks - 1]) / w;
      weight[blocks - 2] = w;
      count[blocks - 2] += count[blocks - 1];
      --blocks;
    }
  }
  std::size_t i = 0;
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t k = 0; k < count[b]; ++k) v[i++] = mean[b];
}

// Constraint projection used by constrain(): isotonic pass, clip into
// [lower, 1], final isotonic pass (a provable no-op kept as a guard), pin the
// endpoint. Exposed on arbitrary grids for oracle comparisons.
inline std::vector<double> constrain_values(std::vector<double> g,
                                            const std::vector<double>& lower) {
  pava_nondecreasing(g);
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = std::max(g[j], lower[j]);
  for (double& x : g) x = std::min(x, 1.0);
  pava_nondecreasing(g);
  g.back() = 1.0;
  return g;
}

inline double interp_schedule(const PenaltySchedule& s, double t) {
  // Linear between grid points; exact at grid points; constant below the
  // first point.
  if (t <= s.grid_t.front()) return s.gamma_con.front();
  const auto it = std::lower_bound(s.grid_t.begin(), s.grid_t.end(), t);
  std::size_t hi = std::min<std::size_t>(
      static_cast<std::size_t>(std::distance(s.grid_t.begin(), it)), s.grid_t.size() - 1);
  if (s.grid_t[hi] == t) return s.gamma_con[hi];
  const std::size_t lo = hi - 1;
  const double w = (t - s.grid_t[lo]) / (s.grid_t[hi] - s.grid_t[lo]);
  return s.gamma_con[lo] + w * (s.gamma_con[hi] - s.gamma_con[lo]);
}

}  // namespace detail

// Project the fitted curve onto the ratemaking constraints on the 200-point
// schedule grid. Total: the projection is feasible for any input (the
// pro-rata line itself satisfies every constraint), so even curves whose
// left-edge extrapolation strays below zero come back as valid schedules.
inline PenaltySchedule constrain(const ExposureCurve& curve) {
  PenaltySchedule s;
  s.grid_t = detail::schedule_grid();
  const CurveEvaluator eval(curve);
  std::vector<double> values(s.grid_t.size());
  for (std::size_t j = 0; j < s.grid_t.size(); ++j) values[j] = eval(s.grid_t[j]);
  s.gamma_con = detail::constrain_values(std::move(values), s.grid_t);
  s.a = 1.0;
  s.validate();
  return s;
}

// Convenience overload carrying the fit's premium coefficients along.
inline PenaltySchedule constrain(const FitResult& fit) {
  PenaltySchedule s = constrain(fit.curve);
  s.beta = fit.beta;
  return s;
}

// Cancellation penalty at exposure t for a contract with the given annual
// premium: pi * (gamma(t) - t).
inline double penalty(const PenaltySchedule& schedule, double t, double annual_premium) {
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("penalty: t must lie in (0,1]");
  if (!(annual_premium > 0.0))
    throw std::invalid_argument("penalty: annual premium must be positive");
  // Clamp away the one-ulp negatives linear interpolation can produce.
  return std::max(0.0, annual_premium * (detail::interp_schedule(schedule, t) - t));
}

// Smoothing family: blend the schedule toward the pro-rata line.
inline PenaltySchedule adjust(const PenaltySchedule& schedule, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("adjust: a must lie in [0,1]");
  PenaltySchedule out = schedule;
  out.a = a;
  for (std::size_t j = 0; j < out.gamma_con.size(); ++j)
    out.gamma_con[j] = a * schedule.gamma_con[j] + (1.0 - a) * schedule.grid_t[j];
  out.gamma_con.back() = 1.0;
  out.validate();
  return out;
}

// Refit the coefficient vector with the schedule frozen as an offset. The
// exposure dimension is no longer estimated; weights follow the requested
// scheme, with curve-based weights taken from the supplied pre-constraint
// curve.
inline FitResult refit_with_offset(const Portfolio& portfolio, const PenaltySchedule& schedule,
                                   const FitSpec& spec,
                                   const ExposureCurve* frozen_curve = nullptr) {
  spec.validate();
  schedule.validate();
  const detail::PortfolioView v = detail::make_view(portfolio);

  Eigen::VectorXd raw;
  if (spec.scheme == WeightScheme::Gwm) {
    if (!frozen_curve)
      throw std::invalid_argument(
          "refit_with_offset: curve-based weights need the pre-constraint curve");
    raw = compute_weights(WeightScheme::Gwm, v.exposures, *frozen_curve, spec.power);
  } else {
    raw = compute_weights(spec.scheme, v.exposures, ExposureCurve::identity(spec.grid),
                          spec.power);
  }

  detail::Design d = detail::traditional_design(v, raw);
  for (Eigen::Index i = 0; i < v.exposures.size(); ++i) {
    const double g = detail::interp_schedule(schedule, v.exposures[i]);
    if (!(g > 0.0)) {
      std::ostringstream msg;
      msg << "refit_with_offset: schedule is nonpositive at exposure t = " << v.exposures[i];
      throw FitError(msg.str());
    }
    d.offset[i] = std::log(g);
  }

  const detail::IrlsOutcome sol = detail::irls(d, spec.power, 0.0, spec.tol, spec.max_iter);
  FitResult out;
  out.scheme = spec.scheme;
  out.power = spec.power;
  out.mean_structure = MeanStructure::FixedSchedule;
  out.beta = sol.theta;
  out.curve = frozen_curve ? *frozen_curve : ExposureCurve::identity(spec.grid);
  out.schedule_t = schedule.grid_t;
  out.schedule_gamma = schedule.gamma_con;
  out.lambda = 0.0;
  out.deviance_train = sol.deviance;
  out.converged = sol.converged;
  out.diagnostic = sol.diagnostic;
  out.irls = sol.log;
  return out;
}

// ---------------------------------------------------------------------------
// Premium decomposition
// ---------------------------------------------------------------------------

struct CumulativeSharePoint {
  double exposure = 0.0;       // contracts with t <= this are included
  double premium_share = 0.0;  // share of total collected premium gamma(t) pi
  double pro_rata_share = 0.0;
  double penalty_share = 0.0;
  double loss_share = 0.0;  // share of observed losses
};

struct DecompositionReport {
  double total_premium = 0.0;   // sum of gamma(t_i) pi_i
  double total_pro_rata = 0.0;  // sum of t_i pi_i
  double total_penalty = 0.0;   // sum of rho(t_i)
  double penalty_share = 0.0;   // penalty / collected premium
  double penalty_share_xo = 0.0;
  std::vector<double> per_contract_pro_rata;
  std::vector<double> per_contract_penalty;
  std::vector<CumulativeSharePoint> cumulative;  // ordered by exposure
};

// Per-contract split gamma(t) pi = t pi + rho(t), with cumulative share
// curves by exposure level.
inline DecompositionReport premium_decomposition(const FitResult& fit,
                                                 const PenaltySchedule& schedule,
                                                 const Portfolio& portfolio) {
  if (portfolio.empty()) throw DataError("premium decomposition needs a non-empty portfolio");
  if (fit.beta.size() != 7) throw std::invalid_argument("premium decomposition: fit lacks coefficients");
  schedule.validate();
  const std::size_t n = portfolio.size();
  DecompositionReport rep;
  rep.per_contract_pro_rata.resize(n);
  rep.per_contract_penalty.resize(n);
  double premium_xo = 0.0, penalty_xo = 0.0, total_losses = 0.0;

  for (std::size_t i = 0; i < n; ++i) {
    const PolicyRecord& r = portfolio.records[i];
    double eta = fit.beta[0];
    for (int j = 0; j < 5; ++j) eta += fit.beta[j + 1] * r.x[static_cast<std::size_t>(j)];
    eta += fit.beta[6] * (r.bms_level - 100);
    const double pi = std::exp(eta);
    const double pro_rata = r.exposure * pi;
    const double rho = penalty(schedule, r.exposure, pi);
    rep.per_contract_pro_rata[i] = pro_rata;
    rep.per_contract_penalty[i] = rho;
    rep.total_pro_rata += pro_rata;
    rep.total_penalty += rho;
    total_losses += r.loss_cost;
    if (r.contract_type == ContractType::XO) {
      premium_xo += pro_rata + rho;
      penalty_xo += rho;
    }
  }
  rep.total_premium = rep.total_pro_rata + rep.total_penalty;
  if (rep.total_premium > 0.0) rep.penalty_share = rep.total_penalty / rep.total_premium;
  if (premium_xo > 0.0) rep.penalty_share_xo = penalty_xo / premium_xo;

  // Cumulative shares by exposure, one point per contract in exposure order.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return portfolio.records[a].exposure < portfolio.records[b].exposure;
  });
  rep.cumulative.reserve(n);
  double cum_premium = 0.0, cum_pro_rata = 0.0, cum_penalty = 0.0, cum_loss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    cum_pro_rata += rep.per_contract_pro_rata[i];
    cum_penalty += rep.per_contract_penalty[i];
    cum_premium += rep.per_contract_pro_rata[i] + rep.per_contract_penalty[i];
    cum_loss += portfolio.records[i].loss_cost;
    CumulativeSharePoint pt;
    pt.exposure = portfolio.records[i].exposure;
    pt.premium_share = rep.total_premium > 0.0 ? cum_premium / rep.total_premium : 0.0;
    pt.pro_rata_share = rep.total_pro_rata > 0.0 ? cum_pro_rata / rep.total_pro_rata : 0.0;
    pt.penalty_share = rep.total_penalty > 0.0 ? cum_penalty / rep.total_penalty : 0.0;
    pt.loss_share = total_losses > 0.0 ? cum_loss / total_losses : 0.0;
    rep.cumulative.push_back(pt);
  }
  return rep;
}

}  // namespace flexrate
