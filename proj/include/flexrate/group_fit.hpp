#pragma once
// Two-group exposure curves with shared risk coefficients: joint fit, cut
// search over BMS levels, and bootstrap bands for the curve difference.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexrate/fit.hpp"
#include "flexrate/parallel.hpp"
#include "flexrate/penalty.hpp"
#include "flexrate/portfolio.hpp"
#include "flexrate/spline.hpp"

namespace flexrate {

// Assignment of each BMS level (95..104) to group 1 or 2.
struct GroupMap {
  std::array<int, 10> groups{};

  static GroupMap from_cut(int cut) {
    if (cut < 95 || cut > 103)
      throw std::invalid_argument("group map: cut must lie in [95, 103]");
    GroupMap m;
    for (int level = 95; level <= 104; ++level)
      m.groups[static_cast<std::size_t>(level - 95)] = level <= cut ? 1 : 2;
    return m;
  }

  int group_of(int level) const {
    if (level < 95 || level > 104)
      throw std::invalid_argument("group map: BMS level out of range");
    return groups[static_cast<std::size_t>(level - 95)];
  }

  void validate() const {
    bool seen1 = false, seen2 = false;
    for (const int g : groups) {
      if (g != 1 && g != 2) throw std::invalid_argument("group map: groups must be 1 or 2");
      (g == 1 ? seen1 : seen2) = true;
    }
    if (!seen1 || !seen2)
      throw std::invalid_argument("group map: both groups must own at least one level");
  }
};

// Shared beta (x1..x5, centered bms), one log-scale smooth per group. The
// smooths are left unnormalized: with no intercept column each carries its
// own level, and only their difference is reported downstream.
struct GroupSplineFit {
  WeightScheme scheme = WeightScheme::Ewm;
  double power = 1.42;
  KnotGrid grid;
  Eigen::VectorXd beta;
  Eigen::VectorXd f1, f2;  // log-curve values at the knots
  double lambda = 0.0;
  double deviance_train = 0.0;
  bool converged = false;
  std::string diagnostic;

  static std::vector<std::string> coefficient_names() {
    return {"x1", "x2", "x3", "x4", "x5", "bms"};
  }
};

namespace detail {

// Share of contracts whose exposure falls in ((j-1)/200, j/200], one weight
// per schedule grid point. Full-term contracts land in the last cell.
inline std::vector<double> exposure_share_weights(const Portfolio& p) {
  std::vector<double> w(static_cast<std::size_t>(kScheduleGridSize), 0.0);
  for (const PolicyRecord& r : p.records) {
    const int j = std::min(kScheduleGridSize,
                           static_cast<int>(std::ceil(r.exposure * kScheduleGridSize - 1e-12)));
    w[static_cast<std::size_t>(std::max(1, j) - 1)] += 1.0;
  }
  for (double& wi : w) wi /= static_cast<double>(p.size());
  return w;
}

inline Design group_design(const PortfolioView& v, const std::vector<int>& group,
                           const KnotGrid& grid, const Eigen::VectorXd& raw_weights) {
  Design d;
  const Eigen::Index n = v.y.size();
  const auto k = static_cast<Eigen::Index>(grid.size());
  const Eigen::MatrixXd basis = build_basis(
      std::vector<double>(v.exposures.data(), v.exposures.data() + n), grid);
  d.X = Eigen::MatrixXd::Zero(n, 6 + 2 * k);
  d.X.leftCols(6) = v.covariates;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index shift = group[static_cast<std::size_t>(i)] == 1 ? 6 : 6 + k;
    d.X.block(i, shift, 1, k) = basis.row(i);
  }
  d.offset = Eigen::VectorXd::Zero(n);
  d.y = v.y;
  d.weights = raw_weights * (static_cast<double>(n) / raw_weights.sum());
  d.penalty = Eigen::MatrixXd::Zero(6 + 2 * k, 6 + 2 * k);
  const Eigen::MatrixXd s = penalty_matrix(grid);
  d.penalty.block(6, 6, k, k) = s;
  d.penalty.block(6 + k, 6 + k, k, k) = s;
  return d;
}

}  // namespace detail

// Joint fit of mu = exp{x'beta + f_g(t)} with one smooth per group, a common
// curvature penalty weight chosen by cross-validation, and no intercept (each
// smooth absorbs its group's level). Curve-based and offset schemes have no
// meaning here, so only contract and exposure weights are accepted.
inline GroupSplineFit fit_group_splines(const Portfolio& portfolio, const FitSpec& spec,
                                        const GroupMap& map) {
  spec.validate();
  map.validate();
  if (spec.scheme != WeightScheme::Cwm && spec.scheme != WeightScheme::Ewm)
    throw std::invalid_argument("group splines: scheme must be cwm or ewm");

  const detail::PortfolioView v = detail::make_view(portfolio);
  const Eigen::Index n = v.y.size();
  std::vector<int> group(static_cast<std::size_t>(n));
  Eigen::Index n1 = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    group[static_cast<std::size_t>(i)] =
        map.group_of(portfolio.records[static_cast<std::size_t>(i)].bms_level);
    if (group[static_cast<std::size_t>(i)] == 1) ++n1;
  }
  if (n1 == 0) throw FitError("group splines: group 1 is empty");
  if (n1 == n) throw FitError("group splines: group 2 is empty");

  const ExposureCurve ident = ExposureCurve::identity(spec.grid);
  const Eigen::VectorXd raw = compute_weights(spec.scheme, v.exposures, ident, spec.power);
  const detail::Design d = detail::group_design(v, group, spec.grid, raw);

  detail::IrlsOutcome sol;
  double lambda = 0.0;
  if (spec.ridge_lambda) {
    lambda = *spec.ridge_lambda;
    sol = detail::irls(d, spec.power, lambda, spec.tol, spec.max_iter);
  } else {
    std::tie(lambda, sol) = detail::gcv_select(d, spec.power, spec.tol, spec.max_iter);
  }

  GroupSplineFit fit;
  fit.scheme = spec.scheme;
  fit.power = spec.power;
  fit.grid = spec.grid;
  const auto k = static_cast<Eigen::Index>(spec.grid.size());
  fit.beta = sol.theta.head(6);
  fit.f1 = sol.theta.segment(6, k);
  fit.f2 = sol.theta.tail(k);
  fit.lambda = lambda;
  fit.deviance_train = sol.deviance;
  fit.converged = sol.converged;
  fit.diagnostic = sol.diagnostic;
  return fit;
}

// Log-scale smooth difference f1 - f2 on the schedule grid.
inline std::vector<double> curve_difference(const GroupSplineFit& fit,
                                            const std::vector<double>& grid) {
  const CurveEvaluator e1(ExposureCurve{fit.grid, fit.f1});
  const CurveEvaluator e2(ExposureCurve{fit.grid, fit.f2});
  std::vector<double> diff(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) diff[j] = e1(grid[j]) - e2(grid[j]);
  return diff;
}

struct CutScore {
  int cut = 0;
  double score = 0.0;
  bool skipped = false;  // a side of the split was empty
};

struct CutReport {
  int best_cut = 0;
  std::vector<CutScore> scores;  // one entry per candidate cut, 95..103
  GroupSplineFit best_fit;
};

// Scans every BMS cut, scoring each by the exposure-density-weighted
// integrated squared difference between the two smooths. Ties and the
// degenerate all-equal case resolve to the smallest cut.
inline CutReport search_cutpoint(const Portfolio& portfolio, const FitSpec& spec, int jobs = 1) {
  if (portfolio.empty()) throw DataError("cut search: empty portfolio");
  std::array<bool, 10> seen{};
  for (const PolicyRecord& r : portfolio.records) {
    if (r.bms_level < 95 || r.bms_level > 104)
      throw DataError("cut search: BMS level out of range");
    seen[static_cast<std::size_t>(r.bms_level - 95)] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2)
    throw DataError("cut search: need at least two distinct BMS levels");

  const std::vector<double> grid = detail::schedule_grid();
  const std::vector<double> density = detail::exposure_share_weights(portfolio);

  constexpr int kFirstCut = 95, kLastCut = 103;
  std::vector<CutScore> scores(kLastCut - kFirstCut + 1);
  std::vector<std::optional<GroupSplineFit>> fits(scores.size());
  std::vector<std::string> errors(scores.size());
  parallel_for(scores.size(), jobs, [&](std::size_t idx) {
    const int cut = kFirstCut + static_cast<int>(idx);
    scores[idx].cut = cut;
    bool low = false, high = false;
    for (int level = 95; level <= 104; ++level) {
      if (!seen[static_cast<std::size_t>(level - 95)]) continue;
      (level <= cut ? low : high) = true;
    }
    if (!low || !high) {
      scores[idx].skipped = true;
      return;
    }
    const GroupSplineFit fit = fit_group_splines(portfolio, spec, GroupMap::from_cut(cut));
    const std::vector<double> diff = curve_difference(fit, grid);
    double score = 0.0;
    for (std::size_t j = 0; j < grid.size(); ++j) score += density[j] * diff[j] * diff[j];
    scores[idx].score = score;
    fits[idx] = std::move(fit);
  });

  CutReport report;
  report.scores = scores;
  int best = -1;
  for (std::size_t idx = 0; idx < scores.size(); ++idx) {
    if (scores[idx].skipped) continue;
    if (best < 0 || scores[idx].score > scores[static_cast<std::size_t>(best)].score)
      best = static_cast<int>(idx);
  }
  if (best < 0) throw FitError("cut search: every candidate cut left a group empty");
  report.best_cut = scores[static_cast<std::size_t>(best)].cut;
  report.best_fit = *fits[static_cast<std::size_t>(best)];
  return report;
}

struct DifferenceBand {
  std::vector<double> grid;       // schedule grid, 200 points
  std::vector<double> base_diff;  // f1 - f2 from the fit on the full data
  std::vector<double> mean_diff;  // bootstrap mean of the difference
  std::vector<double> se;         // bootstrap standard deviation per point
  int replicates = 0;             // successful replicates
  int failures = 0;
};

// Nonparametric bootstrap: resample contracts with replacement within each
// group, refit with the penalty weight frozen at the base fit's value, and
// summarize f1 - f2 pointwise. Replicate streams are seeded independently so
// results do not depend on the worker count.
inline DifferenceBand bootstrap_curve_difference(const Portfolio& portfolio, const FitSpec& spec,
                                                 const GroupMap& map, int replicates,
                                                 std::uint64_t seed, int jobs = 1) {
  if (replicates < 1) throw std::invalid_argument("bootstrap: need at least one replicate");

  const GroupSplineFit base = fit_group_splines(portfolio, spec, map);
  FitSpec frozen = spec;
  frozen.ridge_lambda = base.lambda;

  std::vector<std::size_t> idx1, idx2;
  for (std::size_t i = 0; i < portfolio.size(); ++i)
    (map.group_of(portfolio.records[i].bms_level) == 1 ? idx1 : idx2).push_back(i);

  DifferenceBand band;
  band.grid = detail::schedule_grid();
  band.base_diff = curve_difference(base, band.grid);

  const std::size_t b = static_cast<std::size_t>(replicates);
  std::vector<std::vector<double>> draws(b);
  std::vector<char> ok(b, 0);
  parallel_for(b, jobs, [&](std::size_t rep) {
    std::mt19937_64 rng(task_seed(seed, rep));
    Portfolio sample;
    sample.records.reserve(portfolio.size());
    std::uniform_int_distribution<std::size_t> pick1(0, idx1.size() - 1);
    std::uniform_int_distribution<std::size_t> pick2(0, idx2.size() - 1);
    for (std::size_t i = 0; i < idx1.size(); ++i)
      sample.records.push_back(portfolio.records[idx1[pick1(rng)]]);
    for (std::size_t i = 0; i < idx2.size(); ++i)
      sample.records.push_back(portfolio.records[idx2[pick2(rng)]]);
    try {
      const GroupSplineFit fit = fit_group_splines(sample, frozen, map);
      draws[rep] = curve_difference(fit, band.grid);
      ok[rep] = 1;
    } catch (const std::exception&) {
      ok[rep] = 0;  // counted below; more than 10% aborts the run
    }
  });

  for (std::size_t rep = 0; rep < b; ++rep) (ok[rep] ? band.replicates : band.failures) += 1;
  if (band.failures * 10 > replicates)
    throw FitError("bootstrap: " + std::to_string(band.failures) + " of " +
                   std::to_string(replicates) + " replicates failed");

  const std::size_t g = band.grid.size();
  band.mean_diff.assign(g, 0.0);
  band.se.assign(g, 0.0);
  for (std::size_t rep = 0; rep < b; ++rep) {
    if (!ok[rep]) continue;
    for (std::size_t j = 0; j < g; ++j) band.mean_diff[j] += draws[rep][j];
  }
  for (std::size_t j = 0; j < g; ++j) band.mean_diff[j] /= static_cast<double>(band.replicates);
  if (band.replicates > 1) {
    for (std::size_t rep = 0; rep < b; ++rep) {
      if (!ok[rep]) continue;
      for (std::size_t j = 0; j < g; ++j) {
        const double d = draws[rep][j] - band.mean_diff[j];
        band.se[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < g; ++j)
      band.se[j] = std::sqrt(band.se[j] / static_cast<double>(band.replicates - 1));
  }
  return band;
}

}  // namespace flexrate
