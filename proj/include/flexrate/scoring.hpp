#pragma once
// Model-comparison criteria: normalized weighted deviance, concentration and
// Lorenz curves with the Area criterion, and Murphy diagrams with a pointwise
// dominance check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexrate/fit.hpp"
#include "flexrate/portfolio.hpp"
#include "flexrate/tweedie.hpp"

namespace flexrate {

// Concentration curve (cumulative loss share) and Lorenz curve (cumulative
// rebalanced-premium share), both indexed by the premium-sorted population
// fraction theta = k/n, k = 0..n.
struct CurvePair {
  std::vector<double> theta;
  std::vector<double> cc;
  std::vector<double> lc;
};

struct AreaResult {
  double area = 0.0;  // integral of |cc - lc|, in [0, 1]
  double abc = 0.0;   // signed integral of cc - lc; compensations can shrink it
};

struct MurphyPoint {
  double m = 0.0;
  double loss = 0.0;  // elementary score; negative when m undercuts the losses
};

struct DominanceResult {
  bool dominates = false;
  std::vector<double> violations;  // thresholds m where curve a exceeds curve b
};

enum class DatasetTag { Train, Test };

inline std::string to_string(DatasetTag tag) {
  return tag == DatasetTag::Train ? "train" : "test";
}

struct ScoreReport {
  double deviance = 0.0;  // normalized weighted deviance, raw scale
  double area = 0.0;
  double abc = 0.0;
  std::vector<MurphyPoint> murphy;
  DatasetTag dataset_tag = DatasetTag::Train;
};

// Both curves share one ordering: stable sort by premium ascending, ties kept
// in original order. Premiums are rebalanced by sum(y)/sum(mu) so the Lorenz
// curve compares like with like; the concentration curve only uses the
// ordering and is therefore invariant under any positive rescaling of mu.
inline CurvePair concentration_lorenz(const std::vector<double>& y,
                                      const std::vector<double>& mu_hat) {
  if (y.size() != mu_hat.size())
    throw std::invalid_argument("concentration_lorenz: length mismatch");
  const std::size_t n = y.size();
  if (n == 0) throw std::invalid_argument("concentration_lorenz: empty input");

  double sum_y = 0.0;
  double sum_mu = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] < 0.0 || !std::isfinite(y[i]))
      throw std::invalid_argument("concentration_lorenz: losses must be finite and nonnegative");
    if (!(mu_hat[i] > 0.0) || !std::isfinite(mu_hat[i]))
      throw std::invalid_argument("concentration_lorenz: premiums must be positive");
    sum_y += y[i];
    sum_mu += mu_hat[i];
  }
  if (!(sum_y > 0.0))
    throw std::invalid_argument("concentration_lorenz: losses are all zero");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mu_hat[a] < mu_hat[b]; });

  CurvePair out;
  out.theta.resize(n + 1);
  out.cc.resize(n + 1);
  out.lc.resize(n + 1);
  out.theta[0] = 0.0;
  out.cc[0] = 0.0;
  out.lc[0] = 0.0;
  double acc_y = 0.0;
  double acc_mu = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const std::size_t i = order[k - 1];
    acc_y += y[i];
    acc_mu += mu_hat[i];
    out.theta[k] = static_cast<double>(k) / static_cast<double>(n);
    out.cc[k] = acc_y / sum_y;
    out.lc[k] = acc_mu / sum_mu;
  }
  // Full cumulative shares are 1 by construction; pin them so the endpoint
  // identity is exact rather than subject to summation-order rounding.
  out.theta[n] = 1.0;
  out.cc[n] = 1.0;
  out.lc[n] = 1.0;
  return out;
}

// The empirical curves are step functions taking the value at k/n on the
// whole interval ((k-1)/n, k/n], so the exact integral is the right-endpoint
// sum. Both differences vanish at theta = 0 and 1, which makes this agree
// with trapezoidal integration of the plotted polyline.
inline AreaResult area_between(const CurvePair& curves) {
  const std::size_t m = curves.theta.size();
  if (m < 2 || curves.cc.size() != m || curves.lc.size() != m)
    throw std::invalid_argument("area_between: malformed curve pair");
  AreaResult out;
  for (std::size_t k = 1; k < m; ++k) {
    const double width = curves.theta[k] - curves.theta[k - 1];
    if (!(width >= 0.0)) throw std::invalid_argument("area_between: theta grid not sorted");
    const double diff = curves.cc[k] - curves.lc[k];
    out.area += width * std::abs(diff);
    out.abc += width * diff;
  }
  return out;
}

// 201 equispaced thresholds from 0 to 1.05 * max premium.
inline std::vector<double> default_m_grid(const std::vector<double>& mu_hat) {
  if (mu_hat.empty()) throw std::invalid_argument("default_m_grid: empty premiums");
  const double top = 1.05 * *std::max_element(mu_hat.begin(), mu_hat.end());
  std::vector<double> grid(201);
  for (std::size_t j = 0; j < grid.size(); ++j)
    grid[j] = top * static_cast<double>(j) / 200.0;
  return grid;
}

// Empirical elementary score at threshold m:
//   L_m = (1/2n) * sum over {i : mu_i > m} of (m - y_i).
// The qualifying set is a suffix of the premium-sorted sample, so one sort
// plus suffix sums serves the whole grid.
inline std::vector<MurphyPoint> murphy_curve(const std::vector<double>& y,
                                             const std::vector<double>& mu_hat,
                                             const std::vector<double>& m_grid) {
  if (y.size() != mu_hat.size())
    throw std::invalid_argument("murphy_curve: length mismatch");
  if (y.empty()) throw std::invalid_argument("murphy_curve: empty input");
  if (m_grid.empty()) throw std::invalid_argument("murphy_curve: empty threshold grid");
  if (!std::is_sorted(m_grid.begin(), m_grid.end()))
    throw std::invalid_argument("murphy_curve: threshold grid must be sorted");

  const std::size_t n = y.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return mu_hat[a] < mu_hat[b]; });
  std::vector<double> mu_sorted(n);
  std::vector<double> suffix_y(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) mu_sorted[k] = mu_hat[order[k]];
  for (std::size_t k = n; k-- > 0;) suffix_y[k] = suffix_y[k + 1] + y[order[k]];

  std::vector<MurphyPoint> out(m_grid.size());
  for (std::size_t j = 0; j < m_grid.size(); ++j) {
    const double m = m_grid[j];
    const auto first_above =
        std::upper_bound(mu_sorted.begin(), mu_sorted.end(), m) - mu_sorted.begin();
    const auto count = static_cast<double>(n - static_cast<std::size_t>(first_above));
    const double loss = (count * m - suffix_y[static_cast<std::size_t>(first_above)]) /
                        (2.0 * static_cast<double>(n));
    out[j] = MurphyPoint{m, loss};
  }
  return out;
}

// a dominates b when its loss is no worse at every threshold, up to tolerance.
inline DominanceResult murphy_dominates(const std::vector<MurphyPoint>& a,
                                        const std::vector<MurphyPoint>& b,
                                        double tolerance = 0.0) {
  if (a.size() != b.size())
    throw std::invalid_argument("murphy_dominates: threshold grids differ");
  DominanceResult out;
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a[j].m != b[j].m)
      throw std::invalid_argument("murphy_dominates: threshold grids differ");
    if (a[j].loss > b[j].loss + tolerance) out.violations.push_back(a[j].m);
  }
  out.dominates = out.violations.empty();
  return out;
}

// Weighted deviance with the fit's own exposure weights normalized to sum 1,
// which puts models with different weight scales on a comparable footing.
// Displayed tables conventionally multiply by 100; this returns the raw value.
inline double normalized_deviance(const FitResult& fit, const Portfolio& data) {
  const auto n = static_cast<Eigen::Index>(data.records.size());
  if (n == 0) throw std::invalid_argument("normalized_deviance: empty portfolio");
  Eigen::VectorXd exposures(n);
  for (Eigen::Index i = 0; i < n; ++i)
    exposures[i] = data.records[static_cast<std::size_t>(i)].exposure;
  const Eigen::VectorXd weights = compute_weights(fit.scheme, exposures, fit.curve, fit.power);
  const double total = weights.sum();
  if (!(total > 0.0)) throw std::invalid_argument("normalized_deviance: zero total weight");
  const Eigen::VectorXd mu = predict(fit, data);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(mu[i] > 0.0)) throw FitError("normalized_deviance: fitted premium is nonpositive");
    acc += (weights[i] / total) *
           unit_deviance(data.records[static_cast<std::size_t>(i)].loss_cost, mu[i], fit.power);
  }
  return acc;
}

inline ScoreReport score(const FitResult& fit, const Portfolio& data, DatasetTag tag,
                         const std::vector<double>& m_grid = {}) {
  const std::size_t n = data.records.size();
  if (n == 0) throw std::invalid_argument("score: empty portfolio");
  const Eigen::VectorXd mu_vec = predict(fit, data);
  std::vector<double> y(n);
  std::vector<double> mu(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = data.records[i].loss_cost;
    mu[i] = mu_vec[static_cast<Eigen::Index>(i)];
  }
  ScoreReport report;
  report.dataset_tag = tag;
  report.deviance = normalized_deviance(fit, data);
  const AreaResult ab = area_between(concentration_lorenz(y, mu));
  report.area = ab.area;
  report.abc = ab.abc;
  report.murphy = murphy_curve(y, mu, m_grid.empty() ? default_m_grid(mu) : m_grid);
  return report;
}

}  // namespace flexrate
