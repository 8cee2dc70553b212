#pragma once
// Natural cubic regression splines in value-at-knot (cardinal) form.
//
// A curve is the natural-spline interpolant of (knots, coefficients); the
// basis row at t collects the weights each coefficient receives, so
// evaluation at knot j returns coefficient j bit-exactly and the all-ones
// coefficient vector reproduces the constant 1. Natural boundary conditions
// give linear continuation below the first knot. The curvature penalty is
// S = Q R^{-1} Q^T (integral of the squared second derivative over
// [first knot, 1]); its null space is spanned by constant and linear
// coefficient patterns.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace flexrate {

struct KnotGrid {
  std::vector<double> knots;  // strictly increasing, in (0,1], last exactly 1, K >= 4

  std::size_t size() const { return knots.size(); }

  void validate() const {
    if (knots.size() < 4) throw std::invalid_argument("knot grid: need at least 4 knots");
    if (!(knots.front() > 0.0)) throw std::invalid_argument("knot grid: first knot must be > 0");
    if (knots.back() != 1.0) throw std::invalid_argument("knot grid: last knot must be exactly 1");
    for (std::size_t j = 1; j < knots.size(); ++j)
      if (!(knots[j] > knots[j - 1]))
        throw std::invalid_argument("knot grid: knots must be strictly increasing");
  }

  // 0.02 plus nine equally spaced knots on [0.1, 1]: curvature of fitted
  // exposure curves concentrates at short exposures, so the grid does too.
  static KnotGrid default_grid() {
    return KnotGrid{{0.02, 0.1, 0.2125, 0.325, 0.4375, 0.55, 0.6625, 0.775, 0.8875, 1.0}};
  }
};

struct ExposureCurve {
  KnotGrid grid;
  Eigen::VectorXd coefficients;  // value at knot j

  static ExposureCurve identity(const KnotGrid& g) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(g.size()));
    for (Eigen::Index j = 0; j < c.size(); ++j) c[j] = g.knots[static_cast<std::size_t>(j)];
    return {g, std::move(c)};
  }
};

namespace detail {

// Solves the natural-spline tridiagonal system R m_int = Q^T c for the
// second derivatives at interior knots (boundary second derivatives are 0).
inline Eigen::VectorXd interior_second_derivatives(const std::vector<double>& k,
                                                   const Eigen::VectorXd& c) {
  const std::size_t K = k.size();
  const std::size_t m = K - 2;
  Eigen::VectorXd diag(m), sub(m), rhs(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double h0 = k[j + 1] - k[j];
    const double h1 = k[j + 2] - k[j + 1];
    diag[static_cast<Eigen::Index>(j)] = (h0 + h1) / 3.0;
    sub[static_cast<Eigen::Index>(j)] = h1 / 6.0;  // coupling to the next interior knot
    rhs[static_cast<Eigen::Index>(j)] = (c[static_cast<Eigen::Index>(j + 2)] - c[static_cast<Eigen::Index>(j + 1)]) / h1 -
                                        (c[static_cast<Eigen::Index>(j + 1)] - c[static_cast<Eigen::Index>(j)]) / h0;
  }
  // Thomas algorithm; the system is symmetric positive definite.
  Eigen::VectorXd cp(m), dp(m);
  cp[0] = sub[0] / diag[0];
  dp[0] = rhs[0] / diag[0];
  for (std::size_t j = 1; j < m; ++j) {
    const Eigen::Index i = static_cast<Eigen::Index>(j);
    const double denom = diag[i] - sub[i - 1] * cp[i - 1];
    cp[i] = sub[i] / denom;
    dp[i] = (rhs[i] - sub[i - 1] * dp[i - 1]) / denom;
  }
  Eigen::VectorXd sol(m);
  sol[static_cast<Eigen::Index>(m - 1)] = dp[static_cast<Eigen::Index>(m - 1)];
  for (std::size_t j = m - 1; j-- > 0;) {
    const Eigen::Index i = static_cast<Eigen::Index>(j);
    sol[i] = dp[i] - cp[i] * sol[i + 1];
  }
  return sol;
}

// Interval index i with k[i] <= t < k[i+1] (clamped to the last interval).
inline std::size_t interval_of(const std::vector<double>& k, double t) {
  const auto it = std::upper_bound(k.begin(), k.end(), t);
  std::size_t i = static_cast<std::size_t>(it - k.begin());
  if (i == 0) return 0;
  if (i >= k.size()) return k.size() - 2;
  return i - 1;
}

// Piecewise-cubic value given knot values c and full second-derivative
// vector m (m[0] = m[K-1] = 0); t below the first knot extrapolates linearly.
inline double spline_value(const std::vector<double>& k, const Eigen::VectorXd& c,
                           const Eigen::VectorXd& m, double t) {
  const std::size_t K = k.size();
  // Bit-exact return of the coefficient when t sits on a knot.
  for (std::size_t j = 0; j < K; ++j)
    if (t == k[j]) return c[static_cast<Eigen::Index>(j)];
  if (t < k.front()) {
    const double h = k[1] - k[0];
    const double slope = (c[1] - c[0]) / h - h / 6.0 * m[1];
    return c[0] + slope * (t - k.front());
  }
  const std::size_t i = interval_of(k, t);
  const Eigen::Index a = static_cast<Eigen::Index>(i);
  const double h = k[i + 1] - k[i];
  const double dl = k[i + 1] - t, dr = t - k[i];
  return m[a] * dl * dl * dl / (6.0 * h) + m[a + 1] * dr * dr * dr / (6.0 * h) +
         (c[a] / h - m[a] * h / 6.0) * dl + (c[a + 1] / h - m[a + 1] * h / 6.0) * dr;
}

}  // namespace detail

// Caches the second derivatives of one curve for repeated evaluation.
class CurveEvaluator {
 public:
  explicit CurveEvaluator(const ExposureCurve& curve) : grid_(curve.grid), c_(curve.coefficients) {
    grid_.validate();
    if (static_cast<std::size_t>(c_.size()) != grid_.size())
      throw std::invalid_argument("exposure curve: coefficient count must equal knot count");
    m_ = Eigen::VectorXd::Zero(c_.size());
    m_.segment(1, c_.size() - 2) = detail::interior_second_derivatives(grid_.knots, c_);
  }

  double operator()(double t) const {
    if (!(t > 0.0 && t <= 1.0))
      throw std::domain_error("curve evaluation: t must lie in (0,1]");
    return detail::spline_value(grid_.knots, c_, m_, t);
  }

 private:
  KnotGrid grid_;
  Eigen::VectorXd c_;
  Eigen::VectorXd m_;
};

inline double evaluate(const ExposureCurve& curve, double t) {
  return CurveEvaluator(curve)(t);
}

// Cardinal basis machinery for a fixed grid: basis rows (so that
// row(t) . c = spline value) and the curvature penalty matrix.
class CardinalBasis {
 public:
  explicit CardinalBasis(KnotGrid grid) : grid_(std::move(grid)) {
    grid_.validate();
    const std::size_t K = grid_.size();
    const std::size_t m = K - 2;
    const auto& k = grid_.knots;

    // Q: K x (K-2) second-difference map, R: (K-2) x (K-2) Gram matrix of
    // the piecewise-linear second-derivative representation.
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(m));
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
      const double h0 = k[j + 1] - k[j];
      const double h1 = k[j + 2] - k[j + 1];
      const Eigen::Index jc = static_cast<Eigen::Index>(j);
      Q(jc, jc) = 1.0 / h0;
      Q(jc + 1, jc) = -1.0 / h0 - 1.0 / h1;
      Q(jc + 2, jc) = 1.0 / h1;
      R(jc, jc) = (h0 + h1) / 3.0;
      if (j + 1 < m) {
        R(jc, jc + 1) = h1 / 6.0;
        R(jc + 1, jc) = h1 / 6.0;
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(R);
    second_deriv_map_ = ldlt.solve(Q.transpose());          // (K-2) x K
    penalty_ = Q * second_deriv_map_;                       // Q R^{-1} Q^T
    penalty_ = 0.5 * (penalty_ + penalty_.transpose().eval());  // enforce exact symmetry
  }

  const KnotGrid& grid() const { return grid_; }

  const Eigen::MatrixXd& penalty() const { return penalty_; }

  // Basis row: spline_value(t) = row(t) . c for every coefficient vector c.
  Eigen::RowVectorXd row(double t) const {
    const auto& k = grid_.knots;
    const std::size_t K = k.size();
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(K));
    for (std::size_t j = 0; j < K; ++j)
      if (t == k[j]) {
        r[static_cast<Eigen::Index>(j)] = 1.0;
        return r;
      }
    if (t < k.front()) {
      const double h = k[1] - k[0];
      const double dt = t - k.front();
      r[0] = 1.0 - dt / h;
      r[1] = dt / h;
      r -= dt * h / 6.0 * second_deriv_map_.row(0);
      return r;
    }
    const std::size_t i = detail::interval_of(k, t);
    const double h = k[i + 1] - k[i];
    const double dl = k[i + 1] - t, dr = t - k[i];
    const Eigen::Index a = static_cast<Eigen::Index>(i);
    r[a] = dl / h;
    r[a + 1] = dr / h;
    // Weight on each interior second derivative; boundary ones are zero.
    const double wl = dl * dl * dl / (6.0 * h) - h / 6.0 * dl;
    const double wr = dr * dr * dr / (6.0 * h) - h / 6.0 * dr;
    if (i >= 1) r += wl * second_deriv_map_.row(static_cast<Eigen::Index>(i - 1));
    if (i + 1 <= K - 2) r += wr * second_deriv_map_.row(static_cast<Eigen::Index>(i));
    return r;
  }

 private:
  KnotGrid grid_;
  Eigen::MatrixXd second_deriv_map_;  // rows indexed by interior knots 2..K-1
  Eigen::MatrixXd penalty_;
};

// n x K matrix of cardinal basis rows at the given points.
inline Eigen::MatrixXd build_basis(const std::vector<double>& points, const KnotGrid& grid) {
  if (points.empty()) throw std::invalid_argument("build_basis: empty point set");
  for (double t : points)
    if (!(t > 0.0 && t <= 1.0))
      throw std::domain_error("build_basis: points must lie in (0,1]");
  const CardinalBasis basis(grid);
  Eigen::MatrixXd B(static_cast<Eigen::Index>(points.size()), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t i = 0; i < points.size(); ++i)
    B.row(static_cast<Eigen::Index>(i)) = basis.row(points[i]);
  return B;
}

// Curvature penalty: c^T S c = integral of the squared second derivative.
inline Eigen::MatrixXd penalty_matrix(const KnotGrid& grid) {
  return CardinalBasis(grid).penalty();
}

// Rescales so the curve passes through 1 at t = 1 (the last knot), making
// the normalized value at full exposure exact.
inline ExposureCurve normalize(const ExposureCurve& curve) {
  curve.grid.validate();
  if (static_cast<std::size_t>(curve.coefficients.size()) != curve.grid.size())
    throw std::invalid_argument("exposure curve: coefficient count must equal knot count");
  const double at_one = curve.coefficients[curve.coefficients.size() - 1];
  if (!(at_one > 0.0))
    throw std::domain_error("normalize: curve must be positive at t = 1");
  ExposureCurve out{curve.grid, curve.coefficients / at_one};
  out.coefficients[out.coefficients.size() - 1] = 1.0;
  return out;
}

}  // namespace flexrate
