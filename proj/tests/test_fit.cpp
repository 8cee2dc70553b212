#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>

#include "flexrate/fit.hpp"
#include "flexrate/portfolio.hpp"

using namespace flexrate;

namespace {

Portfolio nonlinear_portfolio(std::int64_t n, std::uint64_t seed, const char* law = "power:0.6",
                              double xo = 0.65) {
  SyntheticSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.xo_fraction = xo;
  spec.delta = DeltaLaw::parse(law);
  return simulate(spec);
}

Eigen::VectorXd beta_true_vector() {
  Eigen::VectorXd b(7);
  b << -1.0, 0.2, -0.2, 0.5, 0.3, -0.1, 0.1;
  return b;
}

// Objective the optimizer claims to minimize, recomputed independently from
// the design pieces.
double penalized_objective(const flexrate::detail::Design& d, const Eigen::VectorXd& theta,
                           double power, double lambda) {
  const Eigen::VectorXd eta = d.X * theta + d.offset;
  double total = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    total += d.weights[i] * unit_deviance(d.y[i], std::exp(eta[i]), power);
  if (d.penalty.size() > 0) total += lambda * theta.dot(d.penalty * theta);
  return total;
}

}  // namespace

TEST_CASE("weight schemes evaluate element-wise", "[fit]") {
  const KnotGrid grid = KnotGrid::default_grid();
  const ExposureCurve ident = ExposureCurve::identity(grid);
  Eigen::VectorXd t(4);
  t << 0.25, 0.5, 0.75, 1.0;

  const Eigen::VectorXd cwm = compute_weights(WeightScheme::Cwm, t, ident, 1.5);
  const Eigen::VectorXd off = compute_weights(WeightScheme::TraditionalOffset, t, ident, 1.5);
  for (int i = 0; i < 4; ++i) {
    CHECK(cwm[i] == 1.0);
    CHECK(off[i] == 1.0);
  }

  const Eigen::VectorXd ewm = compute_weights(WeightScheme::Ewm, t, ident, 1.5);
  CHECK(ewm[0] == Catch::Approx(0.5).epsilon(1e-15));  // 0.25^0.5
  CHECK(ewm[3] == 1.0);
  const Eigen::VectorXd ratio = compute_weights(WeightScheme::TraditionalRatio, t, ident, 1.5);
  CHECK((ewm - ratio).cwiseAbs().maxCoeff() == 0.0);

  // A normalized curve gives weight exactly 1 at t = 1.
  ExposureCurve bent = ident;
  bent.coefficients = bent.coefficients.array().pow(0.6);
  bent.coefficients[static_cast<Eigen::Index>(grid.size()) - 1] = 1.0;
  const Eigen::VectorXd gwm = compute_weights(WeightScheme::Gwm, t, bent, 1.42);
  CHECK(gwm[3] == 1.0);
  CHECK(gwm[0] == Catch::Approx(std::pow(CurveEvaluator(bent)(0.25), 0.42)).epsilon(1e-12));

  // Below the first knot the curve value is held at the first-knot level.
  Eigen::VectorXd tiny(1);
  tiny << 0.005;
  const Eigen::VectorXd floor_w = compute_weights(WeightScheme::Gwm, tiny, bent, 1.42);
  CHECK(floor_w[0] ==
        Catch::Approx(std::pow(bent.coefficients[0], 0.42)).epsilon(1e-12));

  // Nonpositive curve values are an error naming the exposure.
  ExposureCurve bad = ident;
  bad.coefficients[2] = -0.4;
  Eigen::VectorXd probe(1);
  probe << bad.grid.knots[2];
  REQUIRE_THROWS_WITH(compute_weights(WeightScheme::Gwm, probe, bad, 1.42),
                      Catch::Matchers::ContainsSubstring("nonpositive at exposure"));
}

TEST_CASE("traditional fit recovers truth when the mean is proportional", "[fit]") {
  const Portfolio p = nonlinear_portfolio(20000, 21, "identity", 0.5);
  FitSpec spec;
  spec.scheme = WeightScheme::TraditionalOffset;
  const FitResult fr = fit(p, spec);
  REQUIRE(fr.converged);
  REQUIRE(fr.beta.size() == 7);
  const Eigen::VectorXd bt = beta_true_vector();
  for (int j = 0; j < 7; ++j) CHECK(std::abs(fr.beta[j] - bt[j]) < 0.08);
  // Traditional fits carry the identity curve.
  CHECK(fr.mean_structure == MeanStructure::TraditionalIdentity);
  REQUIRE(fr.curve.coefficients.size() == static_cast<Eigen::Index>(fr.curve.grid.size()));
  for (std::size_t j = 0; j < fr.curve.grid.size(); ++j)
    CHECK(fr.curve.coefficients[static_cast<Eigen::Index>(j)] == fr.curve.grid.knots[j]);
  CHECK(evaluate(fr.curve, 0.4375) == 0.4375);
  CHECK(fr.lambda == 0.0);
  CHECK(fr.deviance_train >= 0.0);
  CHECK_FALSE(fr.irls.empty());
}

TEST_CASE("flexible fit absorbs a nonlinear exposure law that biases the traditional model",
          "[fit]") {
  const Portfolio p = nonlinear_portfolio(20000, 33);
  const Eigen::VectorXd bt = beta_true_vector();

  FitSpec flex;
  flex.scheme = WeightScheme::Ewm;
  const FitResult fr = fit(p, flex);
  REQUIRE(fr.converged);
  for (int j = 0; j < 7; ++j) CHECK(std::abs(fr.beta[j] - bt[j]) < 0.08);
  // Curve tracks t^0.6 at interior knots and is pinned at the last knot.
  CHECK(fr.curve.coefficients[static_cast<Eigen::Index>(fr.curve.grid.size()) - 1] == 1.0);
  for (std::size_t j = 1; j + 1 < fr.curve.grid.size(); ++j)
    CHECK(std::abs(fr.curve.coefficients[static_cast<Eigen::Index>(j)] -
                   std::pow(fr.curve.grid.knots[j], 0.6)) < 0.08);

  FitSpec trad;
  trad.scheme = WeightScheme::TraditionalRatio;
  const FitResult tr = fit(p, trad);
  REQUIRE(tr.converged);
  // The proportional-mean model cannot represent t^0.6: the intercept soaks
  // up the average distortion.
  CHECK(std::abs(tr.beta[0] - bt[0]) > 0.08);
}

TEST_CASE("returned optimum has vanishing penalized gradient", "[fit]") {
  const Portfolio p = nonlinear_portfolio(500, 31);
  const flexrate::detail::PortfolioView v = flexrate::detail::make_view(p);
  const KnotGrid grid = KnotGrid::default_grid();
  const double power = 1.42, lambda = 2.5;

  const Eigen::VectorXd raw =
      compute_weights(WeightScheme::Ewm, v.exposures, ExposureCurve::identity(grid), power);
  const flexrate::detail::Design d = flexrate::detail::flexible_design(v, grid, raw);
  const flexrate::detail::IrlsOutcome sol =
      flexrate::detail::irls(d, power, lambda, 1e-13, 200);
  REQUIRE(sol.converged);

  // Analytic gradient: sum_i w_i * 2 mu^(1-p) (mu - y) x_i + 2 lambda P theta.
  const Eigen::VectorXd eta = d.X * sol.theta + d.offset;
  Eigen::VectorXd grad = 2.0 * lambda * (d.penalty * sol.theta);
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double mu = std::exp(eta[i]);
    grad += d.weights[i] * 2.0 * std::pow(mu, 1.0 - power) * (mu - d.y[i]) *
            d.X.row(i).transpose();
  }
  CHECK(grad.cwiseAbs().maxCoeff() < 1e-5);

  // Central finite differences agree on a few coordinates.
  for (Eigen::Index j : {0, 6, 10}) {
    const double h = 1e-6;
    Eigen::VectorXd up = sol.theta, dn = sol.theta;
    up[j] += h;
    dn[j] -= h;
    const double fd =
        (penalized_objective(d, up, power, lambda) - penalized_objective(d, dn, power, lambda)) /
        (2.0 * h);
    CHECK(std::abs(fd) < 1e-4);
    CHECK(std::abs(fd - grad[j]) < 1e-4);
  }
}

TEST_CASE("fits are invariant to rescaling all weights", "[fit]") {
  const Portfolio p = nonlinear_portfolio(1500, 57);
  const flexrate::detail::PortfolioView v = flexrate::detail::make_view(p);
  const KnotGrid grid = KnotGrid::default_grid();
  const Eigen::VectorXd raw =
      compute_weights(WeightScheme::Ewm, v.exposures, ExposureCurve::identity(grid), 1.42);

  const flexrate::detail::Design d1 = flexrate::detail::flexible_design(v, grid, raw);
  const flexrate::detail::Design d2 = flexrate::detail::flexible_design(v, grid, 7.3 * raw);
  // Mean-1 normalization removes the scale before the optimizer sees it.
  CHECK((d1.weights - d2.weights).cwiseAbs().maxCoeff() < 1e-13);
  const auto s1 = flexrate::detail::irls(d1, 1.42, 0.8, 1e-11, 100);
  const auto s2 = flexrate::detail::irls(d2, 1.42, 0.8, 1e-11, 100);
  CHECK((s1.theta - s2.theta).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("ridge selection picks from the grid and is overridable", "[fit]") {
  const Portfolio p = nonlinear_portfolio(3000, 44, "scurve:6");
  FitSpec spec;
  spec.scheme = WeightScheme::Ewm;
  const FitResult auto_fit = fit(p, spec);
  REQUIRE(auto_fit.converged);
  bool on_grid = false;
  for (int g = 0; g < 20; ++g) {
    const double cand = std::pow(10.0, -4.0 + 8.0 * g / 19.0);
    if (std::abs(auto_fit.lambda - cand) <= 1e-12 * cand) on_grid = true;
  }
  CHECK(on_grid);

  spec.ridge_lambda = 7.0;
  const FitResult manual = fit(p, spec);
  CHECK(manual.lambda == 7.0);

  // A crushing penalty flattens log-curve curvature toward the null space.
  spec.ridge_lambda = 1e8;
  const FitResult flat = fit(p, spec);
  const Eigen::MatrixXd S = penalty_matrix(spec.grid);
  CHECK(flat.log_curve.dot(S * flat.log_curve) < 1e-3);
  CHECK(auto_fit.deviance_train < flat.deviance_train + 1e-9);
}

TEST_CASE("iterative curve weights converge rapidly on nonlinear data", "[fit][gwm]") {
  const Portfolio p = nonlinear_portfolio(8000, 71, "scurve:6");
  FitSpec spec;
  spec.scheme = WeightScheme::Gwm;
  spec.tol = 1e-5;
  spec.max_iter = 20;
  const FitResult fr = fit(p, spec);
  REQUIRE(fr.converged);
  REQUIRE_FALSE(fr.trace.empty());
  CHECK(fr.trace.size() <= 12);
  CHECK(std::isnan(fr.trace.front().max_weight_change));
  CHECK(fr.trace.front().iteration == 1);
  CHECK(fr.trace.back().max_curve_change < 1e-5);
  CHECK(fr.trace.back().max_weight_change < 1e-3);
  CHECK(fr.curve.coefficients[static_cast<Eigen::Index>(spec.grid.size()) - 1] == 1.0);
  CHECK(fr.lambda > 0.0);

  // Same data, same spec: the dispatcher and direct entry point agree.
  const FitResult again = fit_gwm(p, spec);
  CHECK((again.beta - fr.beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK(again.trace.size() == fr.trace.size());

  // The curve should resemble the true normalized s-curve at the knots.
  const DeltaLaw truth = DeltaLaw::parse("scurve:6");
  for (std::size_t j = 2; j < spec.grid.size(); ++j)
    CHECK(std::abs(fr.curve.coefficients[static_cast<Eigen::Index>(j)] -
                   truth(spec.grid.knots[j])) < 0.1);
}

TEST_CASE("iterative fit with infinite tolerance stops after the first refit", "[fit][gwm]") {
  const Portfolio p = nonlinear_portfolio(2000, 13);
  FitSpec spec;
  spec.scheme = WeightScheme::Gwm;
  spec.tol = std::numeric_limits<double>::infinity();
  const FitResult fr = fit_gwm(p, spec);
  CHECK(fr.converged);
  CHECK(fr.trace.size() == 2);
  CHECK(fr.trace[1].iteration == 2);
  CHECK(fr.trace[1].max_weight_change >= 0.0);
}

TEST_CASE("consistency gradient vanishes exactly when exposure laws match", "[fit]") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> coef(-0.8, 0.8), td(0.05, 1.0);
  const auto linear = [](double t) { return t; };
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::VectorXd beta(3), x(3);
    for (int j = 0; j < 3; ++j) {
      beta[j] = coef(rng);
      x[j] = coef(rng);
    }
    const double t = td(rng);
    const Eigen::VectorXd g0 =
        consistency_gradient(beta, beta, x, t, linear, linear, 1.42);
    CHECK(g0.cwiseAbs().maxCoeff() <= 1e-12);

    // Arbitrary matching nonlinear law.
    const auto curvy = [](double t2) { return std::pow(t2, 0.7) * (1.2 - 0.2 * t2); };
    const Eigen::VectorXd g1 =
        consistency_gradient(beta, beta, x, t, curvy, curvy, 1.42);
    CHECK(g1.cwiseAbs().maxCoeff() <= 1e-12);
  }

  // Mismatch: delta = t^0.6 against gamma = t, evaluated by direct arithmetic.
  Eigen::VectorXd b1(1), x1(1);
  b1 << 0.3;
  x1 << 1.0;
  const double p = 1.42, t = 0.5;
  const Eigen::VectorXd g = consistency_gradient(
      b1, b1, x1, t, [](double u) { return std::pow(u, 0.6); }, linear, p);
  const double expected = std::pow(0.5, 0.6) * std::pow(0.5, 1.0 - p) *
                              std::exp((1.0 - p) * 0.3 + 0.3) -
                          std::pow(0.5, 2.0 - p) * std::exp((2.0 - p) * 0.3);
  REQUIRE(g.size() == 1);
  CHECK(g[0] == Catch::Approx(expected).epsilon(1e-14));
  CHECK(g[0] > 0.0);  // t^0.6 > t on (0,1): truth exceeds the proportional model
}

TEST_CASE("quasi-likelihood criterion is maximized at the true mean", "[fit]") {
  CHECK(kl_criterion(1.0, 1.0, 1.5) == -4.0);

  // Finite-difference stationarity at mu = mu_true.
  const double h = 1e-5;
  const double fd = (kl_criterion(2.0 + h, 2.0, 1.42) - kl_criterion(2.0 - h, 2.0, 1.42)) / (2 * h);
  CHECK(std::abs(fd) < 1e-6);

  // Grid-search oracle: argmax over [0.1, 10] lands at mu_true.
  double best_mu = 0.0, best_val = -std::numeric_limits<double>::infinity();
  for (double mu = 0.1; mu <= 10.0; mu += 0.005) {
    const double v = kl_criterion(mu, 2.0, 1.42);
    if (v > best_val) {
      best_val = v;
      best_mu = mu;
    }
  }
  CHECK(std::abs(best_mu - 2.0) <= 0.005 + 1e-12);

  CHECK_THROWS_AS(kl_criterion(0.0, 1.0, 1.5), std::invalid_argument);
}

TEST_CASE("predictions follow the declared mean structure", "[fit]") {
  const Portfolio p = nonlinear_portfolio(4000, 17);
  FitSpec trad;
  trad.scheme = WeightScheme::TraditionalOffset;
  const FitResult tf = fit(p, trad);
  const Eigen::VectorXd mu_t = predict(tf, p);
  const PolicyRecord& r0 = p.records[0];
  double eta0 = tf.beta[0];
  for (int j = 0; j < 5; ++j) eta0 += tf.beta[j + 1] * r0.x[static_cast<std::size_t>(j)];
  eta0 += tf.beta[6] * (r0.bms_level - 100);
  CHECK(mu_t[0] == Catch::Approx(r0.exposure * std::exp(eta0)).epsilon(1e-12));

  FitSpec flex;
  flex.scheme = WeightScheme::Ewm;
  const FitResult ff = fit(p, flex);
  const Eigen::VectorXd mu_f = predict(ff, p);
  REQUIRE(mu_f.minCoeff() > 0.0);
  // At a knot, the spline prediction factors through the curve value.
  Portfolio probe;
  PolicyRecord r;
  r.exposure = ff.curve.grid.knots[3];
  r.contract_type = ContractType::XO;
  probe.records.push_back(r);
  const double mu_knot = predict(ff, probe)[0];
  CHECK(mu_knot ==
        Catch::Approx(std::exp(ff.beta[0]) * ff.curve.coefficients[3]).epsilon(1e-12));

  // Training deviance can be reproduced from predictions and scheme weights.
  const Eigen::VectorXd mu_all = predict(ff, p);
  const flexrate::detail::PortfolioView v = flexrate::detail::make_view(p);
  Eigen::VectorXd w = compute_weights(WeightScheme::Ewm, v.exposures, ff.curve, ff.power);
  w *= static_cast<double>(p.size()) / w.sum();
  double dev = 0.0;
  for (Eigen::Index i = 0; i < mu_all.size(); ++i)
    dev += w[i] * unit_deviance(v.y[i], mu_all[i], ff.power);
  CHECK(dev == Catch::Approx(ff.deviance_train).epsilon(1e-9));
}

TEST_CASE("fit error paths", "[fit]") {
  FitSpec spec;
  REQUIRE_THROWS_AS(fit(Portfolio{}, spec), FitError);

  // All-zero losses cannot identify a log-link mean.
  Portfolio zeros;
  for (int i = 0; i < 50; ++i) {
    PolicyRecord r;
    r.exposure = 1.0;
    r.contract_type = ContractType::XX;
    zeros.records.push_back(r);
  }
  REQUIRE_THROWS_AS(fit(zeros, spec), FitError);

  // Duplicated covariate columns are rank deficient.
  Portfolio collinear = nonlinear_portfolio(400, 3, "identity", 0.3);
  for (auto& r : collinear.records) r.x[1] = r.x[0];
  FitSpec trad;
  trad.scheme = WeightScheme::TraditionalOffset;
  REQUIRE_THROWS_WITH(fit(collinear, trad),
                      Catch::Matchers::ContainsSubstring("rank deficient"));

  FitSpec bad = spec;
  bad.power = 2.0;
  const Portfolio small = nonlinear_portfolio(100, 4, "identity", 0.3);
  REQUIRE_THROWS_AS(fit(small, bad), std::invalid_argument);
  bad = spec;
  bad.tol = 0.0;
  REQUIRE_THROWS_AS(fit(small, bad), std::invalid_argument);
  bad = spec;
  bad.max_iter = 0;
  REQUIRE_THROWS_AS(fit(small, bad), std::invalid_argument);
  bad = spec;
  bad.ridge_lambda = -1.0;
  REQUIRE_THROWS_AS(fit(small, bad), std::invalid_argument);

  REQUIRE_THROWS_AS(fit_gwm(small, spec), std::invalid_argument);  // wrong scheme

  // Hitting max_iter is reported, not thrown.
  FitSpec strict;
  strict.scheme = WeightScheme::TraditionalOffset;
  strict.max_iter = 1;
  const FitResult fr = fit(nonlinear_portfolio(500, 6, "identity", 0.3), strict);
  CHECK_FALSE(fr.converged);
  CHECK_FALSE(fr.diagnostic.empty());
}
