#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "flexrate/fit.hpp"
#include "flexrate/group_fit.hpp"
#include "flexrate/portfolio.hpp"

namespace {

using namespace flexrate;

Portfolio planted_portfolio(std::int64_t n, std::uint64_t seed, bool distinct_groups) {
  SyntheticSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.delta = DeltaLaw::parse("power:0.6");
  if (distinct_groups) {
    spec.delta_high = DeltaLaw::parse("scurve:6");
    spec.plant_cut = 99;
  }
  return simulate(spec);
}

FitSpec group_spec() {
  FitSpec spec;
  spec.scheme = WeightScheme::Ewm;
  return spec;
}

}  // namespace

TEST_CASE("group map assigns levels by cut", "[groupfit]") {
  const GroupMap map = GroupMap::from_cut(99);
  for (int level = 95; level <= 99; ++level) CHECK(map.group_of(level) == 1);
  for (int level = 100; level <= 104; ++level) CHECK(map.group_of(level) == 2);
  map.validate();

  CHECK_THROWS_AS(GroupMap::from_cut(94), std::invalid_argument);
  CHECK_THROWS_AS(GroupMap::from_cut(104), std::invalid_argument);
  CHECK_THROWS_AS(map.group_of(94), std::invalid_argument);
  CHECK_THROWS_AS(map.group_of(105), std::invalid_argument);

  GroupMap lopsided;
  lopsided.groups.fill(1);
  CHECK_THROWS_AS(lopsided.validate(), std::invalid_argument);
  GroupMap corrupt = map;
  corrupt.groups[3] = 7;
  CHECK_THROWS_AS(corrupt.validate(), std::invalid_argument);
}

TEST_CASE("exposure share weights bin contracts exactly", "[groupfit]") {
  Portfolio p;
  const double exposures[] = {1.0, 1.0, 0.5, 0.0051, 0.005, 0.21};
  for (const double t : exposures) {
    PolicyRecord r;
    r.exposure = t;
    r.x = {0, 0, 0, 0, 0};
    r.bms_level = 100;
    r.loss_cost = 0.0;
    r.contract_type = t == 1.0 ? ContractType::XX : ContractType::XO;
    p.records.push_back(r);
  }
  const std::vector<double> w = detail::exposure_share_weights(p);
  REQUIRE(w.size() == 200);

  // Brute-force binning oracle over half-open cells ((j-1)/200, j/200].
  std::vector<double> want(200, 0.0);
  for (const double t : exposures) {
    for (int j = 1; j <= 200; ++j) {
      if (t > (j - 1) / 200.0 && t <= j / 200.0 + 1e-15) {
        want[static_cast<std::size_t>(j - 1)] += 1.0 / 6.0;
        break;
      }
    }
  }
  double total = 0.0;
  for (std::size_t j = 0; j < 200; ++j) {
    CHECK(w[j] == want[j]);
    total += w[j];
  }
  CHECK_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK(w[199] == Catch::Approx(2.0 / 6.0));  // the two full-term contracts
  CHECK(w[0] == Catch::Approx(1.0 / 6.0));    // exposure 0.005
  CHECK(w[1] == Catch::Approx(1.0 / 6.0));    // exposure 0.0051
  CHECK(w[41] == Catch::Approx(1.0 / 6.0));   // exposure 0.21 sits on the 42nd cell edge
  CHECK(w[99] == Catch::Approx(1.0 / 6.0));   // exposure 0.5
}

TEST_CASE("group splines reject schemes without a per-contract weight law", "[groupfit]") {
  const Portfolio p = planted_portfolio(400, 5, false);
  const GroupMap map = GroupMap::from_cut(99);
  for (const WeightScheme s :
       {WeightScheme::TraditionalOffset, WeightScheme::TraditionalRatio, WeightScheme::Gwm}) {
    FitSpec spec = group_spec();
    spec.scheme = s;
    CHECK_THROWS_AS(fit_group_splines(p, spec, map), std::invalid_argument);
  }
}

TEST_CASE("group splines require both groups populated", "[groupfit]") {
  Portfolio p = planted_portfolio(600, 9, false);
  p.records.erase(std::remove_if(p.records.begin(), p.records.end(),
                                 [](const PolicyRecord& r) { return r.bms_level > 99; }),
                  p.records.end());
  REQUIRE(!p.records.empty());
  CHECK_THROWS_AS(fit_group_splines(p, group_spec(), GroupMap::from_cut(99)), FitError);
}

TEST_CASE("planted distinct laws separate the fitted smooths", "[groupfit]") {
  const Portfolio p = planted_portfolio(6000, 31, true);
  FitSpec spec = group_spec();
  const GroupSplineFit fit = fit_group_splines(p, spec, GroupMap::from_cut(99));
  CHECK(fit.converged);
  CHECK(fit.lambda > 0.0);
  REQUIRE(fit.f1.size() == static_cast<Eigen::Index>(spec.grid.size()));
  REQUIRE(fit.f2.size() == fit.f1.size());

  // True log-scale gap: log(t^0.6) - log(scurve). Check sign and rough size
  // at interior knots, where both groups carry data.
  const DeltaLaw low = DeltaLaw::parse("power:0.6");
  const DeltaLaw high = DeltaLaw::parse("scurve:6");
  const CurveEvaluator e1(ExposureCurve{fit.grid, fit.f1});
  const CurveEvaluator e2(ExposureCurve{fit.grid, fit.f2});
  for (const double t : {0.2125, 0.325, 0.4375, 0.55, 0.6625, 0.775}) {
    const double want = std::log(low(t)) - std::log(high(t));
    const double got = e1(t) - e2(t);
    CHECK_THAT(got, Catch::Matchers::WithinAbs(want, 0.35));
  }

  // Shared coefficients still land near the truth.
  const std::array<double, 6> beta_true = {0.2, -0.2, 0.5, 0.3, -0.1, 0.1};
  for (Eigen::Index j = 0; j < 6; ++j)
    CHECK_THAT(fit.beta[j], Catch::Matchers::WithinAbs(beta_true[static_cast<std::size_t>(j)], 0.15));

  // The curve difference helper matches direct evaluator arithmetic.
  const std::vector<double> grid = detail::schedule_grid();
  const std::vector<double> diff = curve_difference(fit, grid);
  for (std::size_t j = 0; j < grid.size(); j += 37)
    CHECK(diff[j] == e1(grid[j]) - e2(grid[j]));
}

TEST_CASE("cut search recovers a planted split", "[groupfit]") {
  const Portfolio p = planted_portfolio(4000, 57, true);
  FitSpec spec = group_spec();
  const CutReport report = search_cutpoint(p, spec, 2);
  CHECK(report.best_cut == 99);
  REQUIRE(report.scores.size() == 9);
  for (const CutScore& s : report.scores) {
    CHECK(!s.skipped);
    CHECK(s.score >= 0.0);
  }
  const auto best_entry =
      std::find_if(report.scores.begin(), report.scores.end(),
                   [&](const CutScore& s) { return s.cut == report.best_cut; });
  REQUIRE(best_entry != report.scores.end());
  for (const CutScore& s : report.scores)
    if (!s.skipped) CHECK(best_entry->score >= s.score);
  CHECK(report.best_fit.converged);

  // Worker count must not change any reported number.
  const CutReport serial = search_cutpoint(p, spec, 1);
  CHECK(serial.best_cut == report.best_cut);
  for (std::size_t i = 0; i < report.scores.size(); ++i)
    CHECK(serial.scores[i].score == report.scores[i].score);
}

TEST_CASE("cut search skips cuts that empty a side", "[groupfit]") {
  Portfolio p = planted_portfolio(1500, 13, false);
  p.records.erase(std::remove_if(p.records.begin(), p.records.end(),
                                 [](const PolicyRecord& r) { return r.bms_level > 100; }),
                  p.records.end());
  REQUIRE(!p.records.empty());
  const CutReport report = search_cutpoint(p, group_spec(), 1);
  for (const CutScore& s : report.scores) {
    if (s.cut >= 100)
      CHECK(s.skipped);  // no observed level above the cut
    else
      CHECK(!s.skipped);
  }
  CHECK(report.best_cut < 100);

  // A single observed level cannot be split at all.
  Portfolio single = p;
  single.records.erase(std::remove_if(single.records.begin(), single.records.end(),
                                      [](const PolicyRecord& r) { return r.bms_level != 95; }),
                       single.records.end());
  REQUIRE(!single.records.empty());
  CHECK_THROWS_AS(search_cutpoint(single, group_spec(), 1), DataError);
}

TEST_CASE("bootstrap band covers zero when the groups share one law", "[groupfit]") {
  const Portfolio p = planted_portfolio(2500, 71, false);
  FitSpec spec = group_spec();
  const GroupMap map = GroupMap::from_cut(99);
  const DifferenceBand band = bootstrap_curve_difference(p, spec, map, 30, 2024, 2);
  REQUIRE(band.grid.size() == 200);
  CHECK(band.replicates == 30);
  CHECK(band.failures == 0);

  // Count interior grid points (0.1, 0.9] where 0 escapes the 2 SE band.
  std::size_t covered = 0, interior = 0;
  for (std::size_t j = 0; j < band.grid.size(); ++j) {
    if (band.grid[j] <= 0.1 || band.grid[j] > 0.9) continue;
    ++interior;
    if (std::abs(band.base_diff[j]) <= 2.0 * band.se[j]) ++covered;
  }
  REQUIRE(interior > 0);
  CHECK(static_cast<double>(covered) >= 0.9 * static_cast<double>(interior));
}

TEST_CASE("bootstrap is deterministic and worker-count independent", "[groupfit]") {
  const Portfolio p = planted_portfolio(900, 101, true);
  FitSpec spec = group_spec();
  spec.ridge_lambda = 1.0;  // keep the unit test quick
  const GroupMap map = GroupMap::from_cut(99);

  const DifferenceBand a = bootstrap_curve_difference(p, spec, map, 8, 7, 1);
  const DifferenceBand b = bootstrap_curve_difference(p, spec, map, 8, 7, 3);
  REQUIRE(a.mean_diff.size() == b.mean_diff.size());
  for (std::size_t j = 0; j < a.mean_diff.size(); ++j) {
    CHECK(a.mean_diff[j] == b.mean_diff[j]);
    CHECK(a.se[j] == b.se[j]);
  }

  // A different seed moves the replicates.
  const DifferenceBand c = bootstrap_curve_difference(p, spec, map, 8, 8, 1);
  bool any_change = false;
  for (std::size_t j = 0; j < a.mean_diff.size(); ++j)
    if (a.mean_diff[j] != c.mean_diff[j]) any_change = true;
  CHECK(any_change);

  // One replicate is degenerate but defined: zero-width band.
  const DifferenceBand lone = bootstrap_curve_difference(p, spec, map, 1, 7, 1);
  CHECK(lone.replicates == 1);
  for (const double s : lone.se) CHECK(s == 0.0);

  CHECK_THROWS_AS(bootstrap_curve_difference(p, spec, map, 0, 7, 1), std::invalid_argument);
}
