#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>

#include "flexrate/portfolio.hpp"

using namespace flexrate;

namespace {

std::string temp_path(const char* stem) {
  static int counter = 0;
  return (std::filesystem::temp_directory_path() /
          (std::string(stem) + "_" + std::to_string(++counter) + ".csv"))
      .string();
}

Portfolio tiny_portfolio() {
  Portfolio p;
  PolicyRecord a;
  a.exposure = 1.0;
  a.x = {1, 0, 1, 0, 1};
  a.bms_level = 97;
  a.loss_cost = 1.25;
  a.claim_count = 2;
  a.contract_type = ContractType::XX;
  PolicyRecord b;
  b.exposure = 0.37519999999999998;
  b.x = {0, 1, 0, 0, 0};
  b.bms_level = 104;
  b.loss_cost = 0.0;
  b.claim_count = 0;
  b.contract_type = ContractType::XO;
  PolicyRecord c;
  c.exposure = 0.5;
  c.x = {1, 1, 1, 1, 1};
  c.bms_level = 95;
  c.loss_cost = 3.0;
  c.contract_type = ContractType::XO;  // no claim count
  p.records = {a, b, c};
  return p;
}

}  // namespace

TEST_CASE("record validation enforces field invariants", "[portfolio]") {
  PolicyRecord r;
  r.exposure = 1.0;
  r.contract_type = ContractType::XX;
  REQUIRE_NOTHROW(r.validate());

  PolicyRecord bad = r;
  bad.exposure = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.exposure = 1.5;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.exposure = 0.5;  // XX with partial year
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.contract_type = ContractType::XO;  // XO with full year
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.x[2] = 7;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.bms_level = 94;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.bms_level = 105;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.loss_cost = -0.1;
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad = r;
  bad.loss_cost = 2.0;
  bad.claim_count = 0;  // positive losses need a claim
  REQUIRE_THROWS_AS(bad.validate(), DataError);
  bad.claim_count = 1;
  REQUIRE_NOTHROW(bad.validate());
}

TEST_CASE("csv round trip reproduces the portfolio exactly", "[portfolio]") {
  const Portfolio p = tiny_portfolio();
  const std::string path = temp_path("roundtrip");
  write_csv(p, path);
  const LoadReport rep = load_csv(path);
  REQUIRE(rep.issues.empty());
  REQUIRE(rep.portfolio.size() == p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const PolicyRecord& a = p.records[i];
    const PolicyRecord& b = rep.portfolio.records[i];
    REQUIRE(a.exposure == b.exposure);  // %.17g serialization is lossless
    REQUIRE(a.x == b.x);
    REQUIRE(a.bms_level == b.bms_level);
    REQUIRE(a.loss_cost == b.loss_cost);
    REQUIRE(a.claim_count == b.claim_count);
    REQUIRE(a.contract_type == b.contract_type);
  }
  std::filesystem::remove(path);
}

TEST_CASE("csv loader reports schema and row errors with line numbers", "[portfolio]") {
  const std::string path = temp_path("badrows");
  {
    std::ofstream out(path);
    out << csv_header() << "\n";
    out << "1,0,0,0,0,0,100,0.5,1,XX\n";       // line 2: ok
    out << "0.5,0,0,0,0,0,100,0.5,1,XX\n";     // line 3: partial year marked XX
    out << "0.25,0,0,0,0,0,100,0,,XO\n";       // line 4: ok, empty count
    out << "0.25,0,0,0,0,0,100,abc,1,XO\n";    // line 5: unparseable loss
  }
  REQUIRE_THROWS_AS(load_csv(path), DataError);
  try {
    load_csv(path);
  } catch (const DataError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("2 invalid row(s)") != std::string::npos);
    REQUIRE(msg.find("line 3") != std::string::npos);
  }

  const LoadReport rep = load_csv(path, /*lenient=*/true);
  REQUIRE(rep.portfolio.size() == 2);
  REQUIRE(rep.issues.size() == 2);
  REQUIRE(rep.issues[0].find("line 3") != std::string::npos);
  REQUIRE(rep.issues[1].find("line 5") != std::string::npos);
  REQUIRE_FALSE(rep.portfolio.records[1].claim_count.has_value());
  std::filesystem::remove(path);

  const std::string hdr = temp_path("badheader");
  {
    std::ofstream out(hdr);
    out << "exposure,x1\n";
  }
  REQUIRE_THROWS_AS(load_csv(hdr), DataError);
  std::filesystem::remove(hdr);

  const std::string empty = temp_path("emptydata");
  {
    std::ofstream out(empty);
    out << csv_header() << "\n";
  }
  const LoadReport er = load_csv(empty);
  REQUIRE(er.portfolio.empty());
  REQUIRE(er.issues.size() == 1);
  std::filesystem::remove(empty);
}

TEST_CASE("split apportions strata by largest remainder and is deterministic", "[portfolio]") {
  // 1000 contracts, 600 XX / 400 XO, fraction 0.75: train gets exactly
  // 750 = 450 XX + 300 XO.
  SyntheticSpec spec;
  spec.n = 1000;
  spec.seed = 11;
  spec.xo_fraction = 0.4;
  Portfolio p = simulate(spec);
  std::size_t n_xo = 0;
  for (auto& r : p.records) n_xo += r.contract_type == ContractType::XO;

  auto [train, test] = split(p, 0.75, 42);
  REQUIRE(train.size() == 750);
  REQUIRE(test.size() == 250);
  std::size_t train_xo = 0, test_xo = 0;
  for (auto& r : train.records) train_xo += r.contract_type == ContractType::XO;
  for (auto& r : test.records) test_xo += r.contract_type == ContractType::XO;
  REQUIRE(train_xo + test_xo == n_xo);
  const double mix = static_cast<double>(n_xo) / 1000.0;
  REQUIRE(std::abs(static_cast<double>(train_xo) / 750.0 - mix) < 0.01);
  REQUIRE(std::abs(static_cast<double>(test_xo) / 250.0 - mix) < 0.01);

  // Same seed, same partition; the two sides tile the original exactly.
  auto [train2, test2] = split(p, 0.75, 42);
  REQUIRE(train2.size() == train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    REQUIRE(train2.records[i].loss_cost == train.records[i].loss_cost);
  std::multiset<double> orig, parts;
  for (auto& r : p.records) orig.insert(r.exposure);
  for (auto& r : train.records) parts.insert(r.exposure);
  for (auto& r : test.records) parts.insert(r.exposure);
  REQUIRE(orig == parts);
}

TEST_CASE("split handles single-type portfolios and rejects degenerate sizes", "[portfolio]") {
  Portfolio p;
  for (int i = 0; i < 10; ++i) {
    PolicyRecord r;
    r.exposure = 1.0;
    r.contract_type = ContractType::XX;
    r.loss_cost = i;
    if (i > 0) r.claim_count = 1;
    p.records.push_back(r);
  }
  auto [train, test] = split(p, 0.5, 7);
  REQUIRE(train.size() == 5);
  REQUIRE(test.size() == 5);

  Portfolio one;
  one.records.push_back(p.records[0]);
  REQUIRE_THROWS_AS(split(one, 0.5, 7), DataError);
  REQUIRE_THROWS_AS(split(p, 0.0, 7), std::invalid_argument);
  REQUIRE_THROWS_AS(split(p, 1.0, 7), std::invalid_argument);
  REQUIRE_THROWS_AS(split(p, 0.01, 7), DataError);  // rounds to an empty train side
}

TEST_CASE("delta laws evaluate and parse", "[portfolio]") {
  const DeltaLaw ident = DeltaLaw::parse("identity");
  REQUIRE(ident(0.3) == 0.3);
  const DeltaLaw pow6 = DeltaLaw::parse("power:0.6");
  REQUIRE(pow6(1.0) == 1.0);
  REQUIRE(pow6(0.25) == Catch::Approx(std::pow(0.25, 0.6)).epsilon(1e-15));
  const DeltaLaw sc = DeltaLaw::parse("scurve:6");
  REQUIRE(sc(1.0) == Catch::Approx(1.0).epsilon(1e-15));
  // Normalized logistic ramp at the midpoint: 0.5 / sigma(3).
  REQUIRE(sc(0.5) == Catch::Approx(0.5 / (1.0 / (1.0 + std::exp(-3.0)))).epsilon(1e-14));
  REQUIRE(sc(0.2) > 0.0);
  REQUIRE(sc(0.2) < sc(0.8));
  REQUIRE_THROWS_AS(DeltaLaw::parse("power"), std::invalid_argument);
  REQUIRE_THROWS_AS(DeltaLaw::parse("power:-1"), std::invalid_argument);
  REQUIRE_THROWS_AS(DeltaLaw::parse("banana:2"), std::invalid_argument);
}

TEST_CASE("simulation respects marginals and the true mean law", "[portfolio]") {
  SyntheticSpec spec;
  spec.n = 40000;
  spec.seed = 99;
  spec.xo_fraction = 0.65;
  spec.delta = DeltaLaw::parse("power:0.6");
  Portfolio p = simulate(spec);
  REQUIRE(p.size() == 40000);
  REQUIRE(p.has_claim_counts());

  std::size_t n_xo = 0;
  double sum_t_xo = 0.0;
  std::array<std::int64_t, 10> bms_counts{};
  for (const auto& r : p.records) {
    REQUIRE_NOTHROW(r.validate());
    if (r.contract_type == ContractType::XO) {
      ++n_xo;
      sum_t_xo += r.exposure;
      REQUIRE(r.exposure > 0.02);
      REQUIRE(r.exposure < 0.98);
    } else {
      REQUIRE(r.exposure == 1.0);
    }
    ++bms_counts[static_cast<std::size_t>(r.bms_level - 95)];
  }
  const double xo_share = static_cast<double>(n_xo) / 40000.0;
  REQUIRE(std::abs(xo_share - 0.65) < 3.0 * std::sqrt(0.65 * 0.35 / 40000.0) + 1e-9);
  // Beta(2,2) rescaled to (0.02, 0.98) has mean 0.5.
  REQUIRE(std::abs(sum_t_xo / static_cast<double>(n_xo) - 0.5) < 0.01);
  // Modal BMS level is 95 under the default level weights.
  REQUIRE(bms_counts[0] > bms_counts[1]);
  const double share_95 = static_cast<double>(bms_counts[0]) / 40000.0;
  REQUIRE(std::abs(share_95 - 0.30) < 0.02);

  // Monte Carlo check of E[y] = mean of the true means.
  double sum_y = 0.0, sum_mu = 0.0;
  for (const auto& r : p.records) {
    sum_y += r.loss_cost;
    sum_mu += spec.true_mean(r.exposure, r.x, r.bms_level);
  }
  REQUIRE(sum_y / sum_mu == Catch::Approx(1.0).margin(0.03));

  // Determinism: same spec, same bytes.
  Portfolio q = simulate(spec);
  for (std::size_t i = 0; i < 200; ++i) {
    REQUIRE(q.records[i].loss_cost == p.records[i].loss_cost);
    REQUIRE(q.records[i].exposure == p.records[i].exposure);
  }
}

TEST_CASE("planted group structure switches the exposure law above the cut", "[portfolio]") {
  SyntheticSpec spec;
  spec.n = 4000;
  spec.seed = 5;
  spec.delta = DeltaLaw::parse("power:0.6");
  spec.delta_high = DeltaLaw::parse("scurve:6");
  spec.plant_cut = 99;
  const double t = 0.4;
  const std::array<int, 5> x{};
  const double lo = spec.true_mean(t, x, 97);
  const double hi = spec.true_mean(t, x, 102);
  const double base_lo = std::pow(t, 0.6) * std::exp(spec.beta_true[0] + spec.beta_true[6] * -3);
  REQUIRE(lo == Catch::Approx(base_lo).epsilon(1e-12));
  const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double base_hi = sig(6.0 * (t - 0.5)) / sig(3.0) * std::exp(spec.beta_true[0] + spec.beta_true[6] * 2);
  REQUIRE(hi == Catch::Approx(base_hi).epsilon(1e-12));
  REQUIRE_NOTHROW(simulate(spec));
}

TEST_CASE("exploratory summary satisfies accounting identities", "[portfolio]") {
  SyntheticSpec spec;
  spec.n = 5000;
  spec.seed = 3;
  Portfolio p = simulate(spec);
  const SummaryReport rep = exploratory_summary(p);
  REQUIRE(rep.has_claim_counts);
  REQUIRE(rep.all.contracts == 5000);
  REQUIRE(rep.xx.contracts + rep.xo.contracts == rep.all.contracts);
  REQUIRE(rep.all.total_losses ==
          Catch::Approx(rep.xx.total_losses + rep.xo.total_losses).epsilon(1e-12));
  // Annualized loss cost factors exactly into frequency times severity.
  REQUIRE(rep.all.annualized_loss_cost ==
          Catch::Approx(rep.all.frequency * rep.all.mean_severity).epsilon(1e-12));
  REQUIRE(rep.xo.annualized_loss_cost ==
          Catch::Approx(rep.xo.frequency * rep.xo.mean_severity).epsilon(1e-12));

  std::int64_t binned = 0;
  for (const auto& b : rep.bins) binned += b.contracts;
  REQUIRE(binned == 5000);
  // All XX contracts land in the last bin.
  REQUIRE(rep.bins.back().contracts >= rep.xx.contracts);
  std::int64_t by_level = 0;
  for (const auto& s : rep.bms) by_level += s.contracts;
  REQUIRE(by_level == 5000);

  // Without counts the frequency block is skipped with a notice.
  Portfolio stripped = p;
  stripped.records[0].claim_count.reset();
  const SummaryReport rep2 = exploratory_summary(stripped);
  REQUIRE_FALSE(rep2.has_claim_counts);
  REQUIRE(rep2.all.frequency == 0.0);
  REQUIRE_FALSE(rep2.notices.empty());
  REQUIRE(rep2.all.annualized_loss_cost ==
          Catch::Approx(rep.all.annualized_loss_cost).epsilon(1e-12));

  REQUIRE_THROWS_AS(exploratory_summary(Portfolio{}), DataError);
}
