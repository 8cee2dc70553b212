#pragma once
// Portfolio data model: policy records, CSV ingestion/serialization,
// stratified train/test splitting, synthetic generation with a known
// ground-truth exposure law, and exploratory summaries.
//
// CSV schema (exact): header
//   exposure,x1,x2,x3,x4,x5,bms,loss_cost,claim_count,contract_type
// UTF-8, comma-separated, '.' decimal point; claim_count may be empty.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flexrate/tweedie.hpp"

namespace flexrate {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ContractType { XX, XO };  // full-year vs canceled before term

inline std::string to_string(ContractType c) { return c == ContractType::XX ? "XX" : "XO"; }

struct PolicyRecord {
  double exposure = 1.0;                  // t, fraction of the year, in (0,1]
  std::array<int, 5> x{};                 // binary indicators X1..X5
  int bms_level = 100;                    // bonus-malus level, in [95,104]
  double loss_cost = 0.0;                 // y, >= 0
  std::optional<std::int64_t> claim_count;
  ContractType contract_type = ContractType::XX;

  void validate() const {
    if (!(exposure > 0.0 && exposure <= 1.0))
      throw DataError("exposure must lie in (0,1]");
    const bool full_year = exposure == 1.0;
    if (full_year != (contract_type == ContractType::XX))
      throw DataError("contract type XX requires exposure exactly 1, XO requires exposure < 1");
    for (int v : x)
      if (v != 0 && v != 1) throw DataError("covariates must be binary");
    if (bms_level < 95 || bms_level > 104) throw DataError("bms level must lie in [95,104]");
    if (loss_cost < 0.0) throw DataError("loss cost must be nonnegative");
    if (claim_count) {
      if (*claim_count < 0) throw DataError("claim count must be nonnegative");
      if (loss_cost > 0.0 && *claim_count < 1)
        throw DataError("positive loss cost requires at least one claim");
    }
  }
};

struct Portfolio {
  std::vector<PolicyRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  // Frequency summaries need counts on every record.
  bool has_claim_counts() const {
    return !records.empty() &&
           std::all_of(records.begin(), records.end(),
                       [](const PolicyRecord& r) { return r.claim_count.has_value(); });
  }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline const char* csv_header() {
  return "exposure,x1,x2,x3,x4,x5,bms,loss_cost,claim_count,contract_type";
}

struct LoadReport {
  Portfolio portfolio;
  std::vector<std::string> issues;  // line-numbered rejections / warnings
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const char* what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw DataError(std::string("cannot parse ") + what);
  }
  if (pos != s.size()) throw DataError(std::string("trailing characters in ") + what);
  return v;
}

inline std::int64_t parse_int(const std::string& s, const char* what) {
  std::size_t pos = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw DataError(std::string("cannot parse ") + what);
  }
  if (pos != s.size()) throw DataError(std::string("trailing characters in ") + what);
  return v;
}

// Shortest decimal form that parses back to the same bits.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace detail

inline PolicyRecord parse_csv_row(const std::string& line) {
  const std::vector<std::string> f = detail::split_fields(line);
  if (f.size() != 10) throw DataError("expected 10 fields");
  PolicyRecord r;
  r.exposure = detail::parse_double(f[0], "exposure");
  for (int j = 0; j < 5; ++j)
    r.x[static_cast<std::size_t>(j)] =
        static_cast<int>(detail::parse_int(f[static_cast<std::size_t>(j + 1)], "covariate"));
  r.bms_level = static_cast<int>(detail::parse_int(f[6], "bms"));
  r.loss_cost = detail::parse_double(f[7], "loss_cost");
  if (!f[8].empty()) r.claim_count = detail::parse_int(f[8], "claim_count");
  if (f[9] == "XX")
    r.contract_type = ContractType::XX;
  else if (f[9] == "XO")
    r.contract_type = ContractType::XO;
  else
    throw DataError("contract_type must be XX or XO");
  r.validate();
  return r;
}

inline LoadReport load_csv(const std::string& path, bool lenient = false) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file (missing header): " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header())
    throw DataError("header does not match the portfolio schema: " + path);

  LoadReport rep;
  long line_no = 1;
  std::vector<std::string> rejects;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    try {
      rep.portfolio.records.push_back(parse_csv_row(line));
    } catch (const DataError& e) {
      rejects.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!rejects.empty()) {
    if (!lenient) {
      std::string msg = std::to_string(rejects.size()) + " invalid row(s); first: " + rejects.front();
      throw DataError(msg);
    }
    for (auto& r : rejects) rep.issues.push_back("skipped " + r);
  }
  if (rep.portfolio.empty()) rep.issues.push_back("warning: no data rows");
  return rep;
}

inline void write_csv(const Portfolio& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << csv_header() << '\n';
  for (const PolicyRecord& r : p.records) {
    out << detail::format_double(r.exposure);
    for (int v : r.x) out << ',' << v;
    out << ',' << r.bms_level << ',' << detail::format_double(r.loss_cost) << ',';
    if (r.claim_count) out << *r.claim_count;
    out << ',' << to_string(r.contract_type) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

// Uniform random partition, deterministic per seed, stratified by contract
// type; per-stratum train counts come from largest-remainder apportionment so
// the total train size is exactly round(fraction * n) and each partition
// preserves the XX/XO mix.
inline std::pair<Portfolio, Portfolio> split(const Portfolio& p, double train_fraction,
                                             std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split: train fraction must lie strictly inside (0,1)");
  const std::size_t n = p.size();
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n < 2 || target == 0 || target >= n)
    throw DataError("portfolio too small to split at this fraction");

  std::array<std::vector<std::size_t>, 2> strata;  // XX, XO index lists
  for (std::size_t i = 0; i < n; ++i)
    strata[p.records[i].contract_type == ContractType::XX ? 0 : 1].push_back(i);

  struct Quota {
    std::size_t stratum;
    std::size_t base;
    double frac;
  };
  std::vector<Quota> quotas;
  std::size_t base_total = 0;
  for (std::size_t s = 0; s < 2; ++s) {
    if (strata[s].empty()) continue;
    const double q = train_fraction * static_cast<double>(strata[s].size());
    const auto base = static_cast<std::size_t>(std::floor(q));
    quotas.push_back({s, base, q - std::floor(q)});
    base_total += base;
  }
  std::sort(quotas.begin(), quotas.end(), [](const Quota& a, const Quota& b) {
    if (a.frac != b.frac) return a.frac > b.frac;
    return a.stratum < b.stratum;
  });
  std::array<std::size_t, 2> take{0, 0};
  for (const Quota& q : quotas) take[q.stratum] = q.base;
  for (std::size_t extra = target - base_total; extra > 0; --extra) {
    for (Quota& q : quotas) {
      if (q.frac >= 0.0 && take[q.stratum] < strata[q.stratum].size()) {
        ++take[q.stratum];
        q.frac = -1.0;  // consume this stratum's remainder once
        break;
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<char> in_train(n, 0);
  for (std::size_t s = 0; s < 2; ++s) {
    if (strata[s].empty()) continue;
    std::shuffle(strata[s].begin(), strata[s].end(), rng);
    for (std::size_t k = 0; k < take[s]; ++k) in_train[strata[s][k]] = 1;
  }
  Portfolio train, test;
  for (std::size_t i = 0; i < n; ++i)
    (in_train[i] ? train : test).records.push_back(p.records[i]);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

// Named true exposure law delta(t).
struct DeltaLaw {
  enum class Kind { Identity, Power, SCurve };
  Kind kind = Kind::Identity;
  double param = 0.0;

  double operator()(double t) const {
    switch (kind) {
      case Kind::Identity:
        return t;
      case Kind::Power:
        return std::pow(t, param);
      case Kind::SCurve: {
        // Logistic ramp normalized so delta(1) = 1; positive on (0,1].
        const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
        return sig(param * (t - 0.5)) / sig(param * 0.5);
      }
    }
    return t;
  }

  std::string name() const {
    switch (kind) {
      case Kind::Identity:
        return "identity";
      case Kind::Power:
        return "power:" + detail::format_double(param);
      case Kind::SCurve:
        return "scurve:" + detail::format_double(param);
    }
    return "identity";
  }

  // Accepts "identity", "power:<alpha>", "scurve:<kappa>".
  static DeltaLaw parse(const std::string& s) {
    if (s == "identity") return {};
    const auto colon = s.find(':');
    const std::string head = s.substr(0, colon);
    if (colon == std::string::npos || colon + 1 == s.size())
      throw std::invalid_argument("delta law needs a parameter, e.g. power:0.6");
    const double v = detail::parse_double(s.substr(colon + 1), "delta parameter");
    if (head == "power") {
      if (!(v > 0.0)) throw std::invalid_argument("power delta needs a positive exponent");
      return {Kind::Power, v};
    }
    if (head == "scurve") {
      if (!(v > 0.0)) throw std::invalid_argument("scurve delta needs a positive steepness");
      return {Kind::SCurve, v};
    }
    throw std::invalid_argument("unknown delta law: " + s);
  }
};

// Beta(alpha, beta) rescaled to (lo, hi); exposure distribution for XO rows.
struct ExposureLawSpec {
  double alpha = 2.0;
  double beta = 2.0;
  double lo = 0.02;
  double hi = 0.98;
};

struct SyntheticSpec {
  std::int64_t n = 0;
  // beta_true layout: intercept, x1..x5, bms (applied to the centered level).
  std::array<double, 7> beta_true{-1.0, 0.2, -0.2, 0.5, 0.3, -0.1, 0.1};
  DeltaLaw delta{};
  double xo_fraction = 0.35;
  ExposureLawSpec exposure_law{};
  double phi = 1.0;
  double power = 1.42;
  std::array<double, 10> bms_weights{0.30, 0.06, 0.06, 0.06, 0.06,
                                     0.22, 0.08, 0.06, 0.05, 0.05};  // levels 95..104
  std::uint64_t seed = 1;
  // Optional planted group structure: records with bms above plant_cut draw
  // their exposure effect from delta_high instead of delta.
  std::optional<DeltaLaw> delta_high;
  int plant_cut = 99;

  double true_mean(double t, const std::array<int, 5>& x, int bms) const {
    double eta = beta_true[0];
    for (int j = 0; j < 5; ++j) eta += beta_true[static_cast<std::size_t>(j + 1)] * x[static_cast<std::size_t>(j)];
    eta += beta_true[6] * (bms - 100);
    const DeltaLaw& law = (delta_high && bms > plant_cut) ? *delta_high : delta;
    return law(t) * std::exp(eta);
  }
};

// Sequential single-stream generation: bit-reproducible per seed. Per-record
// draw order is fixed (type, exposure, covariates, bms, losses).
inline Portfolio simulate(const SyntheticSpec& spec) {
  if (spec.n < 0) throw std::invalid_argument("simulate: n must be nonnegative");
  if (!(spec.xo_fraction >= 0.0 && spec.xo_fraction <= 1.0))
    throw std::invalid_argument("simulate: xo fraction must lie in [0,1]");
  if (!(spec.phi > 0.0)) throw std::invalid_argument("simulate: phi must be positive");
  if (!(spec.power > 1.0 && spec.power < 2.0))
    throw std::invalid_argument("simulate: power must lie strictly inside (1,2)");
  double wsum = 0.0;
  for (double w : spec.bms_weights) {
    if (w < 0.0) throw std::invalid_argument("simulate: bms weights must be nonnegative");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw std::invalid_argument("simulate: bms weights must not all be zero");
  if (!(spec.delta(1.0) > 0.0) || (spec.delta_high && !((*spec.delta_high)(1.0) > 0.0)))
    throw std::invalid_argument("simulate: delta must be positive at t = 1");

  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution xo(spec.xo_fraction), coin(0.5);
  std::gamma_distribution<double> ga(spec.exposure_law.alpha, 1.0), gb(spec.exposure_law.beta, 1.0);
  std::discrete_distribution<int> bms(spec.bms_weights.begin(), spec.bms_weights.end());

  Portfolio out;
  out.records.reserve(static_cast<std::size_t>(spec.n));
  for (std::int64_t i = 0; i < spec.n; ++i) {
    PolicyRecord r;
    const bool is_xo = spec.xo_fraction > 0.0 && xo(rng);
    if (is_xo) {
      const double a = ga(rng), b = gb(rng);
      const double u = a / (a + b);
      r.exposure = spec.exposure_law.lo + (spec.exposure_law.hi - spec.exposure_law.lo) * u;
      r.contract_type = ContractType::XO;
    } else {
      r.exposure = 1.0;
      r.contract_type = ContractType::XX;
    }
    for (auto& v : r.x) v = coin(rng) ? 1 : 0;
    r.bms_level = 95 + bms(rng);
    const double mu = spec.true_mean(r.exposure, r.x, r.bms_level);
    const TweedieDraw d = sample_with_count({mu, 1.0, spec.phi, spec.power}, rng);
    r.loss_cost = d.total;
    r.claim_count = d.claim_count;
    out.records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exploratory summaries
// ---------------------------------------------------------------------------

struct GroupStats {
  std::int64_t contracts = 0;
  double total_exposure = 0.0;
  double total_losses = 0.0;
  std::int64_t total_claims = 0;
  // Claim frequency = total claims / total exposure; annualized loss cost =
  // total losses / total exposure = frequency x mean severity.
  double frequency = 0.0;
  double mean_severity = 0.0;
  double annualized_loss_cost = 0.0;

  void add(const PolicyRecord& r, bool with_counts) {
    ++contracts;
    total_exposure += r.exposure;
    total_losses += r.loss_cost;
    if (with_counts) total_claims += *r.claim_count;
  }
  void finalize(bool with_counts) {
    if (total_exposure > 0.0) annualized_loss_cost = total_losses / total_exposure;
    if (with_counts && total_exposure > 0.0)
      frequency = static_cast<double>(total_claims) / total_exposure;
    if (with_counts && total_claims > 0)
      mean_severity = total_losses / static_cast<double>(total_claims);
  }
};

struct ExposureBin {
  double lo = 0.0, hi = 0.0;
  std::int64_t contracts = 0;
  double mean_loss_cost = 0.0;
  double annualized_loss_cost = 0.0;
};

struct BmsSummary {
  int level = 0;
  std::int64_t contracts = 0;
  double xo_share = 0.0;
  double annualized_loss_cost = 0.0;
};

struct SummaryReport {
  bool has_claim_counts = false;
  GroupStats all, xx, xo;
  std::vector<ExposureBin> bins;  // exposure discretized into 0.05-wide intervals
  std::vector<BmsSummary> bms;    // levels 95..104
  std::vector<std::string> notices;
};

inline SummaryReport exploratory_summary(const Portfolio& p) {
  if (p.empty()) throw DataError("exploratory summary needs a non-empty portfolio");
  SummaryReport rep;
  rep.has_claim_counts = p.has_claim_counts();
  if (!rep.has_claim_counts)
    rep.notices.push_back("claim counts missing: frequency and severity summaries skipped");

  constexpr int kBins = 20;
  rep.bins.resize(kBins);
  std::vector<double> bin_losses(kBins, 0.0), bin_exposure(kBins, 0.0);
  rep.bms.resize(10);
  std::vector<double> bms_losses(10, 0.0), bms_exposure(10, 0.0);
  std::vector<std::int64_t> bms_xo(10, 0);

  for (const PolicyRecord& r : p.records) {
    rep.all.add(r, rep.has_claim_counts);
    (r.contract_type == ContractType::XX ? rep.xx : rep.xo).add(r, rep.has_claim_counts);
    int b = static_cast<int>(r.exposure / 0.05);
    if (b >= kBins) b = kBins - 1;
    ++rep.bins[static_cast<std::size_t>(b)].contracts;
    bin_losses[static_cast<std::size_t>(b)] += r.loss_cost;
    bin_exposure[static_cast<std::size_t>(b)] += r.exposure;
    const std::size_t lv = static_cast<std::size_t>(r.bms_level - 95);
    ++rep.bms[lv].contracts;
    bms_losses[lv] += r.loss_cost;
    bms_exposure[lv] += r.exposure;
    if (r.contract_type == ContractType::XO) ++bms_xo[lv];
  }
  rep.all.finalize(rep.has_claim_counts);
  rep.xx.finalize(rep.has_claim_counts);
  rep.xo.finalize(rep.has_claim_counts);
  for (int b = 0; b < kBins; ++b) {
    ExposureBin& bin = rep.bins[static_cast<std::size_t>(b)];
    bin.lo = 0.05 * b;
    bin.hi = 0.05 * (b + 1);
    if (bin.contracts > 0) bin.mean_loss_cost = bin_losses[static_cast<std::size_t>(b)] / static_cast<double>(bin.contracts);
    if (bin_exposure[static_cast<std::size_t>(b)] > 0.0)
      bin.annualized_loss_cost = bin_losses[static_cast<std::size_t>(b)] / bin_exposure[static_cast<std::size_t>(b)];
  }
  for (int lv = 0; lv < 10; ++lv) {
    BmsSummary& s = rep.bms[static_cast<std::size_t>(lv)];
    s.level = 95 + lv;
    if (s.contracts > 0) s.xo_share = static_cast<double>(bms_xo[static_cast<std::size_t>(lv)]) / static_cast<double>(s.contracts);
    if (bms_exposure[static_cast<std::size_t>(lv)] > 0.0)
      s.annualized_loss_cost = bms_losses[static_cast<std::size_t>(lv)] / bms_exposure[static_cast<std::size_t>(lv)];
  }
  return rep;
}

}  // namespace flexrate
