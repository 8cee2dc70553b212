// Command-line front end: simulate, fit, score, penalty, groupsplit, and a
// consolidated report command. Every command writes deterministic files into
// an output directory; given the same flags and seed the bytes are identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flexrate/fit.hpp"
#include "flexrate/group_fit.hpp"
#include "flexrate/penalty.hpp"
#include "flexrate/portfolio.hpp"
#include "flexrate/scoring.hpp"
#include "flexrate/serialization.hpp"
#include "flexrate/spline.hpp"
#include "flexrate/tweedie.hpp"

namespace {

using namespace flexrate;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fs::path ensure_dir(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  return dir;
}

std::string fmt(double x) { return csv_number(x); }

std::string check_power(const std::string& s) {
  const double p = std::strtod(s.c_str(), nullptr);
  return p > 1.0 && p < 2.0 ? std::string{} : std::string("power must lie in (1,2)");
}

// The flag set shared by every command that builds a model. Option handles
// distinguish "flag given" from "default value": the library treats an unset
// penalty as "select by cross-validation" and picks the tolerance per scheme.
struct SpecFlags {
  std::string scheme = "ewm";
  double power = 1.42;
  std::vector<double> knots;
  double lambda = 0.0;
  int max_iter = 50;
  double tol = 0.0;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* tol_opt = nullptr;

  bool lambda_given() const { return lambda_opt != nullptr && lambda_opt->count() > 0; }
  bool tol_given() const { return tol_opt != nullptr && tol_opt->count() > 0; }
};

FitSpec make_spec(const SpecFlags& f, const std::string& scheme_name) {
  FitSpec spec;
  spec.scheme = parse_scheme(scheme_name);
  spec.power = f.power;
  if (!f.knots.empty()) spec.grid = KnotGrid{f.knots};
  if (f.lambda_given()) spec.ridge_lambda = f.lambda;
  spec.max_iter = f.max_iter;
  // The outer curve-weight loop needs far less resolution than the inner
  // deviance criterion, so iterative-scheme runs default to a looser stop.
  if (f.tol_given())
    spec.tol = f.tol;
  else if (spec.scheme == WeightScheme::Gwm)
    spec.tol = 1e-5;
  spec.validate();
  return spec;
}

void add_spec_flags(CLI::App* cmd, SpecFlags& f, bool with_scheme_choice) {
  if (with_scheme_choice)
    cmd->add_option("--scheme", f.scheme, "Weight scheme (offset|ratio|cwm|gwm|ewm|all)")
        ->check(CLI::IsMember({"offset", "ratio", "cwm", "gwm", "ewm", "all"}));
  cmd->add_option("--power", f.power, "Tweedie power index p")->check(check_power);
  cmd->add_option("--knots", f.knots, "Comma-separated knot grid in (0,1], last = 1")
      ->delimiter(',');
  f.lambda_opt =
      cmd->add_option("--lambda", f.lambda, "Fix the curvature penalty instead of cross-validating")
          ->check(CLI::NonNegativeNumber);
  cmd->add_option("--max-iter", f.max_iter, "Optimizer iteration cap")->check(CLI::PositiveNumber);
  f.tol_opt = cmd->add_option("--tol", f.tol, "Convergence tolerance")
                  ->check(CLI::PositiveNumber);
}

// Whole-grid constraints (ordering, count, endpoint) cannot be checked one
// element at a time, so they are enforced after parsing as a usage error.
void validate_knots_flag(const std::vector<double>& knots) {
  if (knots.empty()) return;
  try {
    KnotGrid{knots}.validate();
  } catch (const std::exception& e) {
    throw CLI::ValidationError("--knots", e.what());
  }
}

std::string model_name(const std::string& path) { return fs::path(path).stem().string(); }

void note(const fs::path& path) { std::cout << "wrote " << path.string() << '\n'; }

// Fitted exposure curve on the fine schedule grid, on both scales.
void emit_curve_csv(const FitResult& fit, const fs::path& path) {
  const std::vector<double> grid = detail::schedule_grid();
  std::optional<CurveEvaluator> log_eval;
  if (fit.mean_structure == MeanStructure::Spline)
    log_eval.emplace(ExposureCurve{fit.curve.grid, fit.log_curve});
  std::vector<std::vector<std::string>> rows;
  rows.reserve(grid.size());
  for (const double t : grid) {
    double lg = 0.0;
    switch (fit.mean_structure) {
      case MeanStructure::TraditionalIdentity:
        lg = std::log(t);
        break;
      case MeanStructure::Spline:
        lg = (*log_eval)(t);
        break;
      case MeanStructure::FixedSchedule:
        lg = detail::schedule_log_gamma(fit.schedule_t, fit.schedule_gamma, t);
        break;
    }
    rows.push_back({fmt(t), fmt(std::exp(lg)), fmt(lg)});
  }
  write_csv_file(path.string(), {"t", "gamma", "log_gamma"}, rows);
  note(path);
}

const std::vector<std::string> kAllSchemes = {"offset", "ratio", "cwm", "ewm", "gwm"};

struct NamedFit {
  std::string name;
  FitResult fit;
};

// Fit one scheme (or all five) and write the per-model files.
std::vector<NamedFit> fit_models(const Portfolio& train, const SpecFlags& flags,
                                 const fs::path& dir) {
  const std::vector<std::string> schemes =
      flags.scheme == "all" ? kAllSchemes : std::vector<std::string>{flags.scheme};
  std::vector<NamedFit> fits;
  for (const std::string& name : schemes) {
    const FitSpec spec = make_spec(flags, name);
    FitResult fr = fit(train, spec);
    std::cout << "fit " << name << ": " << (fr.converged ? "converged" : "not converged")
              << ", deviance " << fmt(fr.deviance_train) << ", lambda " << fmt(fr.lambda)
              << '\n';
    const fs::path fit_path = dir / ("fit_" + name + ".json");
    write_json_file(fit_path.string(), serialize(fr));
    note(fit_path);
    emit_curve_csv(fr, dir / ("curve_" + name + ".csv"));
    if (fr.scheme == WeightScheme::Gwm) {
      const fs::path trace_path = dir / "trace_gwm.csv";
      write_trace_csv(trace_path.string(), fr);
      note(trace_path);
    }
    fits.push_back({name, std::move(fr)});
  }
  if (fits.size() > 1) {
    std::vector<std::string> header = {"quantity"};
    for (const NamedFit& f : fits) header.push_back(f.name);
    std::vector<std::vector<std::string>> rows;
    const std::vector<std::string> coef = FitResult::coefficient_names();
    for (std::size_t c = 0; c < coef.size(); ++c) {
      std::vector<std::string> row = {coef[c]};
      for (const NamedFit& f : fits) row.push_back(fmt(f.fit.beta[static_cast<Eigen::Index>(c)]));
      rows.push_back(std::move(row));
    }
    std::vector<std::string> lambda_row = {"lambda"}, dev_row = {"deviance_train"},
                             conv_row = {"converged"};
    for (const NamedFit& f : fits) {
      lambda_row.push_back(fmt(f.fit.lambda));
      dev_row.push_back(fmt(f.fit.deviance_train));
      conv_row.push_back(f.fit.converged ? "1" : "0");
    }
    rows.push_back(lambda_row);
    rows.push_back(dev_row);
    rows.push_back(conv_row);
    const fs::path table = dir / "fit_comparison.csv";
    write_csv_file(table.string(), header, rows);
    note(table);
  }
  return fits;
}

struct ScoreRow {
  std::string model;
  ScoreReport report;
};

// Score several fitted models on one dataset. All Murphy curves share one
// threshold grid (from the pooled premium range) so they land in one table.
std::vector<ScoreRow> score_models(const std::vector<NamedFit>& fits, const Portfolio& data,
                                   DatasetTag tag, const fs::path& dir,
                                   const std::string& suffix) {
  double max_premium = 0.0;
  for (const NamedFit& f : fits) {
    const Eigen::VectorXd mu = predict(f.fit, data);
    max_premium = std::max(max_premium, mu.maxCoeff());
  }
  std::vector<double> m_grid(201);
  for (std::size_t j = 0; j < m_grid.size(); ++j)
    m_grid[j] = 1.05 * max_premium * static_cast<double>(j) / 200.0;

  std::vector<ScoreRow> rows;
  std::vector<std::string> names;
  std::vector<std::vector<MurphyPoint>> murphys;
  for (const NamedFit& f : fits) {
    ScoreRow row{f.name, score(f.fit, data, tag, m_grid)};
    const fs::path score_path = dir / ("score_" + f.name + suffix + ".json");
    write_json_file(score_path.string(), serialize(row.report));
    note(score_path);

    const Eigen::VectorXd mu = predict(f.fit, data);
    std::vector<double> y(data.size()), mu_std(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      y[i] = data.records[i].loss_cost;
      mu_std[i] = mu[static_cast<Eigen::Index>(i)];
    }
    const fs::path curves_path = dir / ("curves_" + f.name + suffix + ".csv");
    write_curve_pair_csv(curves_path.string(), concentration_lorenz(y, mu_std));
    note(curves_path);

    names.push_back(f.name);
    murphys.push_back(row.report.murphy);
    rows.push_back(std::move(row));
  }
  const fs::path murphy_path = dir / ("murphy" + suffix + ".csv");
  write_murphy_csv(murphy_path.string(), names, murphys);
  note(murphy_path);

  std::vector<std::vector<std::string>> table;
  for (const ScoreRow& row : rows)
    table.push_back({row.model, to_string(row.report.dataset_tag), fmt(row.report.deviance),
                     fmt(100.0 * row.report.deviance), fmt(row.report.area),
                     fmt(row.report.abc)});
  const fs::path table_path = dir / ("score_table" + suffix + ".csv");
  write_csv_file(table_path.string(),
                 {"model", "dataset", "deviance", "deviance_x100", "area", "abc"}, table);
  note(table_path);
  return rows;
}

struct SweepRow {
  double a = 0.0;
  FitResult refit;
  ScoreReport report;
  DecompositionReport decomposition;
};

// Constrain a fitted curve, sweep the smoothing level, refit against each
// schedule, and report scores and premium decompositions along the way.
std::vector<SweepRow> penalty_sweep(const FitResult& base, const Portfolio& data,
                                    const std::vector<double>& a_values, const fs::path& dir) {
  const PenaltySchedule schedule = constrain(base);
  FitSpec spec;
  spec.scheme = base.scheme;
  spec.power = base.power;
  if (!base.curve.grid.knots.empty()) spec.grid = base.curve.grid;
  const ExposureCurve* frozen =
      base.scheme == WeightScheme::Gwm ? &base.curve : nullptr;

  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < a_values.size(); ++k) {
    SweepRow row;
    row.a = a_values[k];
    const PenaltySchedule adjusted = adjust(schedule, row.a);
    const std::string tag = std::to_string(k + 1);
    const fs::path sched_path = dir / ("schedule_" + tag + ".json");
    write_json_file(sched_path.string(), serialize(adjusted));
    note(sched_path);
    const fs::path table_path = dir / ("penalty_table_" + tag + ".csv");
    write_penalty_csv(table_path.string(), adjusted);
    note(table_path);

    row.refit = refit_with_offset(data, adjusted, spec, frozen);
    const fs::path refit_path = dir / ("refit_" + tag + ".json");
    write_json_file(refit_path.string(), serialize(row.refit));
    note(refit_path);

    row.report = score(row.refit, data, DatasetTag::Train);
    row.decomposition = premium_decomposition(row.refit, adjusted, data);
    const fs::path dec_path = dir / ("decomposition_" + tag + ".json");
    write_json_file(dec_path.string(), serialize(row.decomposition));
    note(dec_path);
    const fs::path cum_path = dir / ("cumulative_" + tag + ".csv");
    write_cumulative_csv(cum_path.string(), row.decomposition);
    note(cum_path);
    rows.push_back(std::move(row));
  }

  std::vector<std::string> beta_header = {"a"};
  for (const std::string& c : FitResult::coefficient_names()) beta_header.push_back(c);
  std::vector<std::vector<std::string>> beta_rows, score_rows;
  for (const SweepRow& row : rows) {
    std::vector<std::string> br = {fmt(row.a)};
    for (Eigen::Index c = 0; c < row.refit.beta.size(); ++c) br.push_back(fmt(row.refit.beta[c]));
    beta_rows.push_back(std::move(br));
    score_rows.push_back({fmt(row.a), fmt(row.report.deviance), fmt(100.0 * row.report.deviance),
                          fmt(row.report.area), fmt(row.report.abc),
                          fmt(row.decomposition.penalty_share),
                          fmt(row.decomposition.penalty_share_xo),
                          fmt(row.decomposition.total_premium),
                          fmt(row.decomposition.total_pro_rata),
                          fmt(row.decomposition.total_penalty)});
  }
  const fs::path beta_path = dir / "beta_vs_a.csv";
  write_csv_file(beta_path.string(), beta_header, beta_rows);
  note(beta_path);
  const fs::path scores_path = dir / "scores_vs_a.csv";
  write_csv_file(scores_path.string(),
                 {"a", "deviance", "deviance_x100", "area", "abc", "penalty_share",
                  "penalty_share_xo", "total_premium", "total_pro_rata", "total_penalty"},
                 score_rows);
  note(scores_path);
  return rows;
}

struct GroupOutcome {
  bool searched = false;
  CutReport report;       // populated when searched
  GroupSplineFit fit;     // the fit behind the curves and band
  GroupMap map;
  DifferenceBand band;
};

GroupOutcome group_split(const Portfolio& data, const FitSpec& spec, int cut, int replicates,
                         std::uint64_t seed, int jobs, const fs::path& dir) {
  GroupOutcome out;
  if (cut > 0) {
    out.map = GroupMap::from_cut(cut);
    out.fit = fit_group_splines(data, spec, out.map);
  } else {
    out.searched = true;
    out.report = search_cutpoint(data, spec, jobs);
    out.map = GroupMap::from_cut(out.report.best_cut);
    out.fit = out.report.best_fit;
    std::cout << "best cut: " << out.report.best_cut << '\n';
    const fs::path report_path = dir / "cut_report.json";
    write_json_file(report_path.string(), serialize(out.report));
    note(report_path);
    std::vector<std::vector<std::string>> rows;
    for (const CutScore& s : out.report.scores)
      rows.push_back({std::to_string(s.cut), s.skipped ? "" : fmt(s.score),
                      s.skipped ? "1" : "0"});
    const fs::path scores_path = dir / "cut_scores.csv";
    write_csv_file(scores_path.string(), {"cut", "score", "skipped"}, rows);
    note(scores_path);
  }

  const fs::path fit_path = dir / "group_fit.json";
  write_json_file(fit_path.string(), serialize(out.fit));
  note(fit_path);

  const std::vector<double> grid = detail::schedule_grid();
  const CurveEvaluator e1(ExposureCurve{out.fit.grid, out.fit.f1});
  const CurveEvaluator e2(ExposureCurve{out.fit.grid, out.fit.f2});
  std::vector<std::vector<std::string>> curve_rows;
  for (const double t : grid) {
    const double f1 = e1(t), f2 = e2(t);
    curve_rows.push_back({fmt(t), fmt(f1), fmt(f2), fmt(f1 - f2)});
  }
  const fs::path curves_path = dir / "group_curves.csv";
  write_csv_file(curves_path.string(), {"t", "f1", "f2", "diff"}, curve_rows);
  note(curves_path);

  out.band = bootstrap_curve_difference(data, spec, out.map, replicates, seed, jobs);
  if (out.band.failures > 0)
    std::cerr << "warning: " << out.band.failures << " bootstrap replicates failed\n";
  const fs::path band_path = dir / "band.csv";
  write_band_csv(band_path.string(), out.band);
  note(band_path);
  return out;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::int64_t n = 1000;
  std::string delta = "identity";
  std::string delta_high;
  int plant_cut = 99;
  double xo_fraction = 0.35;
  double power = 1.42;
  double phi = 1.0;
  std::uint64_t seed = 1;
  std::string out = ".";
  std::string name = "portfolio";
};

SyntheticSpec make_synthetic_spec(std::int64_t n, const std::string& delta,
                                  const std::string& delta_high, int plant_cut,
                                  double xo_fraction, double power, double phi,
                                  std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.delta = DeltaLaw::parse(delta);
  if (!delta_high.empty()) {
    spec.delta_high = DeltaLaw::parse(delta_high);
    spec.plant_cut = plant_cut;
  }
  spec.xo_fraction = xo_fraction;
  spec.power = power;
  spec.phi = phi;
  spec.seed = seed;
  return spec;
}

Document truth_document(const SyntheticSpec& spec) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "truth";
  j["n"] = spec.n;
  Document beta = Document::object();
  const std::vector<std::string> names = FitResult::coefficient_names();
  for (std::size_t i = 0; i < names.size(); ++i) beta[names[i]] = spec.beta_true[i];
  j["beta_true"] = std::move(beta);
  j["delta"] = spec.delta.name();
  if (spec.delta_high) {
    j["delta_high"] = spec.delta_high->name();
    j["plant_cut"] = spec.plant_cut;
  } else {
    j["delta_high"] = nullptr;
  }
  j["xo_fraction"] = spec.xo_fraction;
  j["power"] = spec.power;
  j["phi"] = spec.phi;
  j["seed"] = spec.seed;
  Document bms = Document::array();
  for (const double w : spec.bms_weights) bms.push_back(w);
  j["bms_weights"] = std::move(bms);
  j["exposure_law"] = {{"alpha", spec.exposure_law.alpha},
                       {"beta", spec.exposure_law.beta},
                       {"lo", spec.exposure_law.lo},
                       {"hi", spec.exposure_law.hi}};
  return j;
}

void run_simulate(const SimulateArgs& args) {
  const fs::path dir = ensure_dir(args.out);
  const SyntheticSpec spec =
      make_synthetic_spec(args.n, args.delta, args.delta_high, args.plant_cut, args.xo_fraction,
                          args.power, args.phi, args.seed);
  const Portfolio p = simulate(spec);
  const fs::path csv_path = dir / (args.name + ".csv");
  write_csv(p, csv_path.string());
  const fs::path truth_path = dir / (args.name + ".truth.json");
  write_json_file(truth_path.string(), truth_document(spec));
  if (p.empty()) std::cerr << "warning: portfolio is empty\n";
  std::cout << "wrote " << p.size() << " records to " << csv_path.string() << '\n';
  note(truth_path);
}

// ---------------------------------------------------------------------------
// fit / score / penalty / groupsplit / report
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data;
  SpecFlags flags;
  std::string out = ".";
};

void run_fit(const FitArgs& args) {
  validate_knots_flag(args.flags.knots);
  const fs::path dir = ensure_dir(args.out);
  const Portfolio data = load_csv(args.data).portfolio;
  fit_models(data, args.flags, dir);
}

struct ScoreArgs {
  std::vector<std::string> fits;
  std::string data;
  std::string tag = "test";
  std::string out = ".";
};

void run_score(const ScoreArgs& args) {
  const fs::path dir = ensure_dir(args.out);
  const Portfolio data = load_csv(args.data).portfolio;
  std::vector<NamedFit> fits;
  for (const std::string& path : args.fits) {
    const std::string stem = model_name(path);
    const auto taken = [&fits](const std::string& s) {
      return std::any_of(fits.begin(), fits.end(),
                         [&s](const NamedFit& f) { return f.name == s; });
    };
    std::string name = stem;
    for (int k = 2; taken(name); ++k) name = stem + "_" + std::to_string(k);
    fits.push_back({name, deserialize_fit(read_json_file(path))});
  }
  score_models(fits, data, parse_dataset_tag(args.tag), dir, "");
}

struct PenaltyArgs {
  std::string fit;
  std::string data;
  std::vector<double> a = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::string out = ".";
};

void run_penalty(const PenaltyArgs& args) {
  const fs::path dir = ensure_dir(args.out);
  const FitResult base = deserialize_fit(read_json_file(args.fit));
  const Portfolio data = load_csv(args.data).portfolio;
  penalty_sweep(base, data, args.a, dir);
}

struct GroupArgs {
  std::string data;
  SpecFlags flags;
  int cut = 0;  // 0 = search all cuts
  int bootstrap = 50;
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string out = ".";
};

void run_groupsplit(const GroupArgs& args) {
  validate_knots_flag(args.flags.knots);
  const fs::path dir = ensure_dir(args.out);
  const Portfolio data = load_csv(args.data).portfolio;
  const FitSpec spec = make_spec(args.flags, args.flags.scheme);
  group_split(data, spec, args.cut, args.bootstrap, args.seed, args.jobs, dir);
}

struct ReportArgs {
  std::int64_t n = 8000;
  std::uint64_t seed = 1;
  std::string delta = "power:0.6";
  std::string delta_high;
  int plant_cut = 99;
  double xo_fraction = 0.35;
  double power = 1.42;
  double split_fraction = 0.75;
  std::vector<double> a = {0.0, 0.25, 0.5, 0.75, 1.0};
  int bootstrap = 50;
  int jobs = 1;
  std::string out = ".";
};

std::string md_table(const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream md;
  md << '|';
  for (const std::string& h : header) md << ' ' << h << " |";
  md << "\n|";
  for (std::size_t c = 0; c < header.size(); ++c) md << " --- |";
  md << '\n';
  for (const auto& row : rows) {
    md << '|';
    for (const std::string& cell : row) md << ' ' << cell << " |";
    md << '\n';
  }
  return md.str();
}

void write_summary_files(const SummaryReport& summary, const fs::path& dir) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "summary";
  j["has_claim_counts"] = summary.has_claim_counts;
  const auto stats_doc = [](const GroupStats& g) {
    Document s;
    s["contracts"] = g.contracts;
    s["total_exposure"] = g.total_exposure;
    s["total_losses"] = g.total_losses;
    s["total_claims"] = g.total_claims;
    s["frequency"] = g.frequency;
    s["mean_severity"] = g.mean_severity;
    s["annualized_loss_cost"] = g.annualized_loss_cost;
    return s;
  };
  j["all"] = stats_doc(summary.all);
  j["xx"] = stats_doc(summary.xx);
  j["xo"] = stats_doc(summary.xo);
  Document notices = Document::array();
  for (const std::string& n : summary.notices) notices.push_back(n);
  j["notices"] = std::move(notices);
  const fs::path sum_path = dir / "summary.json";
  write_json_file(sum_path.string(), j);
  note(sum_path);

  std::vector<std::vector<std::string>> bin_rows;
  for (const ExposureBin& b : summary.bins)
    bin_rows.push_back({fmt(b.lo), fmt(b.hi), std::to_string(b.contracts),
                        fmt(b.mean_loss_cost), fmt(b.annualized_loss_cost)});
  const fs::path bins_path = dir / "summary_bins.csv";
  write_csv_file(bins_path.string(),
                 {"lo", "hi", "contracts", "mean_loss_cost", "annualized_loss_cost"}, bin_rows);
  note(bins_path);

  std::vector<std::vector<std::string>> bms_rows;
  for (const BmsSummary& b : summary.bms)
    bms_rows.push_back({std::to_string(b.level), std::to_string(b.contracts), fmt(b.xo_share),
                        fmt(b.annualized_loss_cost)});
  const fs::path bms_path = dir / "summary_bms.csv";
  write_csv_file(bms_path.string(), {"level", "contracts", "xo_share", "annualized_loss_cost"},
                 bms_rows);
  note(bms_path);
}

void run_report(const ReportArgs& args) {
  const fs::path dir = ensure_dir(args.out);

  // Data: simulate, persist, split, summarize.
  const SyntheticSpec sim_spec =
      make_synthetic_spec(args.n, args.delta, args.delta_high, args.plant_cut, args.xo_fraction,
                          args.power, 1.0, args.seed);
  const Portfolio full = simulate(sim_spec);
  const fs::path full_path = dir / "portfolio.csv";
  write_csv(full, full_path.string());
  note(full_path);
  write_json_file((dir / "portfolio.truth.json").string(), truth_document(sim_spec));
  const auto [train, test] = split(full, args.split_fraction, args.seed);
  write_csv(train, (dir / "train.csv").string());
  write_csv(test, (dir / "test.csv").string());
  const SummaryReport summary = exploratory_summary(train);
  write_summary_files(summary, dir);

  // Models.
  SpecFlags flags;
  flags.scheme = "all";
  flags.power = args.power;
  const std::vector<NamedFit> fits = fit_models(train, flags, dir);

  // Scores on both datasets.
  const std::vector<ScoreRow> train_scores = score_models(fits, train, DatasetTag::Train, dir, "_train");
  const std::vector<ScoreRow> test_scores = score_models(fits, test, DatasetTag::Test, dir, "_test");

  // Penalty sweep on the curve-weighted flexible model.
  const NamedFit* gwm = nullptr;
  for (const NamedFit& f : fits)
    if (f.fit.scheme == WeightScheme::Gwm) gwm = &f;
  const std::vector<SweepRow> sweep = penalty_sweep(gwm->fit, train, args.a, dir);

  // Group structure.
  SpecFlags group_flags = flags;
  group_flags.scheme = "ewm";
  const FitSpec group_spec = make_spec(group_flags, "ewm");
  const GroupOutcome groups =
      group_split(train, group_spec, 0, args.bootstrap, args.seed, args.jobs, dir);

  // Consolidated markdown.
  std::ostringstream md;
  md << "# Ratemaking analysis bundle\n\n";
  md << "Synthetic portfolio: " << full.size() << " contracts (seed " << args.seed
     << ", exposure effect " << sim_spec.delta.name() << "), split " << train.size()
     << " train / " << test.size() << " test.\n\n";
  md << "## Portfolio\n\n";
  md << md_table({"segment", "contracts", "exposure", "losses", "frequency", "severity",
                  "annualized_loss_cost"},
                 {{"all", std::to_string(summary.all.contracts), fmt(summary.all.total_exposure),
                   fmt(summary.all.total_losses), fmt(summary.all.frequency),
                   fmt(summary.all.mean_severity), fmt(summary.all.annualized_loss_cost)},
                  {"xx", std::to_string(summary.xx.contracts), fmt(summary.xx.total_exposure),
                   fmt(summary.xx.total_losses), fmt(summary.xx.frequency),
                   fmt(summary.xx.mean_severity), fmt(summary.xx.annualized_loss_cost)},
                  {"xo", std::to_string(summary.xo.contracts), fmt(summary.xo.total_exposure),
                   fmt(summary.xo.total_losses), fmt(summary.xo.frequency),
                   fmt(summary.xo.mean_severity), fmt(summary.xo.annualized_loss_cost)}});
  md << "\n## Estimated coefficients\n\n";
  {
    std::vector<std::string> header = {"coefficient"};
    for (const NamedFit& f : fits) header.push_back(f.name);
    std::vector<std::vector<std::string>> rows;
    const std::vector<std::string> coef = FitResult::coefficient_names();
    for (std::size_t c = 0; c < coef.size(); ++c) {
      std::vector<std::string> row = {coef[c]};
      for (const NamedFit& f : fits) row.push_back(fmt(f.fit.beta[static_cast<Eigen::Index>(c)]));
      rows.push_back(std::move(row));
    }
    md << md_table(header, rows);
  }
  const auto score_table_md = [](const std::vector<ScoreRow>& rows) {
    std::vector<std::vector<std::string>> body;
    for (const ScoreRow& row : rows)
      body.push_back({row.model, fmt(100.0 * row.report.deviance), fmt(row.report.area),
                      fmt(row.report.abc)});
    return md_table({"model", "deviance_x100", "area", "abc"}, body);
  };
  md << "\n## Scores (train)\n\n" << score_table_md(train_scores);
  md << "\n## Scores (test)\n\n" << score_table_md(test_scores);
  md << "\n## Cancellation penalties\n\n";
  {
    std::vector<std::vector<std::string>> rows;
    for (const SweepRow& row : sweep)
      rows.push_back({fmt(row.a), fmt(100.0 * row.report.deviance),
                      fmt(row.decomposition.penalty_share),
                      fmt(row.decomposition.penalty_share_xo)});
    md << md_table({"a", "deviance_x100", "penalty_share", "penalty_share_xo"}, rows);
  }
  md << "\n## BMS group split\n\n";
  md << "Best cut: " << groups.report.best_cut << "\n\n";
  {
    std::vector<std::vector<std::string>> rows;
    for (const CutScore& s : groups.report.scores)
      rows.push_back({std::to_string(s.cut), s.skipped ? "skipped" : fmt(s.score)});
    md << md_table({"cut", "difference_score"}, rows);
  }
  md << "\n## Files\n\n";
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() != "REPORT.md")
      files.push_back(entry.path().filename().string());
  std::sort(files.begin(), files.end());
  for (const std::string& f : files) md << "- `" << f << "`\n";

  const fs::path report_path = dir / "REPORT.md";
  std::ofstream out(report_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + report_path.string());
  out << md.str();
  if (!out) throw std::runtime_error("write failed: " + report_path.string());
  note(report_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exposure-aware Tweedie ratemaking toolkit"};
  app.require_subcommand(1);

  const char* env_out = std::getenv("FLEXRATE_OUT");
  const std::string default_out = env_out ? env_out : ".";

  const auto check_delta = [](const std::string& s) {
    try {
      DeltaLaw::parse(s);
      return std::string{};
    } catch (const std::exception& e) {
      return std::string(e.what());
    }
  };
  SimulateArgs sim;
  sim.out = default_out;
  CLI::App* c_sim = app.add_subcommand("simulate", "Generate a synthetic portfolio CSV");
  c_sim->add_option("--n", sim.n, "Number of contracts")->check(CLI::NonNegativeNumber);
  c_sim->add_option("--delta", sim.delta, "True exposure effect (identity|power:a|scurve:k)")
      ->check(check_delta);
  c_sim->add_option("--delta-high", sim.delta_high,
                    "Distinct exposure effect for BMS levels above the planted cut")
      ->check(check_delta);
  c_sim->add_option("--plant-cut", sim.plant_cut, "BMS level below which --delta applies")
      ->check(CLI::Range(95, 103));
  c_sim->add_option("--xo-fraction", sim.xo_fraction, "Share of mid-term cancellations")
      ->check(CLI::Range(0.0, 1.0));
  c_sim->add_option("--power", sim.power, "Tweedie power index")->check(check_power);
  c_sim->add_option("--phi", sim.phi, "Dispersion")->check(CLI::PositiveNumber);
  c_sim->add_option("--seed", sim.seed, "RNG seed");
  c_sim->add_option("--out", sim.out, "Output directory");
  c_sim->add_option("--name", sim.name, "Output file stem");
  c_sim->callback([&] { run_simulate(sim); });

  FitArgs fit_args;
  fit_args.out = default_out;
  CLI::App* c_fit = app.add_subcommand("fit", "Fit one or all weight schemes to a portfolio");
  c_fit->add_option("--data", fit_args.data, "Portfolio CSV")->required();
  add_spec_flags(c_fit, fit_args.flags, true);
  c_fit->add_option("--out", fit_args.out, "Output directory");
  c_fit->callback([&] { run_fit(fit_args); });

  ScoreArgs score_args;
  score_args.out = default_out;
  CLI::App* c_score = app.add_subcommand("score", "Score fitted models on a dataset");
  c_score->add_option("--fit", score_args.fits, "Fit document(s)")->required();
  c_score->add_option("--data", score_args.data, "Portfolio CSV")->required();
  c_score->add_option("--tag", score_args.tag, "Dataset tag (train|test)")
      ->check(CLI::IsMember({"train", "test"}));
  c_score->add_option("--out", score_args.out, "Output directory");
  c_score->callback([&] { run_score(score_args); });

  PenaltyArgs pen_args;
  pen_args.out = default_out;
  CLI::App* c_pen = app.add_subcommand(
      "penalty", "Constrain a fitted curve and sweep the smoothing level");
  c_pen->add_option("--fit", pen_args.fit, "Fit document")->required();
  c_pen->add_option("--data", pen_args.data, "Portfolio CSV")->required();
  c_pen->add_option("--a", pen_args.a, "Smoothing levels in [0,1]")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0));
  c_pen->add_option("--out", pen_args.out, "Output directory");
  c_pen->callback([&] { run_penalty(pen_args); });

  GroupArgs group_args;
  group_args.out = default_out;
  CLI::App* c_group =
      app.add_subcommand("groupsplit", "Search BMS cut points and bootstrap the curve gap");
  c_group->add_option("--data", group_args.data, "Portfolio CSV")->required();
  add_spec_flags(c_group, group_args.flags, false);
  c_group->add_option("--scheme", group_args.flags.scheme, "Weight scheme (cwm|ewm)")
      ->check(CLI::IsMember({"cwm", "ewm"}));
  c_group->add_option("--cut", group_args.cut, "Fix the cut instead of searching")
      ->check(CLI::Range(95, 103));
  c_group->add_option("--bootstrap", group_args.bootstrap, "Bootstrap replicates")
      ->check(CLI::PositiveNumber);
  c_group->add_option("--seed", group_args.seed, "Bootstrap seed");
  c_group->add_option("--jobs", group_args.jobs, "Worker threads")->check(CLI::PositiveNumber);
  c_group->add_option("--out", group_args.out, "Output directory");
  c_group->callback([&] { run_groupsplit(group_args); });

  ReportArgs rep_args;
  rep_args.out = default_out;
  CLI::App* c_rep = app.add_subcommand(
      "report", "Full pipeline on a seeded synthetic portfolio: one deterministic bundle");
  c_rep->add_option("--n", rep_args.n, "Number of contracts")->check(CLI::PositiveNumber);
  c_rep->add_option("--seed", rep_args.seed, "RNG seed");
  c_rep->add_option("--delta", rep_args.delta, "True exposure effect")->check(check_delta);
  c_rep->add_option("--delta-high", rep_args.delta_high, "Planted second exposure effect")
      ->check(check_delta);
  c_rep->add_option("--plant-cut", rep_args.plant_cut, "Planted BMS cut")
      ->check(CLI::Range(95, 103));
  c_rep->add_option("--xo-fraction", rep_args.xo_fraction, "Share of mid-term cancellations")
      ->check(CLI::Range(0.0, 1.0));
  c_rep->add_option("--split-fraction", rep_args.split_fraction, "Training share")
      ->check([](const std::string& s) {
        const double f = std::strtod(s.c_str(), nullptr);
        return f > 0.0 && f < 1.0 ? std::string{} : std::string("split must lie in (0,1)");
      });
  c_rep->add_option("--a", rep_args.a, "Smoothing levels")->delimiter(',')
      ->check(CLI::Range(0.0, 1.0));
  c_rep->add_option("--bootstrap", rep_args.bootstrap, "Bootstrap replicates")
      ->check(CLI::PositiveNumber);
  c_rep->add_option("--jobs", rep_args.jobs, "Worker threads")->check(CLI::PositiveNumber);
  c_rep->add_option("--out", rep_args.out, "Output directory");
  c_rep->callback([&] { run_report(rep_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
