#pragma once
// Versioned JSON documents for fitted models, penalty schedules, and score
// reports, plus the CSV table writers behind the plot files. JSON numbers use
// the library's shortest round-trip encoding, so finite doubles survive a
// write/read cycle bitwise; non-finite trace metrics map to null.

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexrate/fit.hpp"
#include "flexrate/group_fit.hpp"
#include "flexrate/penalty.hpp"
#include "flexrate/scoring.hpp"
#include "flexrate/spline.hpp"

namespace flexrate {

using Document = nlohmann::ordered_json;  // insertion-ordered keys: stable bytes

constexpr int kDocumentVersion = 1;

namespace detail {

inline Document number_or_null(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

inline double number_from(const Document& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

inline Document array_from(const Eigen::VectorXd& v) {
  Document a = Document::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Document array_from(const std::vector<double>& v) {
  Document a = Document::array();
  for (const double x : v) a.push_back(x);
  return a;
}

inline Eigen::VectorXd vector_from(const Document& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  Eigen::Index i = 0;
  for (const auto& x : j) v[i++] = x.get<double>();
  return v;
}

inline std::vector<double> std_vector_from(const Document& j) {
  std::vector<double> v;
  v.reserve(j.size());
  for (const auto& x : j) v.push_back(x.get<double>());
  return v;
}

inline void check_version(const Document& j) {
  if (!j.contains("version") || j.at("version") != kDocumentVersion)
    throw std::runtime_error("document: unsupported or missing version");
}

inline Document named_map(const std::vector<std::string>& names, const Eigen::VectorXd& values) {
  if (static_cast<Eigen::Index>(names.size()) != values.size())
    throw std::invalid_argument("document: coefficient name/value mismatch");
  Document m = Document::object();
  for (std::size_t i = 0; i < names.size(); ++i)
    m[names[i]] = values[static_cast<Eigen::Index>(i)];
  return m;
}

inline Eigen::VectorXd named_vector(const Document& j, const std::vector<std::string>& names) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = j.at(names[i]).get<double>();
  return v;
}

}  // namespace detail

inline std::string to_string(MeanStructure m) {
  switch (m) {
    case MeanStructure::TraditionalIdentity:
      return "identity";
    case MeanStructure::Spline:
      return "spline";
    case MeanStructure::FixedSchedule:
      return "schedule";
  }
  throw std::invalid_argument("mean structure: unknown value");
}

inline MeanStructure parse_mean_structure(const std::string& s) {
  if (s == "identity") return MeanStructure::TraditionalIdentity;
  if (s == "spline") return MeanStructure::Spline;
  if (s == "schedule") return MeanStructure::FixedSchedule;
  throw std::invalid_argument("mean structure: unknown name '" + s + "'");
}

inline DatasetTag parse_dataset_tag(const std::string& s) {
  if (s == "train") return DatasetTag::Train;
  if (s == "test") return DatasetTag::Test;
  throw std::invalid_argument("dataset tag: unknown name '" + s + "'");
}

// ---------------------------------------------------------------------------
// FitResult
// ---------------------------------------------------------------------------

inline Document serialize(const FitResult& fit) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "fit";
  j["scheme"] = to_string(fit.scheme);
  j["power"] = fit.power;
  j["mean_structure"] = to_string(fit.mean_structure);
  j["beta"] = detail::named_map(FitResult::coefficient_names(), fit.beta);
  j["knots"] = detail::array_from(fit.curve.grid.knots);
  j["coefficients"] = detail::array_from(fit.curve.coefficients);
  j["log_coefficients"] = detail::array_from(fit.log_curve);
  j["schedule_t"] = detail::array_from(fit.schedule_t);
  j["schedule_gamma"] = detail::array_from(fit.schedule_gamma);
  j["lambda"] = fit.lambda;
  j["deviance_train"] = fit.deviance_train;
  j["converged"] = fit.converged;
  j["diagnostic"] = fit.diagnostic;
  Document trace = Document::array();
  for (const GwmIteration& it : fit.trace) {
    Document t;
    t["iteration"] = it.iteration;
    t["curve"] = detail::array_from(it.curve.coefficients);
    t["max_weight_change"] = detail::number_or_null(it.max_weight_change);
    t["max_curve_change"] = detail::number_or_null(it.max_curve_change);
    trace.push_back(std::move(t));
  }
  j["trace"] = std::move(trace);
  Document irls = Document::array();
  for (const IrlsIteration& it : fit.irls) {
    Document t;
    t["iteration"] = it.iteration;
    t["penalized_deviance"] = it.penalized_deviance;
    t["step_halvings"] = it.step_halvings;
    irls.push_back(std::move(t));
  }
  j["irls"] = std::move(irls);
  return j;
}

inline FitResult deserialize_fit(const Document& j) {
  detail::check_version(j);
  if (j.value("kind", "") != std::string("fit"))
    throw std::runtime_error("document: not a fit document");
  FitResult fit;
  fit.scheme = parse_scheme(j.at("scheme").get<std::string>());
  fit.power = j.at("power").get<double>();
  fit.mean_structure = parse_mean_structure(j.at("mean_structure").get<std::string>());
  fit.beta = detail::named_vector(j.at("beta"), FitResult::coefficient_names());
  fit.curve.grid.knots = detail::std_vector_from(j.at("knots"));
  fit.curve.coefficients = detail::vector_from(j.at("coefficients"));
  fit.log_curve = detail::vector_from(j.at("log_coefficients"));
  fit.schedule_t = detail::std_vector_from(j.at("schedule_t"));
  fit.schedule_gamma = detail::std_vector_from(j.at("schedule_gamma"));
  fit.lambda = j.at("lambda").get<double>();
  fit.deviance_train = j.at("deviance_train").get<double>();
  fit.converged = j.at("converged").get<bool>();
  fit.diagnostic = j.at("diagnostic").get<std::string>();
  for (const auto& t : j.at("trace")) {
    GwmIteration it;
    it.iteration = t.at("iteration").get<int>();
    it.curve = ExposureCurve{fit.curve.grid, detail::vector_from(t.at("curve"))};
    it.max_weight_change = detail::number_from(t.at("max_weight_change"));
    it.max_curve_change = detail::number_from(t.at("max_curve_change"));
    fit.trace.push_back(std::move(it));
  }
  for (const auto& t : j.at("irls")) {
    IrlsIteration it;
    it.iteration = t.at("iteration").get<int>();
    it.penalized_deviance = t.at("penalized_deviance").get<double>();
    it.step_halvings = t.at("step_halvings").get<int>();
    fit.irls.push_back(it);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// PenaltySchedule
// ---------------------------------------------------------------------------

inline Document serialize(const PenaltySchedule& s) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "penalty_schedule";
  j["a"] = s.a;
  j["grid"] = detail::array_from(s.grid_t);
  j["values"] = detail::array_from(s.gamma_con);
  if (s.beta.size() > 0)
    j["beta"] = detail::named_map(FitResult::coefficient_names(), s.beta);
  else
    j["beta"] = nullptr;
  return j;
}

inline PenaltySchedule deserialize_schedule(const Document& j) {
  detail::check_version(j);
  if (j.value("kind", "") != std::string("penalty_schedule"))
    throw std::runtime_error("document: not a penalty schedule document");
  PenaltySchedule s;
  s.a = j.at("a").get<double>();
  s.grid_t = detail::std_vector_from(j.at("grid"));
  s.gamma_con = detail::std_vector_from(j.at("values"));
  if (!j.at("beta").is_null())
    s.beta = detail::named_vector(j.at("beta"), FitResult::coefficient_names());
  return s;
}

// ---------------------------------------------------------------------------
// ScoreReport
// ---------------------------------------------------------------------------

inline Document serialize(const ScoreReport& r) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "score";
  j["dataset_tag"] = to_string(r.dataset_tag);
  j["deviance"] = r.deviance;
  j["deviance_x100"] = 100.0 * r.deviance;  // display convention; raw above
  j["area"] = r.area;
  j["abc"] = r.abc;
  Document murphy = Document::array();
  for (const MurphyPoint& pt : r.murphy) {
    Document p;
    p["m"] = pt.m;
    p["loss"] = pt.loss;
    murphy.push_back(std::move(p));
  }
  j["murphy"] = std::move(murphy);
  return j;
}

inline ScoreReport deserialize_score(const Document& j) {
  detail::check_version(j);
  if (j.value("kind", "") != std::string("score"))
    throw std::runtime_error("document: not a score document");
  ScoreReport r;
  r.dataset_tag = parse_dataset_tag(j.at("dataset_tag").get<std::string>());
  r.deviance = j.at("deviance").get<double>();
  r.area = j.at("area").get<double>();
  r.abc = j.at("abc").get<double>();
  for (const auto& p : j.at("murphy"))
    r.murphy.push_back(MurphyPoint{p.at("m").get<double>(), p.at("loss").get<double>()});
  return r;
}

// ---------------------------------------------------------------------------
// Group splines
// ---------------------------------------------------------------------------

inline Document serialize(const GroupSplineFit& fit) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "group_fit";
  j["scheme"] = to_string(fit.scheme);
  j["power"] = fit.power;
  j["beta"] = detail::named_map(GroupSplineFit::coefficient_names(), fit.beta);
  j["knots"] = detail::array_from(fit.grid.knots);
  j["f1"] = detail::array_from(fit.f1);
  j["f2"] = detail::array_from(fit.f2);
  j["lambda"] = fit.lambda;
  j["deviance_train"] = fit.deviance_train;
  j["converged"] = fit.converged;
  j["diagnostic"] = fit.diagnostic;
  return j;
}

inline GroupSplineFit deserialize_group_fit(const Document& j) {
  detail::check_version(j);
  if (j.value("kind", "") != std::string("group_fit"))
    throw std::runtime_error("document: not a group fit document");
  GroupSplineFit fit;
  fit.scheme = parse_scheme(j.at("scheme").get<std::string>());
  fit.power = j.at("power").get<double>();
  fit.beta = detail::named_vector(j.at("beta"), GroupSplineFit::coefficient_names());
  fit.grid.knots = detail::std_vector_from(j.at("knots"));
  fit.f1 = detail::vector_from(j.at("f1"));
  fit.f2 = detail::vector_from(j.at("f2"));
  fit.lambda = j.at("lambda").get<double>();
  fit.deviance_train = j.at("deviance_train").get<double>();
  fit.converged = j.at("converged").get<bool>();
  fit.diagnostic = j.at("diagnostic").get<std::string>();
  return fit;
}

inline Document serialize(const CutReport& report) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "cut_report";
  j["best_cut"] = report.best_cut;
  Document scores = Document::array();
  for (const CutScore& s : report.scores) {
    Document e;
    e["cut"] = s.cut;
    e["skipped"] = s.skipped;
    e["score"] = s.skipped ? Document(nullptr) : Document(s.score);
    scores.push_back(std::move(e));
  }
  j["scores"] = std::move(scores);
  j["best_fit"] = serialize(report.best_fit);
  return j;
}

inline Document serialize(const DecompositionReport& rep) {
  Document j;
  j["version"] = kDocumentVersion;
  j["kind"] = "decomposition";
  j["total_premium"] = rep.total_premium;
  j["total_pro_rata"] = rep.total_pro_rata;
  j["total_penalty"] = rep.total_penalty;
  j["penalty_share"] = rep.penalty_share;
  j["penalty_share_xo"] = rep.penalty_share_xo;
  return j;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void write_json_file(const std::string& path, const Document& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Document read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  Document j;
  try {
    j = Document::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

// Plot-data number format: 12 significant digits, plenty for display while
// keeping files readable.
inline std::string csv_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

inline void write_csv_file(const std::string& path, const std::vector<std::string>& header,
                           const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t c = 0; c < header.size(); ++c)
    out << (c ? "," : "") << header[c];
  out << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw std::invalid_argument("csv: row width does not match header");
    for (std::size_t c = 0; c < row.size(); ++c)
      out << (c ? "," : "") << row[c];
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline void write_curve_pair_csv(const std::string& path, const CurvePair& curves) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(curves.theta.size());
  for (std::size_t k = 0; k < curves.theta.size(); ++k)
    rows.push_back({csv_number(curves.theta[k]), csv_number(curves.cc[k]),
                    csv_number(curves.lc[k])});
  write_csv_file(path, {"theta", "cc", "lc"}, rows);
}

// One threshold column plus one loss column per model.
inline void write_murphy_csv(const std::string& path, const std::vector<std::string>& names,
                             const std::vector<std::vector<MurphyPoint>>& curves) {
  if (names.size() != curves.size() || curves.empty())
    throw std::invalid_argument("murphy csv: need one name per curve");
  std::vector<std::string> header = {"m"};
  for (const std::string& name : names) header.push_back("loss_" + name);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t j = 0; j < curves[0].size(); ++j) {
    std::vector<std::string> row = {csv_number(curves[0][j].m)};
    for (const auto& curve : curves) {
      if (curve.size() != curves[0].size() || curve[j].m != curves[0][j].m)
        throw std::invalid_argument("murphy csv: curves disagree on the threshold grid");
      row.push_back(csv_number(curve[j].loss));
    }
    rows.push_back(std::move(row));
  }
  write_csv_file(path, header, rows);
}

// Schedule table: exposure, adjusted curve, and penalty per unit of annual
// premium (rho / pi = max(0, gamma_adj - t)).
inline void write_penalty_csv(const std::string& path, const PenaltySchedule& schedule) {
  schedule.validate();
  std::vector<std::vector<std::string>> rows;
  rows.reserve(schedule.grid_t.size());
  for (std::size_t j = 0; j < schedule.grid_t.size(); ++j) {
    const double rho_over_pi = std::max(0.0, schedule.gamma_con[j] - schedule.grid_t[j]);
    rows.push_back({csv_number(schedule.grid_t[j]), csv_number(schedule.gamma_con[j]),
                    csv_number(rho_over_pi)});
  }
  write_csv_file(path, {"t", "gamma_adj", "rho_over_pi"}, rows);
}

// Long-format weight-curve trace: one row per outer iteration and knot.
inline void write_trace_csv(const std::string& path, const FitResult& fit) {
  std::vector<std::vector<std::string>> rows;
  for (const GwmIteration& it : fit.trace) {
    const std::vector<double>& knots = it.curve.grid.knots;
    for (std::size_t k = 0; k < knots.size(); ++k)
      rows.push_back({std::to_string(it.iteration), csv_number(knots[k]),
                      csv_number(it.curve.coefficients[static_cast<Eigen::Index>(k)])});
  }
  write_csv_file(path, {"iteration", "t", "gamma"}, rows);
}

inline void write_band_csv(const std::string& path, const DifferenceBand& band) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(band.grid.size());
  for (std::size_t j = 0; j < band.grid.size(); ++j)
    rows.push_back({csv_number(band.grid[j]), csv_number(band.base_diff[j]),
                    csv_number(band.mean_diff[j]), csv_number(band.se[j])});
  write_csv_file(path, {"t", "base_diff", "mean_diff", "se"}, rows);
}

inline void write_cumulative_csv(const std::string& path, const DecompositionReport& rep) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(rep.cumulative.size());
  for (const CumulativeSharePoint& pt : rep.cumulative)
    rows.push_back({csv_number(pt.exposure), csv_number(pt.premium_share),
                    csv_number(pt.pro_rata_share), csv_number(pt.penalty_share),
                    csv_number(pt.loss_share)});
  write_csv_file(path, {"exposure", "premium_share", "pro_rata_share", "penalty_share",
                        "loss_share"},
                 rows);
}

}  // namespace flexrate
