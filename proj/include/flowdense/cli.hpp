#pragma once

// Command implementations behind the flowdense executable: strict JSON config
// parsing, model persistence and CSV/JSON report writers.

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowdense/diagnostics.hpp"
#include "flowdense/estimator.hpp"
#include "flowdense/semiparametric.hpp"
#include "flowdense/target.hpp"

namespace flowdense::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kStalled = 4 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- formatting -------------------------------------------------------------

/// Shortest decimal that round-trips.
inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

/// Header row then one row per record; all values full precision.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) {
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }
  void row(const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out_ << (i ? "," : "") << num(v[i]);
    out_ << '\n';
  }
  void save(const fs::path& p) const { write_text(p, out_.str()); }

 private:
  std::ostringstream out_;
};

inline std::vector<std::string> coord_names(const std::string& stem, int d) {
  if (d == 1) return {stem};
  std::vector<std::string> n;
  for (int c = 1; c <= d; ++c) n.push_back(stem + std::to_string(c));
  return n;
}

// --- schema helpers -----------------------------------------------------------

inline void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

inline const json& require(const json& j, const std::string& key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(where + ": missing key '" + key + "'");
  return *it;
}

inline double as_number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError(where + ": expected a number");
  return v.get<double>();
}

inline long long as_integer(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
  return v.get<long long>();
}

inline std::string as_string(const json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + ": expected a string");
  return v.get<std::string>();
}

inline bool as_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
  return v.get<bool>();
}

inline std::vector<double> as_numbers(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(as_number(e, where));
  return out;
}

inline double number_or(const json& j, const std::string& key, double fallback, const std::string& where) {
  return j.contains(key) ? as_number(j[key], where + "." + key) : fallback;
}

inline long long integer_or(const json& j, const std::string& key, long long fallback, const std::string& where) {
  return j.contains(key) ? as_integer(j[key], where + "." + key) : fallback;
}

/// Rows from a JSON array of numbers (d = 1) or of equal-length arrays.
inline Points points_from_json(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": expected an array");
  if (v.empty()) return Points(0, 1);
  if (v[0].is_array()) {
    const auto d = static_cast<Eigen::Index>(v[0].size());
    if (d == 0) throw ConfigError(where + ": empty row");
    Points p(static_cast<Eigen::Index>(v.size()), d);
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto row = as_numbers(v[i], where);
      if (static_cast<Eigen::Index>(row.size()) != d) throw ConfigError(where + ": ragged rows");
      for (Eigen::Index c = 0; c < d; ++c) p(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)];
    }
    return p;
  }
  auto vals = as_numbers(v, where);
  Points p(static_cast<Eigen::Index>(vals.size()), 1);
  for (std::size_t i = 0; i < vals.size(); ++i) p(static_cast<Eigen::Index>(i), 0) = vals[i];
  return p;
}

inline json points_to_json(const Points& p) {
  json a = json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index c = 0; c < p.cols(); ++c) r.push_back(p(i, c));
    a.push_back(std::move(r));
  }
  return a;
}

// --- data ---------------------------------------------------------------------

/// Numeric CSV; a first line that does not parse as numbers is a header.
inline Points read_csv_points(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read data file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    bool ok = true;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      auto b = cell.find_first_not_of(" \t"), e = cell.find_last_not_of(" \t");
      if (b == std::string::npos) {
        ok = false;
        break;
      }
      double v = 0.0;
      auto r = std::from_chars(cell.data() + b, cell.data() + e + 1, v);
      if (r.ec != std::errc() || r.ptr != cell.data() + e + 1) {
        ok = false;
        break;
      }
      row.push_back(v);
    }
    if (!ok) {
      if (first) {
        first = false;
        continue;
      }
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": not a numeric row");
    }
    first = false;
    if (!rows.empty() && row.size() != rows[0].size())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": wrong number of columns");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path.string() + ": no data rows");
  Points p(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  if (!all_finite(p)) throw DataError(path.string() + ": non-finite values");
  return p;
}

inline TargetFamily family_from(const json& v, const std::string& where) {
  try {
    return parse_target_family(as_string(v, where));
  } catch (const ArgumentError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

/// Inline array, {"csv": path} or {"generator": ..., "n": ..., "seed": ...}.
inline Points load_data(const json& spec, const fs::path& base) {
  const std::string w = "data";
  if (spec.is_array()) {
    Points p = points_from_json(spec, w);
    if (p.rows() == 0) throw DataError("data: empty inline array");
    if (!all_finite(p)) throw DataError("data: non-finite values");
    return p;
  }
  if (!spec.is_object()) throw ConfigError("data: expected an array or an object");
  if (spec.contains("csv")) {
    check_keys(spec, w, {"csv"});
    fs::path p = as_string(spec["csv"], "data.csv");
    return read_csv_points(p.is_absolute() ? p : base / p);
  }
  const std::string gen = as_string(require(spec, "generator", w), "data.generator");
  const auto n = as_integer(require(spec, "n", w), "data.n");
  if (n < 1) throw ConfigError("data.n must be positive");
  const auto seed = static_cast<std::uint64_t>(as_integer(require(spec, "seed", w), "data.seed"));
  try {
    if (gen == "truncated_normal_mixture") {
      check_keys(spec, w, {"generator", "n", "seed", "weights", "means", "sds", "lower", "upper"});
      return sample_truncated_normal_mixture(as_numbers(require(spec, "weights", w), "data.weights"),
                                             as_numbers(require(spec, "means", w), "data.means"),
                                             as_numbers(require(spec, "sds", w), "data.sds"),
                                             number_or(spec, "lower", 0.0, w), number_or(spec, "upper", 1.0, w), n, seed);
    }
    if (gen == "chisq_normal_mixture") {
      check_keys(spec, w, {"generator", "n", "seed", "chisq_weight", "df", "mu", "sigma"});
      return sample_chisq_normal_mixture(as_number(require(spec, "chisq_weight", w), "data.chisq_weight"),
                                         static_cast<int>(as_integer(require(spec, "df", w), "data.df")),
                                         as_number(require(spec, "mu", w), "data.mu"),
                                         as_number(require(spec, "sigma", w), "data.sigma"), n, seed);
    }
    if (gen == "target") {
      check_keys(spec, w, {"generator", "n", "seed", "family", "params", "dim"});
      auto t = TargetDensity::from_params(family_from(require(spec, "family", w), "data.family"),
                                          as_numbers(require(spec, "params", w), "data.params"),
                                          static_cast<int>(integer_or(spec, "dim", 1, w)));
      return t.sample(n, seed);
    }
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  throw ConfigError("data.generator: unknown generator '" + gen + "'");
}

// --- kernel, target, fit settings -----------------------------------------------

/// {"family": "gaussian", "sigma": s} or {"family": ..., "sigma_factor": f}
/// with f times the data standard deviation.
inline RadialKernel parse_kernel(const json& j, const Points& data) {
  check_keys(j, "kernel", {"family", "sigma", "sigma_factor"});
  KernelFamily fam = KernelFamily::gaussian;
  if (j.contains("family")) {
    try {
      fam = parse_kernel_family(as_string(j["family"], "kernel.family"));
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("kernel.family: ") + e.what());
    }
  }
  if (j.contains("sigma") == j.contains("sigma_factor"))
    throw ConfigError("kernel: give exactly one of 'sigma' and 'sigma_factor'");
  double sigma = j.contains("sigma") ? as_number(j["sigma"], "kernel.sigma")
                                     : as_number(j["sigma_factor"], "kernel.sigma_factor") * data_scale(data);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("kernel: sigma must be positive");
  return RadialKernel(fam, sigma, static_cast<int>(data.cols()));
}

/// {"family": ..., "params": [...]} or {"family": ..., "fit": "mle"}.
inline TargetDensity parse_target(const json& j, const Points& data) {
  check_keys(j, "target", {"family", "params", "fit"});
  TargetFamily fam = family_from(require(j, "family", "target"), "target.family");
  if (j.contains("params") == j.contains("fit")) throw ConfigError("target: give exactly one of 'params' and 'fit'");
  try {
    if (j.contains("fit")) {
      if (as_string(j["fit"], "target.fit") != "mle") throw ConfigError("target.fit: only \"mle\" is supported");
      return mle_fit(fam, data);
    }
    return TargetDensity::from_params(fam, as_numbers(j["params"], "target.params"), static_cast<int>(data.cols()));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("target: ") + e.what());
  } catch (const DegeneracyError& e) {
    throw DataError(std::string("target: ") + e.what());
  }
}

inline FitConfig parse_fit(const json& j, int dim) {
  const std::string w = "fit";
  check_keys(j, w, {"lambda", "steps", "knots", "optimizer", "optimize_knot_positions"});
  FitConfig c;
  c.lambda = as_number(require(j, "lambda", w), "fit.lambda");
  c.grid = TimeGrid{};
  c.grid.steps = static_cast<int>(integer_or(j, "steps", 20, w));
  if (j.contains("optimize_knot_positions"))
    c.optimize_knot_positions = as_bool(j["optimize_knot_positions"], "fit.optimize_knot_positions");
  if (j.contains("knots")) {
    const json& k = j["knots"];
    check_keys(k, "fit.knots", {"strategy", "count", "delta", "points", "seed"});
    try {
      c.knot_strategy = parse_knot_strategy(as_string(require(k, "strategy", "fit.knots"), "fit.knots.strategy"));
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("fit.knots.strategy: ") + e.what());
    }
    c.subsample_size = static_cast<int>(integer_or(k, "count", 0, "fit.knots"));
    c.delta = number_or(k, "delta", c.delta, "fit.knots");
    c.seed = static_cast<std::uint64_t>(integer_or(k, "seed", 0, "fit.knots"));
    if (k.contains("points")) {
      c.explicit_knots = points_from_json(k["points"], "fit.knots.points");
      if (c.explicit_knots.rows() > 0 && c.explicit_knots.cols() != dim)
        throw ConfigError("fit.knots.points: dimension differs from the data");
    }
    if (c.knot_strategy == KnotStrategy::subsample && c.subsample_size < 1)
      throw ConfigError("fit.knots: subsample needs a positive 'count'");
    if (c.knot_strategy == KnotStrategy::explicit_list && !k.contains("points"))
      throw ConfigError("fit.knots: explicit strategy needs 'points'");
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    const std::string ow = "fit.optimizer";
    check_keys(o, ow, {"method", "max_iters", "gradient_tol", "armijo_c", "max_halvings", "memory",
                       "curvature_preconditioner", "eigen_cutoff"});
    auto& oc = c.optimizer;
    if (o.contains("method")) {
      try {
        oc.method = parse_optimizer_method(as_string(o["method"], ow + ".method"));
      } catch (const ArgumentError& e) {
        throw ConfigError(ow + ".method: " + e.what());
      }
    }
    oc.max_iters = static_cast<int>(integer_or(o, "max_iters", oc.max_iters, ow));
    oc.gradient_tol = number_or(o, "gradient_tol", oc.gradient_tol, ow);
    oc.armijo_c = number_or(o, "armijo_c", oc.armijo_c, ow);
    oc.max_halvings = static_cast<int>(integer_or(o, "max_halvings", oc.max_halvings, ow));
    oc.memory = static_cast<int>(integer_or(o, "memory", oc.memory, ow));
    oc.eigen_cutoff = number_or(o, "eigen_cutoff", oc.eigen_cutoff, ow);
    if (o.contains("curvature_preconditioner"))
      oc.curvature_preconditioner = as_bool(o["curvature_preconditioner"], ow + ".curvature_preconditioner");
  }
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("fit: ") + e.what());
  }
  return c;
}

inline OuterConfig parse_outer(const json& j) {
  check_keys(j, "outer", {"max_outer", "theta_tol", "phi_tol"});
  OuterConfig o;
  o.max_outer = static_cast<int>(integer_or(j, "max_outer", o.max_outer, "outer"));
  o.theta_tol = number_or(j, "theta_tol", o.theta_tol, "outer");
  o.phi_tol = number_or(j, "phi_tol", o.phi_tol, "outer");
  if (o.max_outer < 1 || !(o.theta_tol >= 0.0) || !(o.phi_tol >= 0.0)) throw ConfigError("outer: invalid tolerances");
  return o;
}

struct OutputSpec {
  fs::path dir = ".";
  int grid_points = 512;
};

inline OutputSpec parse_output(const json& j) {
  check_keys(j, "output", {"dir", "grid_points"});
  OutputSpec o;
  if (j.contains("dir")) o.dir = as_string(j["dir"], "output.dir");
  o.grid_points = static_cast<int>(integer_or(j, "grid_points", o.grid_points, "output"));
  if (o.grid_points < 2) throw ConfigError("output.grid_points must be at least 2");
  return o;
}

// --- model persistence ----------------------------------------------------------

inline json model_to_json(const DensityEstimate& est) {
  json j;
  j["format"] = "flowdense-model";
  j["version"] = 1;
  j["kernel"] = {{"family", to_string(est.kernel.family())}, {"sigma", est.kernel.sigma()}, {"dim", est.dim()}};
  j["target"] = {{"family", to_string(est.target.family())}, {"params", est.target.params()}};
  j["lambda"] = est.lambda;
  j["steps"] = est.grid.steps;
  j["knots"] = points_to_json(est.knots.knots);
  j["momenta"] = points_to_json(est.knots.momenta);
  return j;
}

/// Rebuilds the estimate; `data` (possibly empty) is cached for the
/// terminal flow.
inline DensityEstimate model_from_json(const json& j, const Points& data = Points(0, 1)) {
  const std::string w = "model";
  check_keys(j, w, {"format", "version", "kernel", "target", "lambda", "steps", "knots", "momenta"});
  if (as_string(require(j, "format", w), "model.format") != "flowdense-model") throw ConfigError("model: unknown format");
  if (as_integer(require(j, "version", w), "model.version") != 1) throw ConfigError("model: unsupported version");
  const json& kj = require(j, "kernel", w);
  check_keys(kj, "model.kernel", {"family", "sigma", "dim"});
  KernelFamily kf;
  TargetFamily tf;
  try {
    kf = parse_kernel_family(as_string(require(kj, "family", "model.kernel"), "model.kernel.family"));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("model.kernel: ") + e.what());
  }
  const int d = static_cast<int>(as_integer(require(kj, "dim", "model.kernel"), "model.kernel.dim"));
  const double sigma = as_number(require(kj, "sigma", "model.kernel"), "model.kernel.sigma");
  if (d < 1 || !(sigma > 0.0)) throw ConfigError("model.kernel: invalid dim or sigma");
  const json& tj = require(j, "target", w);
  check_keys(tj, "model.target", {"family", "params"});
  tf = family_from(require(tj, "family", "model.target"), "model.target.family");
  KnotSystem ks;
  ks.knots = points_from_json(require(j, "knots", w), "model.knots");
  ks.momenta = points_from_json(require(j, "momenta", w), "model.momenta");
  if (ks.knots.rows() == 0) {
    ks.knots = Points(0, d);
    ks.momenta = Points(0, d);
  }
  if (ks.knots.cols() != d || ks.momenta.cols() != d || ks.knots.rows() != ks.momenta.rows())
    throw ConfigError("model: knot/momentum shapes do not match");
  if (data.rows() > 0 && data.cols() != d) throw DataError("data dimension differs from the model");
  try {
    RadialKernel kernel(kf, sigma, d);
    TargetDensity target = TargetDensity::from_params(tf, as_numbers(require(tj, "params", "model.target"), "model.target.params"), d);
    TimeGrid grid(static_cast<int>(as_integer(require(j, "steps", w), "model.steps")));
    const double lambda = as_number(require(j, "lambda", w), "model.lambda");
    ks.validate();
    return make_estimate(kernel, ks, target, grid, lambda, data.rows() > 0 ? data : Points(0, d));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

// --- report pieces ----------------------------------------------------------------

inline Points probe_grid(const DensityEstimate& est, const Points& data, int count) {
  if (est.dim() != 1) return data;
  return default_probe_grid(data, est.kernel.sigma(), count);
}

inline void write_density_csv(const fs::path& p, const DensityEstimate& est, const Points& x) {
  auto header = coord_names("x", est.dim());
  header.push_back("fhat");
  CsvWriter w(header);
  Vector f = density_estimate(est, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> r(x.row(i).data(), x.row(i).data() + x.cols());
    r.push_back(f(i));
    w.row(r);
  }
  w.save(p);
}

inline void write_target_csv(const fs::path& p, const TargetDensity& t, const Points& x) {
  auto header = coord_names("x", t.dim());
  header.push_back("density");
  CsvWriter w(header);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> r(x.row(i).data(), x.row(i).data() + x.cols());
    r.push_back(std::exp(t.log_density(x.row(i).data())));
    w.row(r);
  }
  w.save(p);
}

inline void write_points_csv(const fs::path& p, const Points& x) {
  CsvWriter w(coord_names("x", static_cast<int>(x.cols())));
  for (Eigen::Index i = 0; i < x.rows(); ++i) w.row(std::vector<double>(x.row(i).data(), x.row(i).data() + x.cols()));
  w.save(p);
}

inline json fit_report_json(const DensityEstimate& est, const FitConfig& cfg) {
  const FitReport& r = est.report;
  json j;
  j["energy"] = r.energy;
  j["likelihood"] = r.likelihood;
  j["penalty"] = r.penalty;
  j["gradient_norm"] = r.gradient_norm;
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["status"] = r.status;
  j["knot_strategy"] = to_string(cfg.knot_strategy);
  j["knot_count"] = est.knots.size();
  j["lambda"] = cfg.lambda;
  j["kernel_sigma"] = est.kernel.sigma();
  j["el_relative_residual"] = r.el_relative_residual ? json(*r.el_relative_residual) : json(nullptr);
  j["energy_trace"] = r.energy_trace;
  j["gradient_trace"] = r.gradient_trace;
  j["step_trace"] = r.step_trace;
  if (est.dim() == 1) {
    KsResult ks = pushforward_gof(est, est.data);
    j["pushforward_ks"] = {{"statistic", ks.statistic}, {"p_value", ks.p_value}};
    j["density_integral"] = density_integral(est);
  }
  j["rng"] = kRngName;
  return j;
}

/// Fit with stalls turned into a flagged estimate.
inline DensityEstimate run_fit(const Points& data, const TargetDensity& target, const RadialKernel& kernel,
                               const FitConfig& cfg, bool& stalled) {
  stalled = false;
  DensityEstimate est;
  try {
    est = fit_pmle(data, target, kernel, cfg);
  } catch (const OptimizerStalled& e) {
    est = e.best();
    stalled = true;
  }
  est.report.el_relative_residual = el_relative_residual(est, data);
  return est;
}

inline std::vector<std::vector<double>> curve_rows(const TimeCurve& c) {
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < c.x_grid.rows(); ++i) {
    std::vector<double> r{c.t};
    for (Eigen::Index a = 0; a < c.x_grid.cols(); ++a) r.push_back(c.x_grid(i, a));
    for (Eigen::Index a = 0; a < c.lambda_v.cols(); ++a) r.push_back(c.lambda_v(i, a));
    for (Eigen::Index a = 0; a < c.d_field.cols(); ++a) r.push_back(c.d_field(i, a));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_diagnostics(const fs::path& dir, const std::string& stem, const DiagnosticReport& rep, int d) {
  std::vector<std::string> header{"t"};
  for (auto& s : coord_names("x", d)) header.push_back(s);
  for (auto& s : coord_names("lambda_v", d)) header.push_back(s);
  for (auto& s : coord_names("D", d)) header.push_back(s);
  CsvWriter w(header);
  for (const auto& c : rep.curves)
    for (auto& r : curve_rows(c)) w.row(r);
  w.save(dir / (stem + ".csv"));

  json j;
  j["times"] = rep.times;
  j["residual_norm"] = rep.residual_norm;
  j["relative_residual"] = rep.relative_residual;
  j["lambda_v_norm"] = rep.lambda_v_norm;
  j["d_norm"] = rep.d_norm;
  json st = json::array();
  for (const auto& s : rep.stein) st.push_back({{"id", s.id}, {"t0", s.t0}, {"t1", s.t1}, {"field_norm", s.field_norm}});
  j["stein"] = st;
  write_json(dir / (stem + ".json"), j);
}

inline void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory " + p.string());
}

// --- commands ----------------------------------------------------------------------

/// Runs `body` and maps the library's exceptions onto exit codes.
template <class Body>
int guarded(Body&& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DegeneracyError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const UnsupportedDimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ArgumentError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kStalled;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kInternal;
  }
}

inline int cmd_fit(const fs::path& config_path, std::ostream& err = std::cerr) {
  return guarded([&] {
    json cfg = read_json(config_path);
    check_keys(cfg, "config", {"data", "kernel", "target", "fit", "output"});
    const fs::path base = config_path.parent_path();
    Points data = load_data(require(cfg, "data", "config"), base);
    RadialKernel kernel = parse_kernel(require(cfg, "kernel", "config"), data);
    TargetDensity target = parse_target(require(cfg, "target", "config"), data);
    if (target.dim() != data.cols()) throw ConfigError("target dimension differs from the data");
    FitConfig fc = parse_fit(require(cfg, "fit", "config"), static_cast<int>(data.cols()));
    OutputSpec out = parse_output(cfg.value("output", json::object()));
    make_dir(out.dir);

    bool stalled = false;
    DensityEstimate est = run_fit(data, target, kernel, fc, stalled);
    write_json(out.dir / "model.json", model_to_json(est));
    write_density_csv(out.dir / "density.csv", est, probe_grid(est, data, out.grid_points));
    write_json(out.dir / "fit_report.json", fit_report_json(est, fc));
    if (stalled) {
      err << "optimizer stalled after " << est.report.iterations << " iterations\n";
      return static_cast<int>(kStalled);
    }
    return static_cast<int>(kOk);
  }, err);
}

inline int cmd_diagnose(const fs::path& model_path, const fs::path& data_path, const std::vector<double>& times,
                        int grid, const fs::path& outdir, std::ostream& err = std::cerr) {
  return guarded([&] {
    if (grid < 2) throw ConfigError("--grid must be at least 2");
    for (double t : times)
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("--times must lie in [0, 1]");
    Points data = read_csv_points(data_path);
    DensityEstimate est = model_from_json(read_json(model_path), data);
    make_dir(outdir);
    DiagnosticReport rep =
        el_diagnostic(est, data, times, probe_grid(est, data, grid), default_test_fields(data));
    write_diagnostics(outdir, "diagnostics", rep, est.dim());
    return static_cast<int>(kOk);
  }, err);
}

inline json semifit_report_json(const SemiFitReport& r) {
  json j;
  j["family"] = to_string(r.estimate.target.family());
  j["initial_theta"] = r.initial_theta;
  j["initial_objective"] = r.initial_objective;
  json its = json::array();
  std::vector<double> obj{r.initial_objective};
  for (const auto& it : r.iterates) {
    its.push_back({{"theta", it.theta},
                   {"objective_after_flow", it.objective_after_flow},
                   {"objective", it.objective},
                   {"theta_change", it.theta_change},
                   {"phi_change", it.phi_change},
                   {"max_abs_momentum", it.max_abs_momentum},
                   {"penalty", it.penalty},
                   {"inner_iterations", it.inner_iterations},
                   {"inner_status", it.inner_status}});
    obj.push_back(it.objective_after_flow);
    obj.push_back(it.objective);
  }
  j["iterates"] = its;
  j["objective_trace"] = obj;
  j["theta"] = r.estimate.target.params();
  j["converged"] = r.converged;
  j["status"] = r.status;
  j["rng"] = kRngName;
  return j;
}

inline json fold_json(const std::vector<FoldResult>& folds) {
  json a = json::array();
  double semi = 0.0, param = 0.0;
  Eigen::Index n = 0;
  for (const auto& f : folds) {
    a.push_back({{"fold", f.fold}, {"train_size", f.train_size}, {"test_size", f.test_size},
                 {"kernel_sigma", f.kernel_sigma}, {"semiparametric", f.semiparametric},
                 {"parametric", f.parametric}, {"density_integral", f.density_integral}, {"converged", f.converged},
                 {"outer_iterations", f.outer_iterations}});
    semi += f.semiparametric * static_cast<double>(f.test_size);
    param += f.parametric * static_cast<double>(f.test_size);
    n += f.test_size;
  }
  json j;
  j["folds"] = a;
  j["pooled_semiparametric"] = semi / static_cast<double>(n);
  j["pooled_parametric"] = param / static_cast<double>(n);
  j["semiparametric_better"] = semi > param;
  return j;
}

struct SemiSetup {
  Points data;
  json kernel;
  TargetFamily family = TargetFamily::gaussian;
  FitConfig fit;
  OuterConfig outer;
  OutputSpec output;
  int heldout_folds = 0;
};

inline SemiSetup parse_semifit(const json& cfg, const fs::path& base) {
  check_keys(cfg, "config", {"data", "kernel", "family", "fit", "outer", "output", "heldout_folds"});
  SemiSetup s;
  s.data = load_data(require(cfg, "data", "config"), base);
  s.kernel = require(cfg, "kernel", "config");
  parse_kernel(s.kernel, s.data);
  s.family = family_from(require(cfg, "family", "config"), "config.family");
  s.fit = parse_fit(require(cfg, "fit", "config"), static_cast<int>(s.data.cols()));
  s.outer = parse_outer(cfg.value("outer", json::object()));
  s.output = parse_output(cfg.value("output", json::object()));
  s.heldout_folds = static_cast<int>(integer_or(cfg, "heldout_folds", 0, "config"));
  if (s.heldout_folds == 1 || s.heldout_folds < 0) throw ConfigError("heldout_folds must be 0 or at least 2");
  return s;
}

/// Writes the semiparametric artifacts with `suffix` appended to each stem.
inline SemiFitReport run_semifit(const SemiSetup& s, const fs::path& dir, const std::string& suffix, json* folds_out) {
  RadialKernel kernel = parse_kernel(s.kernel, s.data);
  SemiFitReport rep = fit_semiparametric(s.data, s.family, kernel, s.fit, s.outer);
  json j = semifit_report_json(rep);
  if (s.heldout_folds >= 2) {
    double factor = s.kernel.contains("sigma_factor") ? s.kernel["sigma_factor"].get<double>()
                                                      : kernel.sigma() / data_scale(s.data);
    j["heldout"] = fold_json(heldout_comparison(s.data, s.family, factor, s.fit, s.outer, s.heldout_folds));
    if (folds_out) *folds_out = j["heldout"];
  }
  write_json(dir / ("semifit_report" + suffix + ".json"), j);
  write_json(dir / ("model" + suffix + ".json"), model_to_json(rep.estimate));
  Points x = probe_grid(rep.estimate, s.data, s.output.grid_points);
  write_density_csv(dir / ("density" + suffix + ".csv"), rep.estimate, x);
  write_target_csv(dir / ("target_density" + suffix + ".csv"), rep.estimate.target, x);
  return rep;
}

inline int cmd_semifit(const fs::path& config_path, std::ostream& err = std::cerr) {
  return guarded([&] {
    SemiSetup s = parse_semifit(read_json(config_path), config_path.parent_path());
    make_dir(s.output.dir);
    SemiFitReport rep = run_semifit(s, s.output.dir, "", nullptr);
    if (rep.status == "inner_stalled") {
      err << "inner optimizer stalled\n";
      return static_cast<int>(kStalled);
    }
    if (rep.status == "degenerate_target") {
      err << "target refit degenerated\n";
      return static_cast<int>(kData);
    }
    return static_cast<int>(kOk);
  }, err);
}

inline int cmd_sample(const fs::path& model_path, long long m, std::uint64_t seed, const fs::path& outdir,
                      std::ostream& err = std::cerr) {
  return guarded([&] {
    if (m < 0) throw ConfigError("--m must be nonnegative");
    DensityEstimate est = model_from_json(read_json(model_path));
    make_dir(outdir);
    SampleResult s = sample_estimate(est, static_cast<Eigen::Index>(m), seed);
    auto header = coord_names("x", est.dim());
    header.push_back("extrapolated");
    CsvWriter w(header);
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
      std::vector<double> r(s.points.row(i).data(), s.points.row(i).data() + s.points.cols());
      r.push_back(s.extrapolated[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
      w.row(r);
    }
    w.save(outdir / "samples.csv");
    return static_cast<int>(kOk);
  }, err);
}

// --- figure reproduction -------------------------------------------------------------

/// Reproduction configs for fig2/fig3: shared data/kernel/target/fit plus a
/// list of variants, each a JSON merge patch on "fit".
struct FigureSetup {
  std::string figure;
  Points data;
  RadialKernel kernel = RadialKernel::gaussian(1.0);
  TargetDensity target = TargetDensity::gaussian(0.0, 1.0);
  std::vector<std::pair<std::string, FitConfig>> variants;
  std::vector<double> times{0.0};
  OutputSpec output;
};

inline FigureSetup parse_figure(const json& cfg, const fs::path& base) {
  check_keys(cfg, "config", {"figure", "data", "kernel", "target", "fit", "variants", "diagnostics", "output"});
  FigureSetup f;
  f.figure = as_string(require(cfg, "figure", "config"), "config.figure");
  f.data = load_data(require(cfg, "data", "config"), base);
  f.kernel = parse_kernel(require(cfg, "kernel", "config"), f.data);
  f.target = parse_target(require(cfg, "target", "config"), f.data);
  const json& fit = require(cfg, "fit", "config");
  const json& vars = require(cfg, "variants", "config");
  if (!vars.is_array() || vars.empty()) throw ConfigError("config.variants: expected a non-empty array");
  for (const auto& v : vars) {
    check_keys(v, "variant", {"name", "fit"});
    json merged = fit;
    if (v.contains("fit")) merged.merge_patch(v["fit"]);
    f.variants.emplace_back(as_string(require(v, "name", "variant"), "variant.name"),
                            parse_fit(merged, static_cast<int>(f.data.cols())));
  }
  if (cfg.contains("diagnostics")) {
    check_keys(cfg["diagnostics"], "diagnostics", {"times"});
    if (cfg["diagnostics"].contains("times")) f.times = as_numbers(cfg["diagnostics"]["times"], "diagnostics.times");
  }
  f.output = parse_output(cfg.value("output", json::object()));
  return f;
}

struct VariantResult {
  std::string name;
  DensityEstimate estimate;
  bool stalled = false;
  double seconds = 0.0;
};

inline std::vector<VariantResult> run_figure(const FigureSetup& f) {
  std::vector<VariantResult> out;
  for (const auto& [name, cfg] : f.variants) {
    auto t0 = std::chrono::steady_clock::now();
    VariantResult r;
    r.name = name;
    r.estimate = run_fit(f.data, f.target, f.kernel, cfg, r.stalled);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

inline fs::path config_dir() {
  if (const char* env = std::getenv("FLOWDENSE_CONFIG_DIR"); env && *env) return env;
#ifdef FLOWDENSE_CONFIG_DIR
  return FLOWDENSE_CONFIG_DIR;
#else
  return "configs";
#endif
}

inline int cmd_reproduce(const std::string& figure, const fs::path& outdir, std::ostream& err = std::cerr) {
  return guarded([&] {
    if (figure != "fig2" && figure != "fig3" && figure != "fig4")
      throw ConfigError("unknown figure '" + figure + "' (expected fig2, fig3 or fig4)");
    const fs::path cfg_path = config_dir() / (figure + ".json");
    json cfg = read_json(cfg_path);
    make_dir(outdir);
    json summary;
    summary["figure"] = figure;
    summary["rng"] = kRngName;
    if (figure == "fig4") {
      json c = cfg;
      if (!c.contains("families")) throw ConfigError("fig4 config needs 'families'");
      std::vector<std::string> fams;
      for (const auto& v : c["families"]) fams.push_back(as_string(v, "families"));
      c.erase("families");
      c.erase("figure");
      c["family"] = fams.empty() ? "gaussian" : fams[0];
      for (const auto& fam : fams) {
        c["family"] = fam;
        SemiSetup s = parse_semifit(c, cfg_path.parent_path());
        if (fam == fams.front()) write_points_csv(outdir / "data.csv", s.data);
        json folds;
        SemiFitReport rep = run_semifit(s, outdir, "_" + fam, &folds);
        summary["runs"][fam] = {{"status", rep.status},
                                {"converged", rep.converged},
                                {"theta", rep.estimate.target.params()},
                                {"outer_iterations", rep.iterates.size()},
                                {"density_integral", density_integral(rep.estimate)},
                                {"heldout", folds}};
      }
      write_json(outdir / "summary.json", summary);
      return static_cast<int>(kOk);
    }

    FigureSetup f = parse_figure(cfg, cfg_path.parent_path());
    write_points_csv(outdir / "data.csv", f.data);
    auto runs = run_figure(f);
    bool stalled = false;
    for (const auto& r : runs) {
      const auto& est = r.estimate;
      write_json(outdir / ("model_" + r.name + ".json"), model_to_json(est));
      write_density_csv(outdir / ("density_" + r.name + ".csv"), est, probe_grid(est, f.data, f.output.grid_points));
      const auto& cfg_r = std::find_if(f.variants.begin(), f.variants.end(), [&](auto& v) { return v.first == r.name; })->second;
      write_json(outdir / ("fit_report_" + r.name + ".json"), fit_report_json(est, cfg_r));
      DiagnosticReport d = el_diagnostic(est, f.data, f.times, probe_grid(est, f.data, f.output.grid_points), {});
      write_diagnostics(outdir, "diagnostics_" + r.name, d, est.dim());
      KsResult ks = pushforward_gof(est, f.data);
      summary["runs"][r.name] = {{"knot_count", est.knots.size()},
                                 {"status", est.report.status},
                                 {"iterations", est.report.iterations},
                                 {"energy", est.report.energy},
                                 {"relative_residual", *est.report.el_relative_residual},
                                 {"pushforward_ks_p", ks.p_value},
                                 {"density_integral", density_integral(est)}};
      stalled = stalled || r.stalled;
      err << r.name << ": " << est.report.status << " after " << est.report.iterations << " iterations, "
          << r.seconds << " s\n";
    }
    auto rel = [&](const char* name) -> std::optional<double> {
      if (!summary["runs"].contains(name)) return std::nullopt;
      return summary["runs"][name]["relative_residual"].get<double>();
    };
    if (figure == "fig2" && rel("at_data") && rel("augmented_3n")) {
      summary["checks"] = {{"augmented_residual_at_most_0.05", *rel("augmented_3n") <= 0.05},
                           {"augmented_below_at_data", *rel("augmented_3n") < *rel("at_data")}};
    }
    if (figure == "fig3" && rel("at_data") && rel("subsample")) {
      const double ratio = *rel("subsample") / *rel("at_data");
      bool ks_ok = true;
      for (const auto& [k, v] : summary["runs"].items()) ks_ok = ks_ok && v["pushforward_ks_p"].get<double>() > 0.01;
      summary["residual_ratio"] = ratio;
      summary["checks"] = {{"ratio_within_factor_2", ratio >= 0.5 && ratio <= 2.0}, {"ks_p_above_0.01", ks_ok}};
    }
    write_json(outdir / "summary.json", summary);
    return static_cast<int>(stalled ? kStalled : kOk);
  }, err);
}

}  // namespace flowdense::cli
