#pragma once

// Euler-Lagrange richness diagnostic
//   D_t(x) = (1/n) sum_k [beta_{k,t} R(x, X_{k,t}) + grad_y R(x, y)|_{y = X_{k,t}}],
//   beta_{k,t} = Dphi_{t1}(X_{k,t})^T grad H(X_{k,1}) + grad log det Dphi_{t1}(X_{k,t}),
// its exact V-norm gap from lambda v_t, empirical Stein residuals, and a
// Kolmogorov-Smirnov check of the pushed-forward data.

#include <algorithm>
#include <numbers>

#include "flowdense/estimator.hpp"

namespace flowdense {

struct TimeCurve {
  double t = 0.0;
  Points x_grid;    // g x d
  Points lambda_v;  // g x d
  Points d_field;   // g x d
};

struct SteinResidual {
  std::string id;
  double t0 = 0.0;
  double t1 = 0.0;
  double field_norm = 0.0;  // ||u||_V
};

struct DiagnosticReport {
  std::vector<double> times;
  std::vector<double> residual_norm;
  std::vector<double> relative_residual;
  std::vector<double> lambda_v_norm;  // lambda ||v_t||_V
  std::vector<double> d_norm;         // ||D_t||_V
  std::vector<TimeCurve> curves;
  std::vector<SteinResidual> stein;
};

/// Everything needed at one diagnostic time: the knot state, the particles
/// X_{k,t}, and the beta coefficients.
struct TimeSlice {
  double t = 0.0;
  KnotSystem knots;
  Points positions;  // X_{k,t}
  Points beta;       // n x d
};

namespace detail {

// Knot paths over [0, t] and [t, 1]. Grid nodes reuse the fitted path; other
// times are integrated with proportionally many steps.
inline std::pair<std::optional<KnotPath>, std::optional<KnotPath>> split_path(const DensityEstimate& est, double t) {
  const TimeGrid& g = est.path.grid;
  const int steps = g.steps;
  const double pos = (t - g.begin) / (g.end - g.begin) * steps;
  const long node = std::lround(pos);
  std::optional<KnotPath> head, tail;
  if (std::abs(pos - static_cast<double>(node)) <= 1e-9 * steps) {
    auto s = static_cast<std::size_t>(node);
    if (s > 0) {
      KnotPath p;
      p.grid = TimeGrid(static_cast<int>(s), g.begin, g.node(static_cast<int>(s)));
      p.nodes.assign(est.path.nodes.begin(), est.path.nodes.begin() + static_cast<std::ptrdiff_t>(s) + 1);
      p.stages.assign(est.path.stages.begin(), est.path.stages.begin() + static_cast<std::ptrdiff_t>(s));
      head = std::move(p);
    }
    if (static_cast<int>(s) < steps) {
      KnotPath p;
      p.grid = TimeGrid(steps - static_cast<int>(s), g.node(static_cast<int>(s)), g.end);
      p.nodes.assign(est.path.nodes.begin() + static_cast<std::ptrdiff_t>(s), est.path.nodes.end());
      p.stages.assign(est.path.stages.begin() + static_cast<std::ptrdiff_t>(s), est.path.stages.end());
      tail = std::move(p);
    }
    return {std::move(head), std::move(tail)};
  }
  const int s_head = std::max(1, static_cast<int>(std::ceil(pos)));
  const int s_tail = std::max(1, static_cast<int>(std::ceil(steps - pos)));
  head = integrate_knots(est.kernel, est.knots, TimeGrid(s_head, g.begin, t));
  tail = integrate_knots(est.kernel, head->terminal(), TimeGrid(s_tail, t, g.end));
  return {std::move(head), std::move(tail)};
}

}  // namespace detail

inline TimeSlice time_slice(const DensityEstimate& est, const Points& data, double t) {
  const TimeGrid& g = est.path.grid;
  if (!(t >= g.begin && t <= g.end)) throw ArgumentError("diagnostic time outside [0, 1]");
  if (data.rows() < 1 || data.cols() != est.dim()) throw ArgumentError("diagnostic data dimension mismatch");
  const int d = est.dim();
  auto [head, tail] = detail::split_path(est, t);
  TimeSlice sl;
  sl.t = t;
  if (head) {
    sl.knots = head->terminal();
    sl.positions = transport(est.kernel, *head, data, {false, false, false, false, false}).terminal_positions();
  } else {
    sl.knots = est.knots;
    sl.positions = data;
  }
  const Eigen::Index n = data.rows();
  sl.beta.resize(n, d);
  if (!tail) {
    for (Eigen::Index k = 0; k < n; ++k) est.target.grad_log_density(sl.positions.row(k).data(), sl.beta.row(k).data());
    return sl;
  }
  ParticleFlow f = transport(est.kernel, *tail, sl.positions, {true, false, true, false, false});
  const Points& x1 = f.terminal_positions();
  const Points& jac = f.terminal_jacobians();
  std::vector<double> gh(static_cast<std::size_t>(d));
  for (Eigen::Index k = 0; k < n; ++k) {
    est.target.grad_log_density(x1.row(k).data(), gh.data());
    for (int c = 0; c < d; ++c) {
      double acc = f.logdet_grad(k, c);
      for (int a = 0; a < d; ++a) acc += jac(k, a * d + c) * gh[static_cast<std::size_t>(a)];
      sl.beta(k, c) = acc;
    }
  }
  return sl;
}

/// D_t as a section field: value sections carrying beta/n, gradient sections e_c/n.
inline SectionField diagnostic_field(const TimeSlice& sl) {
  const Eigen::Index n = sl.positions.rows(), d = sl.positions.cols();
  SectionField f;
  f.sections.reserve(static_cast<std::size_t>(n * (d + 1)));
  f.coeffs = Points::Zero(n * (d + 1), d);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    f.sections.push_back(Section::value_at(sl.positions.row(k).transpose()));
    f.coeffs.row(k) = inv_n * sl.beta.row(k);
  }
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index c = 0; c < d; ++c) {
      f.sections.push_back(Section::gradient_at(sl.positions.row(k).transpose(), static_cast<int>(c)));
      f.coeffs(n + k * d + c, c) = inv_n;
    }
  return f;
}

inline SectionField scaled_velocity_field(const KnotSystem& ks, double scale) {
  SectionField f = as_section_field(ks);
  f.coeffs *= scale;
  return f;
}

/// lambda v_t - D_t over the union of both section sets.
inline SectionField residual_field(const TimeSlice& sl, double lambda) {
  SectionField v = scaled_velocity_field(sl.knots, lambda);
  SectionField dfield = diagnostic_field(sl);
  SectionField r;
  r.sections = v.sections;
  r.sections.insert(r.sections.end(), dfield.sections.begin(), dfield.sections.end());
  r.coeffs.resize(v.coeffs.rows() + dfield.coeffs.rows(), sl.positions.cols());
  r.coeffs.topRows(v.coeffs.rows()) = v.coeffs;
  r.coeffs.bottomRows(dfield.coeffs.rows()) = -dfield.coeffs;
  return r;
}

struct ResidualSummary {
  double residual_norm = 0.0;
  double relative = 0.0;
  double lambda_v_norm = 0.0;
  double d_norm = 0.0;
};

inline ResidualSummary residual_summary(const RadialKernel& kernel, const TimeSlice& sl, double lambda) {
  ResidualSummary s;
  s.lambda_v_norm = lambda * std::sqrt(rkhs_norm_sq(kernel, sl.knots));
  s.d_norm = std::sqrt(field_norm_sq(kernel, diagnostic_field(sl)));
  s.residual_norm = std::sqrt(field_norm_sq(kernel, residual_field(sl, lambda)));
  const double denom = s.lambda_v_norm + s.d_norm;
  s.relative = denom > 0.0 ? s.residual_norm / denom : 0.0;
  return s;
}

/// ||lambda v_0 - D_0||_V / (lambda ||v_0||_V + ||D_0||_V).
inline double el_relative_residual(const DensityEstimate& est, const Points& data, double t = 0.0) {
  return residual_summary(est.kernel, time_slice(est, data, t), est.lambda).relative;
}

/// Default probe grid: the data range padded by three kernel widths.
inline Points default_probe_grid(const Points& data, double sigma, int count) {
  if (data.cols() != 1) throw UnsupportedDimensionError("default probe grid is only defined for d = 1");
  if (count < 2) throw ArgumentError("probe grid needs at least two nodes");
  double lo = data.col(0).minCoeff() - 3.0 * sigma, hi = data.col(0).maxCoeff() + 3.0 * sigma;
  Points g(count, 1);
  for (int i = 0; i < count; ++i) g(i, 0) = lo + (hi - lo) * i / (count - 1);
  return g;
}

// --- Stein residuals ------------------------------------------------------

struct TestField {
  std::string id;
  SectionField field;
};

/// Value sections R(., c) e_i at 10 quantile-spaced centres plus the
/// matching gradient sections d/dy_j R(., c) e_i.
inline std::vector<TestField> default_test_fields(const Points& data, int centres = 10) {
  const Eigen::Index n = data.rows(), d = data.cols();
  if (n < 1) throw ArgumentError("test dictionary needs data");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return data(a, 0) < data(b, 0); });
  std::vector<TestField> out;
  for (int q = 0; q < centres; ++q) {
    double pos = (q + 0.5) / centres * static_cast<double>(n - 1);
    Vector c(d);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    std::size_t hi = std::min(lo + 1, static_cast<std::size_t>(n - 1));
    double f = pos - static_cast<double>(lo);
    c = (1.0 - f) * data.row(order[lo]).transpose() + f * data.row(order[hi]).transpose();
    for (Eigen::Index i = 0; i < d; ++i) {
      TestField tv;
      tv.id = "value_c" + std::to_string(q) + "_e" + std::to_string(i);
      tv.field.sections = {Section::value_at(c)};
      tv.field.coeffs = Points::Zero(1, d);
      tv.field.coeffs(0, i) = 1.0;
      out.push_back(std::move(tv));
      for (Eigen::Index j = 0; j < d; ++j) {
        TestField tg;
        tg.id = "grad" + std::to_string(j) + "_c" + std::to_string(q) + "_e" + std::to_string(i);
        tg.field.sections = {Section::gradient_at(c, static_cast<int>(j))};
        tg.field.coeffs = Points::Zero(1, d);
        tg.field.coeffs(0, i) = 1.0;
        out.push_back(std::move(tg));
      }
    }
  }
  return out;
}

struct SteinValue {
  double residual = 0.0;
  double sample_sd = 0.0;  // sd of the per-datum term score . u + div u
};

namespace detail {

// lambda <v, u>_V - (1/n) sum_k [score_k . u(Y_k) + div u(Y_k)]
inline SteinValue stein_value(const RadialKernel& kernel, const KnotSystem& ks, double lambda, const Points& y,
                              const Points& score, const SectionField& u) {
  const Eigen::Index n = y.rows();
  std::vector<double> terms(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) {
    Vector yk = y.row(k).transpose();
    terms[static_cast<std::size_t>(k)] = score.row(k).dot(u.eval(kernel, yk).transpose()) + u.divergence(kernel, yk);
  }
  double mean = std::accumulate(terms.begin(), terms.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double t : terms) var += (t - mean) * (t - mean);
  var /= std::max<Eigen::Index>(1, n - 1);
  double vu = field_inner(kernel, as_section_field(ks), u);
  return {lambda * vu - mean, std::sqrt(var)};
}

}  // namespace detail

inline std::vector<SteinValue> stein_residual_t0(const DensityEstimate& est, const Points& data,
                                                 const std::vector<TestField>& fields) {
  TimeSlice sl = time_slice(est, data, 0.0);
  std::vector<SteinValue> out;
  out.reserve(fields.size());
  for (const auto& f : fields) out.push_back(detail::stein_value(est.kernel, sl.knots, est.lambda, data, sl.beta, f.field));
  return out;
}

inline std::vector<SteinValue> stein_residual_t1(const DensityEstimate& est, const Points& data,
                                                 const std::vector<TestField>& fields) {
  ParticleFlow pf = transport(est.kernel, est.path, data, {false, false, false, false, false});
  const Points& y = pf.terminal_positions();
  Points score(y.rows(), y.cols());
  for (Eigen::Index k = 0; k < y.rows(); ++k) est.target.grad_log_density(y.row(k).data(), score.row(k).data());
  std::vector<SteinValue> out;
  out.reserve(fields.size());
  for (const auto& f : fields)
    out.push_back(detail::stein_value(est.kernel, est.path.terminal(), est.lambda, y, score, f.field));
  return out;
}

// --- diagnostic report ------------------------------------------------------

inline DiagnosticReport el_diagnostic(const DensityEstimate& est, const Points& data, const std::vector<double>& times,
                                      const Points& x_grid, const std::vector<TestField>& fields) {
  if (x_grid.rows() > 0 && x_grid.cols() != est.dim()) throw ArgumentError("probe grid dimension mismatch");
  DiagnosticReport rep;
  rep.times = times;
  const int d = est.dim();
  for (double t : times) {
    TimeSlice sl = time_slice(est, data, t);
    ResidualSummary s = residual_summary(est.kernel, sl, est.lambda);
    rep.residual_norm.push_back(s.residual_norm);
    rep.relative_residual.push_back(s.relative);
    rep.lambda_v_norm.push_back(s.lambda_v_norm);
    rep.d_norm.push_back(s.d_norm);
    TimeCurve c;
    c.t = t;
    c.x_grid = x_grid;
    c.lambda_v = Points::Zero(x_grid.rows(), d);
    c.d_field = Points::Zero(x_grid.rows(), d);
    SectionField v = scaled_velocity_field(sl.knots, est.lambda);
    SectionField df = diagnostic_field(sl);
    parallel_chunks(static_cast<std::size_t>(x_grid.rows()), [&](std::size_t b, std::size_t e, std::size_t) {
      for (auto i = static_cast<Eigen::Index>(b); i < static_cast<Eigen::Index>(e); ++i) {
        Vector x = x_grid.row(i).transpose();
        c.lambda_v.row(i) = v.eval(est.kernel, x).transpose();
        c.d_field.row(i) = df.eval(est.kernel, x).transpose();
      }
    });
    rep.curves.push_back(std::move(c));
  }
  if (!fields.empty()) {
    auto r0 = stein_residual_t0(est, data, fields);
    auto r1 = stein_residual_t1(est, data, fields);
    for (std::size_t i = 0; i < fields.size(); ++i)
      rep.stein.push_back({fields[i].id, r0[i].residual, r1[i].residual,
                           std::sqrt(field_norm_sq(est.kernel, fields[i].field))});
  }
  return rep;
}

// --- Kolmogorov-Smirnov -------------------------------------------------------

/// Asymptotic Kolmogorov survival function P(K > x).
inline double kolmogorov_survival(double x) {
  if (x <= 0.0) return 1.0;
  if (x < 1.18) {
    // theta-function form, fast for small x
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double s = 0.0;
    for (int j = 1; j <= 15; j += 2) s += std::exp(-j * j * pi2 / (8.0 * x * x));
    return std::clamp(1.0 - std::sqrt(2.0 * std::numbers::pi) / x * s, 0.0, 1.0);
  }
  double s = 0.0;
  for (int j = 1; j <= 100; ++j) {
    double term = std::exp(-2.0 * j * j * x * x);
    s += (j % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-300) break;
  }
  return std::clamp(s, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// One-sample KS test against a continuous CDF; p-value from the asymptotic
/// distribution with Stephens' finite-n correction.
template <class Cdf>
KsResult ks_test(std::vector<double> x, Cdf&& cdf) {
  if (x.empty()) throw ArgumentError("KS test needs at least one point");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double dstat = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double f = cdf(x[i]);
    dstat = std::max({dstat, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  const double rn = std::sqrt(n);
  KsResult r;
  r.statistic = dstat;
  r.p_value = kolmogorov_survival((rn + 0.12 + 0.11 / rn) * dstat);
  if (r.p_value <= 0.0) r.p_value = std::numeric_limits<double>::min();
  return r;
}

/// KS statistic of phi_1(X_k) against the target CDF.
inline KsResult pushforward_gof(const DensityEstimate& est, const Points& data) {
  if (est.dim() != 1) throw UnsupportedDimensionError("pushforward goodness of fit requires d = 1");
  ParticleFlow pf = transport(est.kernel, est.path, data, {false, false, false, false, false});
  const Points& y = pf.terminal_positions();
  std::vector<double> v(y.data(), y.data() + y.rows());
  return ks_test(std::move(v), [&](double z) { return est.target.cdf(z); });
}

}  // namespace flowdense
