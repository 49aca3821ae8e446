#pragma once

// Penalized maximum likelihood over the knot/momentum subclass:
//   E(eta) = (1/n) sum_k [log det Dphi_1(X_k) + H(phi_1(X_k))] - (lambda/2) ||v_0||_V^2
// with the gradient obtained by reverse-mode differentiation of the RK4
// flow, and a Gram-preconditioned quasi-Newton ascent with Armijo backtracking.

#include <deque>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "flowdense/common.hpp"
#include "flowdense/flow.hpp"
#include "flowdense/kernel.hpp"
#include "flowdense/knots.hpp"
#include "flowdense/target.hpp"

namespace flowdense {

enum class KnotStrategy { at_data, augmented_3n, subsample, explicit_list };

inline KnotStrategy parse_knot_strategy(std::string_view name) {
  if (name == "at_data") return KnotStrategy::at_data;
  if (name == "augmented_3n") return KnotStrategy::augmented_3n;
  if (name == "subsample") return KnotStrategy::subsample;
  if (name == "explicit") return KnotStrategy::explicit_list;
  throw ArgumentError("unknown knot strategy '" + std::string(name) + "'");
}

inline std::string to_string(KnotStrategy s) {
  switch (s) {
    case KnotStrategy::at_data:
      return "at_data";
    case KnotStrategy::augmented_3n:
      return "augmented_3n";
    case KnotStrategy::subsample:
      return "subsample";
    case KnotStrategy::explicit_list:
      return "explicit";
  }
  return "unknown";
}

enum class OptimizerMethod { gradient, lbfgs };

inline OptimizerMethod parse_optimizer_method(std::string_view name) {
  if (name == "gradient") return OptimizerMethod::gradient;
  if (name == "lbfgs") return OptimizerMethod::lbfgs;
  throw ArgumentError("unknown optimizer method '" + std::string(name) + "'");
}

inline std::string to_string(OptimizerMethod m) { return m == OptimizerMethod::gradient ? "gradient" : "lbfgs"; }

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::lbfgs;
  int max_iters = 2000;
  double gradient_tol = 1e-6;  // on ||grad||_inf / (1 + |E|)
  double armijo_c = 1e-4;
  int max_halvings = 50;
  int memory = 10;
  bool curvature_preconditioner = true;
  double eigen_cutoff = 1e-10;  // relative, drops near-null preconditioner directions
};

struct FitConfig {
  double lambda = 1.0;
  TimeGrid grid{};
  KnotStrategy knot_strategy = KnotStrategy::at_data;
  int subsample_size = 0;
  Points explicit_knots;
  double delta = 1e-4;
  OptimizerConfig optimizer{};
  bool optimize_knot_positions = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ArgumentError("lambda must be positive");
    if (!(delta > 0.0)) throw ArgumentError("augmentation offset delta must be positive");
    grid.validate();
    if (!(optimizer.gradient_tol > 0.0)) throw ArgumentError("gradient tolerance must be positive");
    if (!(optimizer.armijo_c > 0.0 && optimizer.armijo_c < 1.0)) throw ArgumentError("armijo constant must lie in (0, 1)");
    if (optimizer.max_iters < 0) throw ArgumentError("max_iters must be nonnegative");
    if (optimizer.max_halvings < 1) throw ArgumentError("max_halvings must be at least 1");
    if (optimizer.memory < 1) throw ArgumentError("optimizer memory must be at least 1");
    if (!(optimizer.eigen_cutoff >= 0.0 && optimizer.eigen_cutoff < 1.0))
      throw ArgumentError("eigen_cutoff must lie in [0, 1)");
  }
};

// --- knot placement -------------------------------------------------------

/// Knot locations for a strategy; all momenta start at zero.
inline KnotSystem make_knots(const Points& data, const FitConfig& config) {
  if (data.rows() == 0) throw ArgumentError("make_knots: data are empty");
  const Eigen::Index n = data.rows(), d = data.cols();
  switch (config.knot_strategy) {
    case KnotStrategy::at_data:
      return KnotSystem::at_rest(data);
    case KnotStrategy::augmented_3n: {
      // data block, then X + delta/2 e_c and X - delta/2 e_c per coordinate
      Points k(n * (2 * d + 1), d);
      k.topRows(n) = data;
      for (Eigen::Index c = 0; c < d; ++c) {
        Points plus = data, minus = data;
        plus.col(c).array() += 0.5 * config.delta;
        minus.col(c).array() -= 0.5 * config.delta;
        k.middleRows(n * (1 + 2 * c), n) = plus;
        k.middleRows(n * (2 + 2 * c), n) = minus;
      }
      return KnotSystem::at_rest(std::move(k));
    }
    case KnotStrategy::subsample: {
      const Eigen::Index m = config.subsample_size;
      if (m < 1 || m > n) throw ArgumentError("subsample size must lie in [1, n]");
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), Eigen::Index{0});
      std::mt19937_64 rng(config.seed);
      for (Eigen::Index i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<Eigen::Index> pick(0, i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
      }
      Points k(m, d);
      for (Eigen::Index i = 0; i < m; ++i) k.row(i) = data.row(idx[static_cast<std::size_t>(i)]);
      return KnotSystem::at_rest(std::move(k));
    }
    case KnotStrategy::explicit_list:
      if (config.explicit_knots.rows() == 0) throw ArgumentError("explicit knot list is empty");
      if (config.explicit_knots.cols() != d) throw ArgumentError("explicit knots have the wrong dimension");
      return KnotSystem::at_rest(config.explicit_knots);
  }
  throw ArgumentError("unknown knot strategy");
}

// --- energy -----------------------------------------------------------------

namespace detail {

inline void check_problem(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                          const TargetDensity& target) {
  if (data.rows() < 1) throw ArgumentError("at least one data point is required");
  if (data.cols() != kernel.dim() || target.dim() != kernel.dim())
    throw ArgumentError("data, kernel and target dimensions disagree");
  if (knots.size() > 0 && knots.dim() != kernel.dim()) throw ArgumentError("knot dimension mismatch");
  if (!all_finite(data)) throw ArgumentError("data contain non-finite values");
  knots.validate();
}

}  // namespace detail

struct EnergyTerms {
  double likelihood = 0.0;  // (1/n) sum [logdet + H(phi_1)]
  double penalty = 0.0;     // ||v_0||_V^2
  double energy = 0.0;
};

inline EnergyTerms energy_terms(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                                const TargetDensity& target, double lambda, const TimeGrid& grid) {
  detail::check_problem(kernel, knots, data, target);
  KnotPath path = integrate_knots(kernel, knots, grid);
  ParticleFlow flow = transport(kernel, path, data, {false, true, false, false, false});
  const Points& x1 = flow.terminal_positions();
  const Vector& l1 = flow.terminal_logdets();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < data.rows(); ++k) acc += l1(k) + target.log_density(x1.row(k).data());
  EnergyTerms t;
  t.likelihood = acc / static_cast<double>(data.rows());
  t.penalty = rkhs_norm_sq(kernel, knots);
  t.energy = t.likelihood - 0.5 * lambda * t.penalty;
  return t;
}

inline double energy(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                     const TargetDensity& target, const FitConfig& config) {
  return energy_terms(kernel, knots, data, target, config.lambda, config.grid).energy;
}

struct EnergyGradient {
  double energy = 0.0;
  double likelihood = 0.0;
  double penalty = 0.0;
  Points d_momenta;
  Points d_knots;  // filled when requested
};

namespace detail {

// Forward half of energy_grad; keeps what the pullback needs so that
// rejected line-search trials skip the reverse sweep.
struct ForwardPass {
  KnotPath path;
  ParticleFlow flow;
  Points cot_x;
  EnergyGradient value;
};

inline ForwardPass energy_forward(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                                  const TargetDensity& target, double lambda, const TimeGrid& grid) {
  check_problem(kernel, knots, data, target);
  const Eigen::Index n = data.rows();
  ForwardPass fp{integrate_knots(kernel, knots, grid), {}, Points(n, kernel.dim()), {}};
  fp.flow = transport(kernel, fp.path, data, {false, true, false, false, true});
  const Points& x1 = fp.flow.terminal_positions();
  const Vector& l1 = fp.flow.terminal_logdets();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    acc += l1(k) + target.log_density(x1.row(k).data());
    target.grad_log_density(x1.row(k).data(), fp.cot_x.row(k).data());
  }
  fp.cot_x /= static_cast<double>(n);
  fp.value.likelihood = acc / static_cast<double>(n);
  fp.value.penalty = rkhs_norm_sq(kernel, knots);
  fp.value.energy = fp.value.likelihood - 0.5 * lambda * fp.value.penalty;
  return fp;
}

inline EnergyGradient energy_backward(const RadialKernel& kernel, const KnotSystem& knots, ForwardPass& fp,
                                      double lambda, bool with_knots) {
  const Eigen::Index n = fp.cot_x.rows(), nk = knots.size();
  Vector cot_l = Vector::Constant(n, 1.0 / static_cast<double>(n));
  KnotGradient g = pullback(kernel, fp.path, fp.flow, fp.cot_x, cot_l);
  EnergyGradient out = fp.value;
  // penalty: -(lambda/2) sum_ij (eta_i . eta_j) g(kappa_i - kappa_j)
  Matrix gk = gram(kernel, knots.knots);
  out.d_momenta = g.d_momenta - lambda * (gk * knots.momenta);
  if (with_knots) {
    out.d_knots = g.d_knots;
    for (Eigen::Index i = 0; i < nk; ++i)
      for (Eigen::Index j = 0; j < nk; ++j) {
        if (i == j) continue;
        double w = knots.momenta.row(i).dot(knots.momenta.row(j));
        Vector r = knots.knots.row(i) - knots.knots.row(j);
        double d1 = kernel.profile(r.squaredNorm()).d1;
        out.d_knots.row(i) -= lambda * w * 2.0 * d1 * r.transpose();
      }
  }
  return out;
}

}  // namespace detail

inline EnergyGradient energy_grad(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                                  const TargetDensity& target, double lambda, const TimeGrid& grid,
                                  bool with_knots = false) {
  detail::ForwardPass fp = detail::energy_forward(kernel, knots, data, target, lambda, grid);
  return detail::energy_backward(kernel, knots, fp, lambda, with_knots);
}

inline EnergyGradient energy_grad(const RadialKernel& kernel, const KnotSystem& knots, const Points& data,
                                  const TargetDensity& target, const FitConfig& config) {
  return energy_grad(kernel, knots, data, target, config.lambda, config.grid, config.optimize_knot_positions);
}

// --- estimate ---------------------------------------------------------------

struct FitReport {
  double energy = 0.0;
  double likelihood = 0.0;
  double penalty = 0.0;
  double gradient_norm = 0.0;  // ||grad||_inf
  int iterations = 0;
  bool converged = false;
  std::string status = "not_run";
  std::vector<double> energy_trace;
  std::vector<double> gradient_trace;
  std::vector<double> step_trace;
  std::optional<double> el_relative_residual;
};

struct DensityEstimate {
  RadialKernel kernel = RadialKernel::gaussian(1.0);
  KnotSystem knots;
  TargetDensity target = TargetDensity::gaussian(0.0, 1.0);
  TimeGrid grid;
  double lambda = 1.0;
  KnotPath path;
  Points data;
  Points terminal_positions;
  Points terminal_jacobians;
  Vector terminal_logdets;
  FitReport report;

  int dim() const { return kernel.dim(); }
};

/// Assembles an estimate for a given knot state and caches the terminal
/// flow over `data`.
inline DensityEstimate make_estimate(const RadialKernel& kernel, const KnotSystem& knots, const TargetDensity& target,
                                     const TimeGrid& grid, double lambda, const Points& data) {
  DensityEstimate est{kernel, knots, target, grid, lambda, integrate_knots(kernel, knots, grid), data, {}, {}, {}, {}};
  if (data.rows() > 0) {
    ParticleFlow f = transport(kernel, est.path, data, {true, true, false, false, false});
    est.terminal_positions = f.terminal_positions();
    est.terminal_jacobians = f.terminal_jacobians();
    est.terminal_logdets = f.terminal_logdets();
    double acc = 0.0;
    for (Eigen::Index k = 0; k < data.rows(); ++k)
      acc += est.terminal_logdets(k) + target.log_density(est.terminal_positions.row(k).data());
    est.report.likelihood = acc / static_cast<double>(data.rows());
  }
  est.report.penalty = rkhs_norm_sq(kernel, knots);
  est.report.energy = est.report.likelihood - 0.5 * lambda * est.report.penalty;
  return est;
}

/// log f_hat = H(phi_1(x)) + log det Dphi_1(x) for each row of x.
inline Vector log_density_estimate(const DensityEstimate& est, const Points& x) {
  if (x.rows() > 0 && x.cols() != est.dim()) throw ArgumentError("probe dimension mismatch");
  ParticleFlow f = transport(est.kernel, est.path, x, {false, true, false, false, false});
  Vector out(x.rows());
  for (Eigen::Index k = 0; k < x.rows(); ++k)
    out(k) = f.terminal_logdets()(k) + est.target.log_density(f.terminal_positions().row(k).data());
  return out;
}

inline double log_density_estimate(const DensityEstimate& est, const Vector& x) {
  Points p(1, x.size());
  p.row(0) = x.transpose();
  return log_density_estimate(est, p)(0);
}

inline Vector density_estimate(const DensityEstimate& est, const Points& x) {
  return log_density_estimate(est, x).unaryExpr([](double v) { return std::exp(v); });
}

inline double density_estimate(const DensityEstimate& est, const Vector& x) {
  return std::exp(log_density_estimate(est, x));
}

/// Interval carrying all but a negligible amount of the estimate's mass in
/// d = 1: the target's effective support and the data range widened by five
/// kernel widths, both padded by the largest data displacement.
inline std::pair<double, double> mass_interval(const DensityEstimate& est) {
  if (est.dim() != 1) throw UnsupportedDimensionError("mass_interval is only defined for d = 1");
  const auto& p = est.target.params();
  double lo = 0.0, hi = 0.0;
  switch (est.target.family()) {
    case TargetFamily::uniform_tapered:
      lo = p[0] - 2.0 * p[2];
      hi = p[1] + 2.0 * p[2];
      break;
    case TargetFamily::gaussian:
      lo = p[0] - 10.0 * p[1];
      hi = p[0] + 10.0 * p[1];
      break;
    case TargetFamily::gaussian_mixture2:
      lo = std::min(p[1] - 10.0 * p[2], p[3] - 10.0 * p[4]);
      hi = std::max(p[1] + 10.0 * p[2], p[3] + 10.0 * p[4]);
      break;
  }
  double shift = 0.0;
  if (est.data.rows() > 0) {
    const double s = 5.0 * est.kernel.sigma();
    lo = std::min(lo, est.data.col(0).minCoeff() - s);
    hi = std::max(hi, est.data.col(0).maxCoeff() + s);
    shift = (est.terminal_positions - est.data).cwiseAbs().maxCoeff();
  }
  return {lo - shift, hi + shift};
}

/// Trapezoid rule for the integral of f_hat over mass_interval (d = 1).
inline double density_integral(const DensityEstimate& est, int nodes = 2048) {
  if (nodes < 2) throw ArgumentError("density_integral needs at least two nodes");
  auto [lo, hi] = mass_interval(est);
  Points x(nodes, 1);
  for (int i = 0; i < nodes; ++i) x(i, 0) = lo + (hi - lo) * i / (nodes - 1);
  Vector f = density_estimate(est, x);
  const double h = (hi - lo) / (nodes - 1);
  return h * (f.sum() - 0.5 * (f(0) + f(nodes - 1)));
}

struct SampleResult {
  Points points;
  std::vector<bool> extrapolated;
};

/// Draws Y from the target and maps them back through phi_1^{-1}.
inline SampleResult sample_estimate(const DensityEstimate& est, Eigen::Index m, std::uint64_t seed) {
  if (m < 0) throw ArgumentError("sample count must be nonnegative");
  Points y = est.target.sample(m, seed);
  if (m == 0) return {Points(0, est.dim()), {}};
  InverseResult inv = inverse_map(est.kernel, est.path, y);
  return {inv.points, inv.extrapolated};
}

// --- optimizer --------------------------------------------------------------

class OptimizerStalled : public std::runtime_error {
 public:
  OptimizerStalled(const std::string& what, DensityEstimate best)
      : std::runtime_error(what), best_(std::move(best)) {}
  const DensityEstimate& best() const { return best_; }

 private:
  DensityEstimate best_;
};

namespace detail {

// Applies (A + ridge I)^{-1}, A the curvature model, columnwise to the
// momentum block, with eigenvalues of A below rel_cutoff * max dropped. The
// knot block (if any) is scaled by 1/lambda.
struct Preconditioner {
  Matrix basis;
  Vector inv_eig;
  double lambda = 1.0;
  Eigen::Index nk = 0;
  int d = 1;

  void compute(const Matrix& a, double rel_cutoff, double ridge) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a);
    const Vector& ev = es.eigenvalues();
    const double cut = rel_cutoff * std::max(0.0, ev.maxCoeff());
    Eigen::Index keep = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) keep += ev(i) + ridge > 0.0 && ev(i) >= cut;
    basis = es.eigenvectors().rightCols(keep);
    inv_eig = (ev.tail(keep).array() + ridge).cwiseInverse().matrix();
  }

  Vector apply(const Vector& v) const {
    Vector out(v.size());
    const Eigen::Index block = nk * d;
    Eigen::Map<const Points> vm(v.data(), nk, d);
    Matrix coef = inv_eig.asDiagonal() * (basis.transpose() * vm);
    Eigen::Map<Points>(out.data(), nk, d) = basis * coef;
    if (v.size() > block) out.tail(v.size() - block) = v.tail(v.size() - block) / lambda;
    return out;
  }
};

// Second-order model of -E around the identity flow, columnwise in eta:
//   lambda G + (1/n) sum_k [sum_b g_k^b g_k^bT + h_k r_k r_k^T]
// with g_k^b = d/dx_b R(X_k, kappa_.), r_k = R(X_k, kappa_.) and h_k the
// clipped mean curvature of -H at X_k.
inline Matrix curvature_model(const RadialKernel& kernel, const KnotSystem& ks, const Points& data,
                              const TargetDensity& target, double lambda) {
  const Eigen::Index nk = ks.size(), n = data.rows();
  const int d = kernel.dim();
  Matrix a = lambda * symmetrized(gram(kernel, ks.knots));
  const double h = 1e-5 * data_scale(data);
  Matrix grads(nk, d);
  Vector vals(nk);
  std::vector<double> gp(static_cast<std::size_t>(d)), gm(static_cast<std::size_t>(d));
  for (Eigen::Index k = 0; k < n; ++k) {
    Vector x = data.row(k).transpose();
    for (Eigen::Index j = 0; j < nk; ++j) {
      Vector kj = ks.knots.row(j).transpose();
      vals(j) = kernel.eval(x, kj);
      grads.row(j) = kernel.grad_x(x, kj).transpose();
    }
    double curv = 0.0;
    for (int c = 0; c < d; ++c) {
      Vector xp = x, xm = x;
      xp(c) += h;
      xm(c) -= h;
      target.grad_log_density(xp.data(), gp.data());
      target.grad_log_density(xm.data(), gm.data());
      curv -= (gp[static_cast<std::size_t>(c)] - gm[static_cast<std::size_t>(c)]) / (2.0 * h);
    }
    curv = std::max(0.0, curv / d);
    const double w = 1.0 / static_cast<double>(n);
    a.noalias() += w * grads * grads.transpose();
    if (curv > 0.0) a.noalias() += (w * curv) * vals * vals.transpose();
  }
  return symmetrized(a);
}

inline Vector pack(const KnotSystem& ks, bool with_knots) {
  const Eigen::Index m = ks.momenta.size();
  Vector p(with_knots ? 2 * m : m);
  p.head(m) = Eigen::Map<const Vector>(ks.momenta.data(), m);
  if (with_knots) p.tail(m) = Eigen::Map<const Vector>(ks.knots.data(), m);
  return p;
}

inline KnotSystem unpack(const Vector& p, const KnotSystem& like, bool with_knots) {
  KnotSystem ks = like;
  const Eigen::Index m = ks.momenta.size();
  ks.momenta = Eigen::Map<const Points>(p.data(), ks.size(), ks.dim());
  if (with_knots) ks.knots = Eigen::Map<const Points>(p.data() + m, ks.size(), ks.dim());
  return ks;
}

inline Vector pack_grad(const EnergyGradient& g, bool with_knots) {
  const Eigen::Index m = g.d_momenta.size();
  Vector p(with_knots ? 2 * m : m);
  p.head(m) = Eigen::Map<const Vector>(g.d_momenta.data(), m);
  if (with_knots) p.tail(m) = Eigen::Map<const Vector>(g.d_knots.data(), m);
  return p;
}

}  // namespace detail

inline constexpr double kPrecisionFloor = 1e-9;

/// Penalized MLE over the momenta (and optionally knot positions). Ascent on
/// E with Armijo backtracking; the search direction is the Gram-preconditioned
/// gradient, refined by L-BFGS curvature pairs unless method = gradient.
inline DensityEstimate fit_pmle(const Points& data, const TargetDensity& target, const RadialKernel& kernel,
                                const FitConfig& config, const std::optional<KnotSystem>& warm = std::nullopt) {
  config.validate();
  KnotSystem ks = warm ? *warm : make_knots(data, config);
  detail::check_problem(kernel, ks, data, target);
  const bool with_knots = config.optimize_knot_positions;
  const OptimizerConfig& oc = config.optimizer;

  detail::Preconditioner pre;
  pre.lambda = config.lambda;
  pre.nk = ks.size();
  pre.d = kernel.dim();
  {
    Matrix a = oc.curvature_preconditioner ? detail::curvature_model(kernel, ks, data, target, config.lambda)
                                           : Matrix(config.lambda * symmetrized(gram(kernel, ks.knots)));
    pre.compute(a, oc.eigen_cutoff, 1e-10);
  }

  FitReport rep;
  auto evaluate = [&](const KnotSystem& state) {
    return energy_grad(kernel, state, data, target, config.lambda, config.grid, with_knots);
  };
  EnergyGradient cur = evaluate(ks);
  KnotSystem trial;
  Vector p = detail::pack(ks, with_knots);
  Vector g = detail::pack_grad(cur, with_knots);
  auto grad_measure = [&](const Vector& gv, double e) {
    return gv.size() ? gv.lpNorm<Eigen::Infinity>() / (1.0 + std::abs(e)) : 0.0;
  };
  rep.energy_trace.push_back(cur.energy);
  rep.gradient_trace.push_back(g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0);

  std::deque<std::pair<Vector, Vector>> memory;  // (s, y) for the minimization of -E
  bool stalled = false;
  bool floor_reached = false;
  int it = 0;
  bool converged = grad_measure(g, cur.energy) <= oc.gradient_tol;
  while (!converged && it < oc.max_iters) {
    // direction for ascent: d = H * g with H ~ preconditioned inverse Hessian of -E
    auto direction = [&](bool use_memory) {
      Vector q = g;
      std::vector<double> alpha(memory.size());
      if (use_memory) {
        for (std::size_t i = memory.size(); i-- > 0;) {
          const auto& [s, y] = memory[i];
          double rho = 1.0 / y.dot(s);
          alpha[i] = rho * s.dot(q);
          q -= alpha[i] * y;
        }
      }
      Vector r = pre.apply(q);
      if (use_memory && !memory.empty()) {
        const auto& [s, y] = memory.back();
        const double yhy = y.dot(pre.apply(y));
        if (yhy > 0.0) r *= s.dot(y) / yhy;
        for (std::size_t i = 0; i < memory.size(); ++i) {
          const auto& [si, yi] = memory[i];
          double rho = 1.0 / yi.dot(si);
          double beta = rho * yi.dot(r);
          r += (alpha[i] - beta) * si;
        }
      }
      return r;
    };
    bool use_memory = oc.method == OptimizerMethod::lbfgs;
    bool accepted = false;
    double step = 1.0;
    detail::ForwardPass next;
    Vector p_next;
    double plain_slope = 0.0;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      Vector dir = direction(use_memory && !memory.empty());
      double slope = g.dot(dir);
      if (!use_memory || memory.empty()) plain_slope = slope;
      if (!(slope > 0.0) || !dir.allFinite()) {
        memory.clear();
        use_memory = false;
        continue;
      }
      step = 1.0;
      for (int h = 0; h < oc.max_halvings; ++h, step *= 0.5) {
        p_next = p + step * dir;
        trial = detail::unpack(p_next, ks, with_knots);
        try {
          next = detail::energy_forward(kernel, trial, data, target, config.lambda, config.grid);
        } catch (const DivergenceError&) {
          continue;
        }
        const double e = next.value.energy;
        if (std::isfinite(e) && e > cur.energy && e >= cur.energy + oc.armijo_c * step * slope) {
          accepted = true;
          break;
        }
      }
      if (!accepted) {
        if (!use_memory) break;
        memory.clear();
        use_memory = false;
      }
    }
    if (!accepted) {
      // Below this first-order gain the energy differences are rounding noise.
      if (plain_slope <= kPrecisionFloor * (1.0 + std::abs(cur.energy))) floor_reached = true;
      else stalled = true;
      break;
    }
    EnergyGradient next_grad = detail::energy_backward(kernel, trial, next, config.lambda, with_knots);
    Vector g_next = detail::pack_grad(next_grad, with_knots);
    // curvature pair for minimizing -E: s = dp, y = -(g_next - g)
    Vector s = p_next - p;
    Vector y = g - g_next;
    if (oc.method == OptimizerMethod::lbfgs && s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      memory.emplace_back(std::move(s), std::move(y));
      if (static_cast<int>(memory.size()) > oc.memory) memory.pop_front();
    }
    p = std::move(p_next);
    g = std::move(g_next);
    cur = std::move(next_grad);
    ks = std::move(trial);
    ++it;
    rep.energy_trace.push_back(cur.energy);
    rep.gradient_trace.push_back(g.lpNorm<Eigen::Infinity>());
    rep.step_trace.push_back(step);
    converged = grad_measure(g, cur.energy) <= oc.gradient_tol;
  }

  DensityEstimate est = make_estimate(kernel, ks, target, config.grid, config.lambda, data);
  rep.energy = est.report.energy;
  rep.likelihood = est.report.likelihood;
  rep.penalty = est.report.penalty;
  rep.gradient_norm = g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0;
  rep.iterations = it;
  rep.converged = converged || floor_reached;
  rep.status = converged ? "converged" : floor_reached ? "precision_floor" : stalled ? "stalled" : "max_iters";
  est.report = rep;
  if (stalled) throw OptimizerStalled("line search found no ascent step", std::move(est));
  return est;
}

}  // namespace flowdense
