#pragma once

// Alternating fit of the flow (penalized MLE against a fixed target) and of
// the target's parameters (MLE on the pushed-forward data).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "flowdense/common.hpp"
#include "flowdense/estimator.hpp"
#include "flowdense/target.hpp"

namespace flowdense {

struct OuterConfig {
  int max_outer = 25;
  double theta_tol = 1e-5;
  double phi_tol = 1e-5;  // relative to the data scale
  EmOptions em{};
};

struct SemiIterate {
  std::vector<double> theta;
  double max_abs_momentum = 0.0;
  double penalty = 0.0;
  double objective_after_flow = 0.0;  // after the flow step, old theta
  double objective = 0.0;             // after the theta step
  double theta_change = 0.0;
  double phi_change = 0.0;
  int inner_iterations = 0;
  std::string inner_status;
};

struct SemiFitReport {
  std::vector<double> initial_theta;
  double initial_objective = 0.0;
  std::vector<SemiIterate> iterates;
  bool converged = false;
  std::string status = "not_run";
  DensityEstimate estimate;
};

/// E_lambda with the target fixed at `target`.
inline double joint_objective(const TargetDensity& target, const KnotSystem& knots, const Points& data,
                              const RadialKernel& kernel, const FitConfig& config) {
  return energy(kernel, knots, data, target, config);
}

inline SemiFitReport fit_semiparametric(const Points& data, TargetFamily family, const RadialKernel& kernel,
                                        const FitConfig& config, const OuterConfig& outer = {}) {
  if (family != TargetFamily::gaussian && family != TargetFamily::gaussian_mixture2)
    throw ArgumentError("semiparametric fits need the gaussian or gaussian_mixture2 family");
  if (data.cols() != 1 || kernel.dim() != 1) throw UnsupportedDimensionError("semiparametric fits are 1-d only");
  if (outer.max_outer < 1) throw ArgumentError("max_outer must be at least 1");
  config.validate();

  SemiFitReport rep;
  TargetDensity target = mle_fit(family, data, std::nullopt, outer.em);
  KnotSystem ks = make_knots(data, config);
  ks.momenta.setZero();
  Points prev_positions = data;
  rep.initial_theta = target.params();
  rep.initial_objective = joint_objective(target, ks, data, kernel, config);
  const double phi_tol = outer.phi_tol * data_scale(data);

  std::optional<DensityEstimate> best;
  for (int i = 0; i < outer.max_outer; ++i) {
    DensityEstimate est;
    bool stalled = false;
    try {
      est = fit_pmle(data, target, kernel, config, ks);
    } catch (const OptimizerStalled& e) {
      est = e.best();
      stalled = true;
    }
    SemiIterate it;
    it.objective_after_flow = est.report.energy;
    it.inner_iterations = est.report.iterations;
    it.inner_status = est.report.status;
    it.penalty = est.report.penalty;
    it.max_abs_momentum = est.knots.momenta.size() ? est.knots.momenta.cwiseAbs().maxCoeff() : 0.0;
    if (stalled) {
      it.theta = target.params();
      it.objective = it.objective_after_flow;
      rep.iterates.push_back(it);
      rep.status = "inner_stalled";
      rep.estimate = std::move(est);
      return rep;
    }

    TargetDensity next = target;
    try {
      next = mle_fit(family, est.terminal_positions, target.params(), outer.em);
    } catch (const DegeneracyError&) {
      it.theta = target.params();
      it.objective = it.objective_after_flow;
      rep.iterates.push_back(it);
      rep.status = "degenerate_target";
      rep.estimate = std::move(est);
      return rep;
    }
    const auto& a = target.params();
    const auto& b = next.params();
    for (std::size_t p = 0; p < a.size(); ++p) it.theta_change = std::max(it.theta_change, std::abs(a[p] - b[p]));
    it.phi_change = (est.terminal_positions - prev_positions).cwiseAbs().maxCoeff();
    it.theta = b;

    ks = est.knots;
    prev_positions = est.terminal_positions;
    target = next;
    FitReport inner = est.report;
    est = make_estimate(kernel, ks, target, config.grid, config.lambda, data);
    it.objective = est.report.energy;
    inner.energy = est.report.energy;
    inner.likelihood = est.report.likelihood;
    est.report = std::move(inner);
    rep.iterates.push_back(it);
    best = std::move(est);

    if (it.theta_change <= outer.theta_tol && it.phi_change <= phi_tol) {
      rep.converged = true;
      rep.status = "converged";
      break;
    }
  }
  if (!rep.converged) rep.status = "max_outer";
  rep.estimate = std::move(*best);
  rep.estimate.report.converged = rep.converged;
  return rep;
}

// --- held-out comparison ----------------------------------------------------

struct FoldResult {
  int fold = 0;
  Eigen::Index train_size = 0;
  Eigen::Index test_size = 0;
  double kernel_sigma = 0.0;
  double semiparametric = 0.0;  // mean held-out log-likelihood
  double parametric = 0.0;
  double density_integral = 0.0;
  bool converged = false;
  int outer_iterations = 0;
};

/// Splits rows by index modulo `folds`; the kernel width is
/// `sigma_factor` times the training-fold standard deviation.
inline std::vector<FoldResult> heldout_comparison(const Points& data, TargetFamily family, double sigma_factor,
                                                  const FitConfig& config, const OuterConfig& outer = {},
                                                  int folds = 5) {
  if (folds < 2 || data.rows() < 2 * folds) throw ArgumentError("heldout_comparison: too few rows for the folds");
  std::vector<FoldResult> out;
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (Eigen::Index k = 0; k < data.rows(); ++k) (k % folds == f ? te : tr).push_back(k);
    Points train(static_cast<Eigen::Index>(tr.size()), data.cols());
    Points test(static_cast<Eigen::Index>(te.size()), data.cols());
    for (std::size_t i = 0; i < tr.size(); ++i) train.row(static_cast<Eigen::Index>(i)) = data.row(tr[i]);
    for (std::size_t i = 0; i < te.size(); ++i) test.row(static_cast<Eigen::Index>(i)) = data.row(te[i]);

    FoldResult r;
    r.fold = f;
    r.train_size = train.rows();
    r.test_size = test.rows();
    r.kernel_sigma = sigma_factor * data_scale(train);
    RadialKernel kernel = RadialKernel::gaussian(r.kernel_sigma, 1);
    SemiFitReport s = fit_semiparametric(train, family, kernel, config, outer);
    r.semiparametric = log_density_estimate(s.estimate, test).mean();
    r.parametric = mean_log_density(TargetDensity::from_params(family, s.initial_theta), test);
    if (s.estimate.dim() == 1) r.density_integral = density_integral(s.estimate);
    r.converged = s.converged;
    r.outer_iterations = static_cast<int>(s.iterates.size());
    out.push_back(r);
  }
  return out;
}

}  // namespace flowdense
