#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "flowdense/diagnostics.hpp"
#include "flowdense/estimator.hpp"
#include "test_util.hpp"

using namespace flowdense;
using flowdense::testing::random_knots;
using flowdense::testing::random_points;

namespace {

Points two_bump_data(Eigen::Index n, std::uint64_t seed = 7) {
  return sample_truncated_normal_mixture({0.5, 0.5}, {0.3, 0.7}, {0.1, 0.1}, 0.0, 1.0, n, seed);
}

double fd_check(const RadialKernel& k, const KnotSystem& ks, const Points& x, const TargetDensity& t, double lambda,
                bool knots) {
  const TimeGrid grid(12);
  EnergyGradient g = energy_grad(k, ks, x, t, lambda, grid, knots);
  const double h = 1e-6;
  double worst = 0.0;
  auto rel = [&](double a, double b) { return std::abs(a - b) / std::max(1e-3, std::abs(b)); };
  for (Eigen::Index i = 0; i < ks.size(); ++i)
    for (Eigen::Index c = 0; c < ks.dim(); ++c) {
      KnotSystem p = ks, m = ks;
      p.momenta(i, c) += h;
      m.momenta(i, c) -= h;
      double fd = (energy_terms(k, p, x, t, lambda, grid).energy - energy_terms(k, m, x, t, lambda, grid).energy) / (2 * h);
      worst = std::max(worst, rel(g.d_momenta(i, c), fd));
      if (knots) {
        p = ks;
        m = ks;
        p.knots(i, c) += h;
        m.knots(i, c) -= h;
        fd = (energy_terms(k, p, x, t, lambda, grid).energy - energy_terms(k, m, x, t, lambda, grid).energy) / (2 * h);
        worst = std::max(worst, rel(g.d_knots(i, c), fd));
      }
    }
  return worst;
}

}  // namespace

TEST(Energy, IdentityFlowIsMeanLogTarget) {
  auto k = RadialKernel::gaussian(0.2);
  auto t = TargetDensity::gaussian(0.4, 0.3);
  Points x = two_bump_data(10);
  FitConfig c;
  double e = energy(k, make_knots(x, c), x, t, c);
  EXPECT_NEAR(e, mean_log_density(t, x), 1e-14);
}

TEST(Energy, PenaltyIsLinearInLambda) {
  std::mt19937_64 rng(41);
  auto k = RadialKernel::gaussian(0.4);
  auto t = TargetDensity::gaussian(0.0, 1.0);
  KnotSystem ks = random_knots(rng, 3, 1);
  Points x = random_points(rng, 5, 1);
  const TimeGrid g(10);
  const double e1 = energy_terms(k, ks, x, t, 1.5, g).energy;
  const double e2 = energy_terms(k, ks, x, t, 3.0, g).energy;
  EXPECT_NEAR(e2 - e1, -0.75 * rkhs_norm_sq(k, ks), 1e-14);
}

TEST(Energy, PenaltyMatchesTimeQuadrature) {
  std::mt19937_64 rng(42);
  for (int d : {1, 2}) {
    auto k = RadialKernel::gaussian(0.5, d);
    KnotSystem ks = random_knots(rng, 4, d, 1.0, 0.5);
    KnotPath p = integrate_knots(k, ks, TimeGrid(200));
    double trap = 0.0;
    for (std::size_t s = 0; s < p.nodes.size(); ++s)
      trap += (s == 0 || s + 1 == p.nodes.size() ? 0.5 : 1.0) * rkhs_norm_sq(k, p.nodes[s]);
    trap /= 200.0;
    EXPECT_NEAR(trap, rkhs_norm_sq(k, ks), 1e-6);
  }
}

TEST(Energy, PenaltyGradientVanishesAtRest) {
  auto k = RadialKernel::gaussian(0.3);
  auto t = TargetDensity::gaussian(0.5, 0.2);
  Points x = two_bump_data(6);
  KnotSystem ks = KnotSystem::at_rest(x);
  EnergyGradient a = energy_grad(k, ks, x, t, 1.0, TimeGrid(10));
  EnergyGradient b = energy_grad(k, ks, x, t, 50.0, TimeGrid(10));
  EXPECT_EQ(a.d_momenta, b.d_momenta);
}

TEST(EnergyGradient, MatchesFiniteDifferencesOneDim) {
  std::mt19937_64 rng(43);
  auto k = RadialKernel::gaussian(0.5);
  auto t = TargetDensity::gaussian_mixture2(0.4, -0.3, 0.4, 0.5, 0.3);
  for (int rep = 0; rep < 5; ++rep)
    EXPECT_LE(fd_check(k, random_knots(rng, 3, 1, 1.0, 0.4), random_points(rng, 5, 1), t, 0.7, true), 1e-5);
}

TEST(EnergyGradient, MatchesFiniteDifferencesTwoDim) {
  std::mt19937_64 rng(44);
  auto k = RadialKernel::gaussian(0.6, 2);
  Vector mu(2);
  mu << 0.1, -0.2;
  auto t = TargetDensity::gaussian(mu, 0.8);
  for (int rep = 0; rep < 5; ++rep)
    EXPECT_LE(fd_check(k, random_knots(rng, 3, 2, 1.0, 0.4), random_points(rng, 5, 2), t, 0.7, true), 1e-5);
}

TEST(EnergyGradient, TaperedTargetNearEdges) {
  std::mt19937_64 rng(45);
  auto k = RadialKernel::gaussian(0.1);
  auto t = TargetDensity::uniform_tapered(0.0, 1.0);
  Points x = two_bump_data(5, 3);
  KnotSystem ks{x, random_points(rng, 5, 1, 0.2)};
  EXPECT_LE(fd_check(k, ks, x, t, 10.0, false), 1e-5);
}

TEST(EnergyGradient, MirrorSymmetry) {
  std::mt19937_64 rng(46);
  auto k = RadialKernel::gaussian(0.5);
  auto t = TargetDensity::gaussian(0.0, 1.0);
  KnotSystem ks = random_knots(rng, 3, 1);
  Points x = random_points(rng, 5, 1);
  KnotSystem mirrored{-ks.knots, -ks.momenta};
  EnergyGradient a = energy_grad(k, ks, x, t, 1.0, TimeGrid(10), true);
  EnergyGradient b = energy_grad(k, mirrored, -x, t, 1.0, TimeGrid(10), true);
  EXPECT_LT((a.d_momenta + b.d_momenta).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.d_knots + b.d_knots).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(a.energy, b.energy, 1e-13);
}

TEST(Knots, AtData) {
  Points x = two_bump_data(10);
  FitConfig c;
  KnotSystem ks = make_knots(x, c);
  EXPECT_EQ(ks.knots, x);
  EXPECT_EQ(ks.momenta.norm(), 0.0);
}

TEST(Knots, AugmentedPattern) {
  Points x = as_points({0.2, 0.6});
  FitConfig c;
  c.knot_strategy = KnotStrategy::augmented_3n;
  c.delta = 1e-4;
  KnotSystem ks = make_knots(x, c);
  ASSERT_EQ(ks.size(), 6);
  const double want[] = {0.2, 0.6, 0.2 + 5e-5, 0.6 + 5e-5, 0.2 - 5e-5, 0.6 - 5e-5};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(ks.knots(i, 0), want[i]);
  EXPECT_EQ(ks.momenta.norm(), 0.0);
}

TEST(Knots, SubsampleDistinct) {
  Points x = two_bump_data(240);
  FitConfig c;
  c.knot_strategy = KnotStrategy::subsample;
  c.subsample_size = 20;
  c.seed = 3;
  KnotSystem ks = make_knots(x, c);
  ASSERT_EQ(ks.size(), 20);
  std::set<double> seen(ks.knots.data(), ks.knots.data() + 20);
  EXPECT_EQ(seen.size(), 20u);
  for (double v : seen) EXPECT_TRUE((x.array() == v).any());
  EXPECT_EQ(make_knots(x, c).knots, ks.knots);
}

TEST(Knots, SubsampleTooLarge) {
  FitConfig c;
  c.knot_strategy = KnotStrategy::subsample;
  c.subsample_size = 11;
  EXPECT_THROW(make_knots(two_bump_data(10), c), ArgumentError);
}

TEST(FitConfig, Validation) {
  FitConfig c;
  c.lambda = 0.0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.lambda = 1.0;
  c.delta = -1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Estimate, IdentityIsTarget) {
  auto k = RadialKernel::gaussian(0.2);
  auto t = TargetDensity::gaussian(0.4, 0.3);
  Points x = two_bump_data(10);
  DensityEstimate est = make_estimate(k, KnotSystem::at_rest(x), t, TimeGrid(20), 1.0, x);
  std::mt19937_64 rng(1);
  Points probe = random_points(rng, 20, 1);
  Vector f = density_estimate(est, probe);
  for (Eigen::Index i = 0; i < probe.rows(); ++i) EXPECT_EQ(f(i), std::exp(t.log_density(probe.row(i).data())));
}

class FittedTwoBump : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    Points x = two_bump_data(10);
    FitConfig c;
    c.lambda = 10.0;
    est_ = new DensityEstimate(fit_pmle(x, TargetDensity::uniform_tapered(0.0, 1.0), RadialKernel::gaussian(0.1), c));
    c.knot_strategy = KnotStrategy::augmented_3n;
    c.optimizer.eigen_cutoff = 0.0;
    aug_ = new DensityEstimate(fit_pmle(x, TargetDensity::uniform_tapered(0.0, 1.0), RadialKernel::gaussian(0.1), c));
  }
  static void TearDownTestSuite() {
    delete est_;
    delete aug_;
  }
  static DensityEstimate* est_;
  static DensityEstimate* aug_;
};
DensityEstimate* FittedTwoBump::est_ = nullptr;
DensityEstimate* FittedTwoBump::aug_ = nullptr;

TEST_F(FittedTwoBump, Converges) {
  EXPECT_TRUE(est_->report.converged);
  EXPECT_TRUE(aug_->report.converged);
  EXPECT_GT(est_->report.iterations, 0);
}

TEST_F(FittedTwoBump, EnergyNondecreasing) {
  for (const DensityEstimate* e : {est_, aug_}) {
    const auto& tr = e->report.energy_trace;
    for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_GT(tr[i], tr[i - 1]);
  }
}

TEST_F(FittedTwoBump, ReportMatchesRecomputedEnergy) {
  for (const DensityEstimate* e : {est_, aug_}) {
    double again = energy_terms(e->kernel, e->knots, e->data, e->target, e->lambda, e->grid).energy;
    EXPECT_NEAR(e->report.energy, again, 1e-10);
    EXPECT_GT(e->terminal_jacobians.minCoeff(), 0.0);
  }
}

TEST_F(FittedTwoBump, ChangeOfVariablesIdentity) {
  EXPECT_NEAR(log_density_estimate(*aug_, aug_->data).mean(), aug_->report.likelihood, 1e-8);
}

TEST_F(FittedTwoBump, Normalized) {
  EXPECT_NEAR(density_integral(*est_), 1.0, 1e-3);
  EXPECT_NEAR(density_integral(*aug_), 1.0, 1e-3);
}

TEST_F(FittedTwoBump, AugmentedKnotsReduceResidual) {
  EXPECT_LT(el_relative_residual(*aug_, aug_->data), el_relative_residual(*est_, est_->data));
}

TEST_F(FittedTwoBump, SamplesFollowEstimate) {
  SampleResult s = sample_estimate(*aug_, 10000, 5);
  EXPECT_EQ(s.points, sample_estimate(*aug_, 10000, 5).points);
  for (bool e : s.extrapolated) EXPECT_FALSE(e);
  // quadrature CDF of f_hat on a fine grid
  auto [lo, hi] = mass_interval(*aug_);
  const int nodes = 8001;
  Points g(nodes, 1);
  for (int i = 0; i < nodes; ++i) g(i, 0) = lo + (hi - lo) * i / (nodes - 1);
  Vector f = density_estimate(*aug_, g);
  std::vector<double> cdf(nodes, 0.0);
  for (int i = 1; i < nodes; ++i) cdf[i] = cdf[i - 1] + 0.5 * (f(i - 1) + f(i)) * (hi - lo) / (nodes - 1);
  std::vector<double> v(s.points.data(), s.points.data() + s.points.size());
  std::sort(v.begin(), v.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double pos = (v[i] - lo) / (hi - lo) * (nodes - 1);
    auto j = static_cast<int>(std::clamp(std::floor(pos), 0.0, double(nodes - 2)));
    double F = cdf[j] + (cdf[j + 1] - cdf[j]) * (pos - j);
    worst = std::max({worst, std::abs(F - double(i) / v.size()), std::abs(F - double(i + 1) / v.size())});
  }
  EXPECT_LE(worst, 0.03);
}

TEST(Sample, IdentityGivesTargetSamples) {
  auto k = RadialKernel::gaussian(0.2);
  auto t = TargetDensity::gaussian(0.4, 0.3);
  Points x = two_bump_data(5);
  DensityEstimate est = make_estimate(k, KnotSystem::at_rest(x), t, TimeGrid(20), 1.0, x);
  EXPECT_EQ(sample_estimate(est, 100, 9).points, t.sample(100, 9));
  EXPECT_EQ(sample_estimate(est, 0, 9).points.rows(), 0);
}

namespace {

double sup_gap_to_target(const DensityEstimate& est, const TargetDensity& t, const Points& x, double sigma) {
  Points probe = default_probe_grid(x, sigma, 100);
  Vector f = density_estimate(est, probe);
  double worst = 0.0, peak = 0.0;
  for (Eigen::Index i = 0; i < probe.rows(); ++i) {
    const double p = std::exp(t.log_density(probe.row(i).data()));
    worst = std::max(worst, std::abs(f(i) - p));
    peak = std::max(peak, p);
  }
  return worst / peak;
}

}  // namespace

TEST(Fit, StrongPenaltyShrinksToIdentity) {
  auto t = TargetDensity::gaussian(0.0, 1.0);
  Points x = t.sample(10, 21);
  FitConfig c;
  c.lambda = 1e4;
  DensityEstimate est = fit_pmle(x, t, RadialKernel::gaussian(0.1), c);
  EXPECT_LE(est.knots.momenta.cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LE(sup_gap_to_target(est, t, x, 0.1), 0.02);
}

TEST(Fit, StrongPenaltyShrinksFieldNorm) {
  // Momenta are not unique when the Gram matrix is near singular, so the
  // wider configurations are checked through ||v_0||_V instead.
  auto t = TargetDensity::gaussian(0.0, 1.0);
  for (int n : {20, 40})
    for (double sigma : {0.25, 0.5}) {
      Points x = t.sample(n, 22);
      FitConfig c;
      c.lambda = 1e4;
      DensityEstimate est = fit_pmle(x, t, RadialKernel::gaussian(sigma), c);
      EXPECT_LE(std::sqrt(est.report.penalty), 1e-3) << n << " " << sigma;
      EXPECT_LE(sup_gap_to_target(est, t, x, sigma), 0.02) << n << " " << sigma;
    }
}

TEST(Fit, LargerPenaltySmallerField) {
  Points x = two_bump_data(10);
  auto t = TargetDensity::uniform_tapered(0.0, 1.0);
  auto k = RadialKernel::gaussian(0.1);
  FitConfig lo, hi;
  lo.lambda = 5.0;
  hi.lambda = 20.0;
  DensityEstimate a = fit_pmle(x, t, k, lo), b = fit_pmle(x, t, k, hi);
  EXPECT_LE(b.report.penalty, a.report.penalty + 1e-8);
}

TEST(Fit, PermutationInvariantEnergy) {
  std::mt19937_64 rng(47);
  auto k = RadialKernel::gaussian(0.4);
  auto t = TargetDensity::gaussian(0.0, 1.0);
  KnotSystem ks = random_knots(rng, 4, 1);
  Points x = random_points(rng, 6, 1);
  Points y = x.colwise().reverse();
  EXPECT_NEAR(energy_terms(k, ks, x, t, 1.0, TimeGrid(10)).energy, energy_terms(k, ks, y, t, 1.0, TimeGrid(10)).energy,
              1e-14);
}

TEST(Fit, ZeroIterationsReturnsIdentity) {
  Points x = as_points({0.5});
  FitConfig c;
  c.optimizer.max_iters = 0;
  auto t = TargetDensity::gaussian(0.0, 1.0);
  DensityEstimate est = fit_pmle(x, t, RadialKernel::gaussian(0.3), c);
  EXPECT_EQ(est.knots.momenta.norm(), 0.0);
  EXPECT_EQ(est.report.status, "max_iters");
}

TEST(Fit, GradientMethodAlsoAscends) {
  Points x = two_bump_data(10);
  FitConfig c;
  c.lambda = 10.0;
  c.optimizer.method = OptimizerMethod::gradient;
  c.optimizer.max_iters = 30;
  DensityEstimate est = fit_pmle(x, TargetDensity::uniform_tapered(0.0, 1.0), RadialKernel::gaussian(0.1), c);
  const auto& tr = est.report.energy_trace;
  ASSERT_GT(tr.size(), 2u);
  for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_GT(tr[i], tr[i - 1]);
}

TEST(Fit, OptimizeKnotPositions) {
  Points x = two_bump_data(10);
  FitConfig c;
  c.lambda = 10.0;
  c.optimize_knot_positions = true;
  c.optimizer.max_iters = 100;
  DensityEstimate est = fit_pmle(x, TargetDensity::uniform_tapered(0.0, 1.0), RadialKernel::gaussian(0.1), c);
  EXPECT_NE(est.knots.knots, x);
  EXPECT_GT(est.report.energy, est.report.energy_trace.front());
}
