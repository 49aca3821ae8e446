#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "flowdense/target.hpp"
#include "test_util.hpp"

using namespace flowdense;

namespace {

double H(const TargetDensity& t, double x) { return t.log_density(&x); }
double dH(const TargetDensity& t, double x) {
  double g = 0.0;
  t.grad_log_density(&x, &g);
  return g;
}

double trapezoid_mass(const TargetDensity& t, double lo, double hi, int nodes) {
  const double h = (hi - lo) / (nodes - 1);
  double s = 0.0;
  for (int i = 0; i < nodes; ++i) s += (i == 0 || i == nodes - 1 ? 0.5 : 1.0) * std::exp(H(t, lo + i * h));
  return s * h;
}

}  // namespace

TEST(Target, TaperedUniformInteriorIsNearlyFlat) {
  auto t = TargetDensity::uniform_tapered(0.0, 1.0);
  const double w = 0.05;
  EXPECT_LT(std::abs(H(t, 0.5)), 2.0 * w);
  EXPECT_DOUBLE_EQ(H(t, 0.3), H(t, 0.7));
  EXPECT_EQ(dH(t, 0.5), 0.0);
  EXPECT_LT(H(t, -0.2), H(t, 0.5) - 29.0);
}

TEST(Target, GaussianAtMean) {
  auto t = TargetDensity::gaussian(0.0, 1.0);
  EXPECT_NEAR(H(t, 0.0), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(H(t, 0.0), -0.918939, 1e-6);
  EXPECT_DOUBLE_EQ(dH(t, 2.0), -2.0);
}

TEST(Target, MixtureWithUnitWeightLimit) {
  auto m = TargetDensity::gaussian_mixture2(1.0 - 1e-13, 0.5, 0.7, 4.0, 1.3);
  auto g = TargetDensity::gaussian(0.5, 0.7);
  for (double x : {-1.0, 0.0, 0.5, 2.0}) EXPECT_NEAR(H(m, x), H(g, x), 1e-9);
}

TEST(Target, ParameterValidation) {
  EXPECT_THROW(TargetDensity::gaussian(0.0, 0.0), ArgumentError);
  EXPECT_THROW(TargetDensity::gaussian_mixture2(1.0, 0, 1, 1, 1), ArgumentError);
  EXPECT_THROW(TargetDensity::gaussian_mixture2(0.5, 0, -1, 1, 1), ArgumentError);
  EXPECT_THROW(TargetDensity::uniform_tapered(1.0, 0.0, 0.1), ArgumentError);
  EXPECT_THROW(TargetDensity::uniform_tapered(0.0, 1.0, 0.0), ArgumentError);
}

TEST(Target, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-0.5, 1.5);
  std::vector<TargetDensity> ts{TargetDensity::uniform_tapered(0.0, 1.0), TargetDensity::gaussian(0.3, 0.4),
                                TargetDensity::gaussian_mixture2(0.3, 0.1, 0.2, 0.9, 0.3)};
  const double h = 1e-6;
  for (const auto& t : ts)
    for (int i = 0; i < 100; ++i) {
      double x = u(rng);
      double fd = (H(t, x + h) - H(t, x - h)) / (2 * h);
      EXPECT_NEAR(dH(t, x), fd, 1e-6 * std::max(1.0, std::abs(fd))) << to_string(t.family()) << " x=" << x;
    }
}

TEST(Target, GradientIsContinuousAcrossTaperJoins) {
  auto t = TargetDensity::uniform_tapered(0.0, 1.0, 0.1);
  for (double x : {-0.1, 0.0, 1.0, 1.1}) {
    EXPECT_NEAR(dH(t, x - 1e-12), dH(t, x + 1e-12), 1e-7);
    EXPECT_NEAR(H(t, x - 1e-12), H(t, x + 1e-12), 1e-9);
  }
}

TEST(Target, NormalizedByQuadrature) {
  std::vector<std::pair<TargetDensity, std::pair<double, double>>> cases{
      {TargetDensity::uniform_tapered(0.0, 1.0), {-1.0, 2.0}},
      {TargetDensity::uniform_tapered(-2.0, 3.0, 0.4), {-4.0, 5.0}},
      {TargetDensity::gaussian(0.3, 0.4), {0.3 - 6 * 0.4 - 1, 0.3 + 6 * 0.4 + 1}},
      {TargetDensity::gaussian_mixture2(0.3, 0.1, 0.2, 0.9, 0.3), {0.1 - 8 * 0.2, 0.9 + 8 * 0.3}}};
  for (const auto& [t, r] : cases) EXPECT_NEAR(trapezoid_mass(t, r.first, r.second, 4096), 1.0, 1e-6);
}

TEST(Target, CdfMatchesQuadrature) {
  auto t = TargetDensity::uniform_tapered(0.0, 1.0);
  for (double x : {-0.03, 0.0, 0.2, 0.5, 0.97, 1.02}) EXPECT_NEAR(t.cdf(x), trapezoid_mass(t, -1.0, x, 20001), 1e-7);
  auto g = TargetDensity::gaussian(0.0, 1.0);
  EXPECT_NEAR(g.cdf(0.0), 0.5, 1e-15);
}

TEST(TargetSample, EmptyAndDeterministic) {
  auto t = TargetDensity::gaussian(0.0, 1.0);
  EXPECT_EQ(t.sample(0, 1).rows(), 0);
  EXPECT_EQ(t.sample(50, 7), t.sample(50, 7));
  EXPECT_NE(t.sample(50, 7), t.sample(50, 8));
}

TEST(TargetSample, GaussianMoments) {
  Points s = TargetDensity::gaussian(0.0, 1.0).sample(100000, 3);
  const double mean = s.col(0).mean();
  const double sd = std::sqrt((s.col(0).array() - mean).square().mean());
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sd, 1.0, 0.02);
}

TEST(TargetSample, MixtureBalance) {
  Points s = TargetDensity::gaussian_mixture2(0.5, -3.0, 0.5, 3.0, 0.5).sample(100000, 4);
  const double below = (s.col(0).array() < 0.0).cast<double>().mean();
  EXPECT_GE(below, 0.48);
  EXPECT_LE(below, 0.52);
}

TEST(TargetSample, TaperedUniformFollowsCdf) {
  auto t = TargetDensity::uniform_tapered(0.0, 1.0);
  Points s = t.sample(20000, 5);
  std::vector<double> v(s.data(), s.data() + s.size());
  std::sort(v.begin(), v.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = t.cdf(v[i]);
    worst = std::max({worst, std::abs(f - double(i) / v.size()), std::abs(f - double(i + 1) / v.size())});
  }
  EXPECT_LT(worst, 1.63 / std::sqrt(20000.0));
}

TEST(Mle, GaussianTwoPoints) {
  auto t = mle_fit(TargetFamily::gaussian, as_points({-1.0, 1.0}));
  EXPECT_EQ(t.params()[0], 0.0);
  EXPECT_EQ(t.params()[1], 1.0);
}

TEST(Mle, GaussianClosedForm) {
  Points x = TargetDensity::gaussian(2.0, 3.0).sample(1000, 9);
  auto t = mle_fit(TargetFamily::gaussian, x);
  const double mean = x.col(0).mean();
  EXPECT_EQ(t.params()[0], mean);
  EXPECT_NEAR(t.params()[1], std::sqrt((x.col(0).array() - mean).square().mean()), 1e-14);
}

TEST(Mle, GaussianNeedsTwoPoints) { EXPECT_THROW(mle_fit(TargetFamily::gaussian, as_points({1.0})), ArgumentError); }

TEST(Mle, MixtureSeparatedClusters) {
  Points x = TargetDensity::gaussian_mixture2(0.5, -5.0, 0.3, 5.0, 0.3).sample(200, 10);
  auto t = mle_fit(TargetFamily::gaussian_mixture2, x);
  double a = t.params()[1], b = t.params()[3];
  if (a > b) std::swap(a, b);
  EXPECT_NEAR(a, -5.0, 0.2);
  EXPECT_NEAR(b, 5.0, 0.2);
}

TEST(Mle, EmAscendsFromEveryStart) {
  Points x = TargetDensity::gaussian_mixture2(0.3, 0.0, 1.0, 3.0, 0.5).sample(300, 11);
  EmResult r = fit_mixture_em(x);
  ASSERT_EQ(r.restarts.size(), 10u);
  for (const auto& s : r.restarts) {
    if (s.degenerate) continue;
    EXPECT_GE(s.final_loglik, s.initial_loglik - 1e-12);
    EXPECT_LE(s.final_loglik, r.loglik + 1e-12);
  }
  EXPECT_NEAR(mean_log_density(TargetDensity::from_params(TargetFamily::gaussian_mixture2, r.theta), x), r.loglik,
              1e-10);
}

TEST(Mle, WarmStartNeverWorse) {
  Points x = TargetDensity::gaussian_mixture2(0.4, 0.0, 1.0, 2.0, 0.7).sample(150, 12);
  EmResult cold = fit_mixture_em(x);
  EmResult warm = fit_mixture_em(x, {}, cold.theta);
  EXPECT_GE(warm.loglik, cold.loglik - 1e-12);
}

TEST(Mle, MixtureNeedsFourPoints) {
  EXPECT_THROW(mle_fit(TargetFamily::gaussian_mixture2, as_points({0.0, 1.0, 2.0})), ArgumentError);
}

TEST(Mle, AllDegenerateRestartsThrow) {
  EXPECT_THROW(mle_fit(TargetFamily::gaussian_mixture2, as_points({1.0, 1.0, 1.0, 1.0, 1.0})), DegeneracyError);
}

TEST(Generators, TruncatedMixtureStaysInBounds) {
  Points x = sample_truncated_normal_mixture({0.5, 0.5}, {0.3, 0.7}, {0.2, 0.2}, 0.0, 1.0, 5000, 13);
  EXPECT_GE(x.minCoeff(), 0.0);
  EXPECT_LE(x.maxCoeff(), 1.0);
  EXPECT_EQ(x, sample_truncated_normal_mixture({0.5, 0.5}, {0.3, 0.7}, {0.2, 0.2}, 0.0, 1.0, 5000, 13));
}

TEST(Generators, ChiSquareMixtureMean) {
  Points x = sample_chisq_normal_mixture(0.5, 20, 55.0, 3.0, 40000, 14);
  EXPECT_NEAR(x.col(0).mean(), 0.5 * 20 + 0.5 * 55, 0.2);
}
