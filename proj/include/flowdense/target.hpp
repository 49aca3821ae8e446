#pragma once

// Target densities exp H: tapered uniform (product over coordinates),
// isotropic gaussian, and a two-component gaussian mixture in d = 1.
// Also the parametric MLE used by the semiparametric mode, and the data
// generators used by the reproduction configs.

#include <array>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "flowdense/common.hpp"

namespace flowdense {

enum class TargetFamily { uniform_tapered, gaussian, gaussian_mixture2 };

inline TargetFamily parse_target_family(std::string_view name) {
  if (name == "uniform_tapered") return TargetFamily::uniform_tapered;
  if (name == "gaussian") return TargetFamily::gaussian;
  if (name == "gaussian_mixture2") return TargetFamily::gaussian_mixture2;
  throw ArgumentError("unknown target family '" + std::string(name) + "'");
}

inline std::string to_string(TargetFamily f) {
  switch (f) {
    case TargetFamily::uniform_tapered:
      return "uniform_tapered";
    case TargetFamily::gaussian:
      return "gaussian";
    case TargetFamily::gaussian_mixture2:
      return "gaussian_mixture2";
  }
  return "unknown";
}

inline constexpr const char* kRngName = "mt19937_64";

namespace detail {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double log_normal_pdf(double x, double mu, double sd) {
  double z = (x - mu) / sd;
  return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
}

inline double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }
inline double smoothstep_d(double u) { return 6.0 * u * (1.0 - u); }

/// One-dimensional tapered uniform on [a, b]: constant inside, cubic
/// smoothstep drop of `depth` log-units across the taper width, quadratic
/// decay beyond.
class TaperedUniform1D {
 public:
  static constexpr double depth = 30.0;

  TaperedUniform1D() = default;
  TaperedUniform1D(double a, double b, double w) : a_(a), b_(b), w_(w) {
    if (!(a < b)) throw ArgumentError("uniform_tapered requires a < b");
    if (!(w > 0.0)) throw ArgumentError("uniform_tapered requires a positive taper width");
    build_taper_table();
    double tail = std::exp(-depth) * w_ * 0.5 * std::sqrt(std::numbers::pi);
    double z = (b_ - a_) + 2.0 * w_ * taper_mass_ + 2.0 * tail;
    log_norm_ = -std::log(z);
  }

  double a() const { return a_; }
  double b() const { return b_; }
  double w() const { return w_; }
  double interior_log_density() const { return log_norm_; }

  double unnormalized(double x) const {
    if (x >= a_ && x <= b_) return 0.0;
    if (x < a_ - w_) {
      double t = (a_ - w_ - x) / w_;
      return -depth - t * t;
    }
    if (x > b_ + w_) {
      double t = (x - b_ - w_) / w_;
      return -depth - t * t;
    }
    double u = x < a_ ? (x - (a_ - w_)) / w_ : (b_ + w_ - x) / w_;
    return -depth * (1.0 - smoothstep(u));
  }

  double log_density(double x) const { return log_norm_ + unnormalized(x); }

  double grad(double x) const {
    if (x >= a_ && x <= b_) return 0.0;
    if (x < a_ - w_) return 2.0 * (a_ - w_ - x) / (w_ * w_);
    if (x > b_ + w_) return -2.0 * (x - b_ - w_) / (w_ * w_);
    if (x < a_) return depth * smoothstep_d((x - (a_ - w_)) / w_) / w_;
    return -depth * smoothstep_d((b_ + w_ - x) / w_) / w_;
  }

  double cdf(double x) const {
    const double e = std::exp(log_norm_ - depth);
    const double tail = e * w_ * 0.5 * std::sqrt(std::numbers::pi);
    if (x <= a_ - w_) return e * w_ * 0.5 * std::sqrt(std::numbers::pi) * std::erfc((a_ - w_ - x) / w_);
    if (x < a_) return tail + std::exp(log_norm_) * w_ * taper_cumulative((x - (a_ - w_)) / w_);
    const double left = tail + std::exp(log_norm_) * w_ * taper_mass_;
    if (x <= b_) return left + std::exp(log_norm_) * (x - a_);
    if (x < b_ + w_) {
      double u = (b_ + w_ - x) / w_;
      return 1.0 - tail - std::exp(log_norm_) * w_ * taper_cumulative(u);
    }
    return 1.0 - e * w_ * 0.5 * std::sqrt(std::numbers::pi) * std::erfc((x - b_ - w_) / w_);
  }

  double quantile(double p) const {
    double lo = a_ - w_ * 12.0, hi = b_ + w_ * 12.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo) + std::abs(hi)); ++it) {
      double mid = 0.5 * (lo + hi);
      (cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

 private:
  // Cumulative integral over u in [0, 1] of exp(-depth (1 - s(u))).
  void build_taper_table() {
    const int m = kTable;
    cumulative_.assign(static_cast<std::size_t>(m) + 1, 0.0);
    const double h = 1.0 / m;
    auto f = [](double u) { return std::exp(-depth * (1.0 - smoothstep(u))); };
    for (int i = 0; i < m; ++i) {
      double u0 = i * h;
      // Simpson on each cell
      double cell = h / 6.0 * (f(u0) + 4.0 * f(u0 + 0.5 * h) + f(u0 + h));
      cumulative_[static_cast<std::size_t>(i) + 1] = cumulative_[static_cast<std::size_t>(i)] + cell;
    }
    taper_mass_ = cumulative_.back();
  }

  double taper_cumulative(double u) const {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return taper_mass_;
    double pos = u * kTable;
    auto i = static_cast<std::size_t>(pos);
    double frac = pos - static_cast<double>(i);
    // integrate f across the partial cell with Simpson
    const double h = 1.0 / kTable;
    auto f = [](double v) { return std::exp(-depth * (1.0 - smoothstep(v))); };
    double u0 = static_cast<double>(i) * h;
    double len = frac * h;
    return cumulative_[i] + len / 6.0 * (f(u0) + 4.0 * f(u0 + 0.5 * len) + f(u0 + len));
  }

  static constexpr int kTable = 4096;
  double a_ = 0.0, b_ = 1.0, w_ = 0.05;
  double log_norm_ = 0.0;
  double taper_mass_ = 0.0;
  std::vector<double> cumulative_;
};

}  // namespace detail

class TargetDensity {
 public:
  static TargetDensity uniform_tapered(double a, double b, double w, int dim = 1) {
    if (dim < 1) throw ArgumentError("target dimension must be positive");
    TargetDensity t(TargetFamily::uniform_tapered, dim);
    t.taper_ = detail::TaperedUniform1D(a, b, w);
    t.params_ = {a, b, w};
    return t;
  }

  static TargetDensity uniform_tapered(double a, double b) { return uniform_tapered(a, b, 0.05 * (b - a), 1); }

  static TargetDensity gaussian(double mu, double sigma) { return gaussian(Vector::Constant(1, mu), sigma); }

  static TargetDensity gaussian(const Vector& mu, double sigma) {
    if (!(sigma > 0.0)) throw ArgumentError("gaussian target requires sigma > 0");
    TargetDensity t(TargetFamily::gaussian, static_cast<int>(mu.size()));
    t.mean_ = mu;
    for (Eigen::Index c = 0; c < mu.size(); ++c) t.params_.push_back(mu(c));
    t.params_.push_back(sigma);
    return t;
  }

  static TargetDensity gaussian_mixture2(double alpha, double mu1, double s1, double mu2, double s2) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("mixture weight must lie in (0, 1)");
    if (!(s1 > 0.0 && s2 > 0.0)) throw ArgumentError("mixture scales must be positive");
    TargetDensity t(TargetFamily::gaussian_mixture2, 1);
    t.params_ = {alpha, mu1, s1, mu2, s2};
    return t;
  }

  /// Rebuilds a family member from its parameter vector (see params()).
  static TargetDensity from_params(TargetFamily family, const std::vector<double>& p, int dim = 1) {
    switch (family) {
      case TargetFamily::uniform_tapered:
        if (p.size() != 3) throw ArgumentError("uniform_tapered expects {a, b, taper}");
        return uniform_tapered(p[0], p[1], p[2], dim);
      case TargetFamily::gaussian: {
        if (p.size() < 2) throw ArgumentError("gaussian expects {mu..., sigma}");
        Vector mu(static_cast<Eigen::Index>(p.size() - 1));
        for (std::size_t i = 0; i + 1 < p.size(); ++i) mu(static_cast<Eigen::Index>(i)) = p[i];
        return gaussian(mu, p.back());
      }
      case TargetFamily::gaussian_mixture2:
        if (p.size() != 5) throw ArgumentError("gaussian_mixture2 expects {alpha, mu1, sigma1, mu2, sigma2}");
        return gaussian_mixture2(p[0], p[1], p[2], p[3], p[4]);
    }
    throw ArgumentError("unknown target family");
  }

  TargetFamily family() const { return family_; }
  int dim() const { return dim_; }
  const std::vector<double>& params() const { return params_; }

  double log_density(const double* x) const {
    switch (family_) {
      case TargetFamily::uniform_tapered: {
        double h = 0.0;
        for (int c = 0; c < dim_; ++c) h += taper_.log_density(x[c]);
        return h;
      }
      case TargetFamily::gaussian: {
        const double sd = params_.back();
        double q = 0.0;
        for (int c = 0; c < dim_; ++c) {
          double z = (x[c] - mean_(c)) / sd;
          q += z * z;
        }
        return -0.5 * dim_ * (detail::kLogTwoPi + 2.0 * std::log(sd)) - 0.5 * q;
      }
      case TargetFamily::gaussian_mixture2: {
        double l1 = std::log(params_[0]) + detail::log_normal_pdf(x[0], params_[1], params_[2]);
        double l2 = std::log1p(-params_[0]) + detail::log_normal_pdf(x[0], params_[3], params_[4]);
        double m = std::max(l1, l2);
        return m + std::log(std::exp(l1 - m) + std::exp(l2 - m));
      }
    }
    return 0.0;
  }

  void grad_log_density(const double* x, double* g) const {
    switch (family_) {
      case TargetFamily::uniform_tapered:
        for (int c = 0; c < dim_; ++c) g[c] = taper_.grad(x[c]);
        return;
      case TargetFamily::gaussian: {
        const double var = params_.back() * params_.back();
        for (int c = 0; c < dim_; ++c) g[c] = -(x[c] - mean_(c)) / var;
        return;
      }
      case TargetFamily::gaussian_mixture2: {
        double l1 = std::log(params_[0]) + detail::log_normal_pdf(x[0], params_[1], params_[2]);
        double l2 = std::log1p(-params_[0]) + detail::log_normal_pdf(x[0], params_[3], params_[4]);
        double m = std::max(l1, l2);
        double w1 = std::exp(l1 - m), w2 = std::exp(l2 - m);
        double s1 = -(x[0] - params_[1]) / (params_[2] * params_[2]);
        double s2 = -(x[0] - params_[3]) / (params_[4] * params_[4]);
        g[0] = (w1 * s1 + w2 * s2) / (w1 + w2);
        return;
      }
    }
  }

  double log_density(const Vector& x) const {
    check(x);
    return log_density(x.data());
  }

  Vector grad_log_density(const Vector& x) const {
    check(x);
    Vector g(dim_);
    grad_log_density(x.data(), g.data());
    return g;
  }

  /// CDF of a one-dimensional target.
  double cdf(double x) const {
    if (dim_ != 1) throw UnsupportedDimensionError("target CDF is only available for d = 1");
    switch (family_) {
      case TargetFamily::uniform_tapered:
        return taper_.cdf(x);
      case TargetFamily::gaussian:
        return detail::normal_cdf((x - mean_(0)) / params_.back());
      case TargetFamily::gaussian_mixture2:
        return params_[0] * detail::normal_cdf((x - params_[1]) / params_[2]) +
               (1.0 - params_[0]) * detail::normal_cdf((x - params_[3]) / params_[4]);
    }
    return 0.0;
  }

  /// n iid draws; deterministic given the seed.
  Points sample(Eigen::Index n, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    return sample(n, rng);
  }

  Points sample(Eigen::Index n, std::mt19937_64& rng) const {
    Points out(n, dim_);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (Eigen::Index k = 0; k < n; ++k) {
      switch (family_) {
        case TargetFamily::uniform_tapered:
          for (int c = 0; c < dim_; ++c) out(k, c) = taper_.quantile(unif(rng));
          break;
        case TargetFamily::gaussian:
          for (int c = 0; c < dim_; ++c) out(k, c) = mean_(c) + params_.back() * normal(rng);
          break;
        case TargetFamily::gaussian_mixture2: {
          bool first = unif(rng) < params_[0];
          double z = normal(rng);
          out(k, 0) = first ? params_[1] + params_[2] * z : params_[3] + params_[4] * z;
          break;
        }
      }
    }
    return out;
  }

  /// A centre and spread of the target's mass.
  std::pair<double, double> location_scale() const {
    switch (family_) {
      case TargetFamily::uniform_tapered:
        return {0.5 * (params_[0] + params_[1]), params_[1] - params_[0]};
      case TargetFamily::gaussian:
        return {mean_.mean(), params_.back()};
      case TargetFamily::gaussian_mixture2: {
        double a = params_[0];
        double m = a * params_[1] + (1 - a) * params_[3];
        double v = a * (params_[2] * params_[2] + params_[1] * params_[1]) +
                   (1 - a) * (params_[4] * params_[4] + params_[3] * params_[3]) - m * m;
        return {m, std::sqrt(std::max(v, 1e-300))};
      }
    }
    return {0.0, 1.0};
  }

 private:
  TargetDensity(TargetFamily f, int d) : family_(f), dim_(d) {}

  void check(const Vector& x) const {
    if (x.size() != dim_) throw ArgumentError("point dimension does not match target dimension");
  }

  TargetFamily family_;
  int dim_;
  std::vector<double> params_;
  Vector mean_;
  detail::TaperedUniform1D taper_;
};

// --- maximum likelihood -----------------------------------------------------

struct EmOptions {
  int restarts = 10;
  int max_iters = 500;
  double tol = 1e-9;  // on the mean log-likelihood
};

struct EmRestart {
  double initial_loglik = 0.0;
  double final_loglik = 0.0;
  int iterations = 0;
  bool degenerate = false;
};

struct EmResult {
  std::vector<double> theta;  // {alpha, mu1, sigma1, mu2, sigma2}
  double loglik = 0.0;        // mean log-likelihood
  std::vector<EmRestart> restarts;
};

namespace detail {

inline double mixture_mean_loglik(const std::vector<double>& x, const std::array<double, 5>& th) {
  double total = 0.0;
  for (double v : x) {
    double l1 = std::log(th[0]) + log_normal_pdf(v, th[1], th[2]);
    double l2 = std::log1p(-th[0]) + log_normal_pdf(v, th[3], th[4]);
    double m = std::max(l1, l2);
    total += m + std::log(std::exp(l1 - m) + std::exp(l2 - m));
  }
  return total / static_cast<double>(x.size());
}

inline double quantile_sorted(const std::vector<double>& s, double q) {
  double pos = q * static_cast<double>(s.size() - 1);
  auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= s.size()) return s.back();
  double f = pos - static_cast<double>(i);
  return s[i] * (1.0 - f) + s[i + 1] * f;
}

// One EM run; returns false on degenerate collapse.
inline bool run_em(const std::vector<double>& x, std::array<double, 5>& th, const EmOptions& opt, double sd,
                   EmRestart& rec) {
  const std::size_t n = x.size();
  std::vector<double> resp(n);
  rec.initial_loglik = mixture_mean_loglik(x, th);
  double prev = rec.initial_loglik;
  const double floor = 1e-6 * sd;
  rec.final_loglik = prev;
  for (int it = 0; it < opt.max_iters; ++it) {
    for (std::size_t k = 0; k < n; ++k) {
      double l1 = std::log(th[0]) + log_normal_pdf(x[k], th[1], th[2]);
      double l2 = std::log1p(-th[0]) + log_normal_pdf(x[k], th[3], th[4]);
      double m = std::max(l1, l2);
      double e1 = std::exp(l1 - m), e2 = std::exp(l2 - m);
      resp[k] = e1 / (e1 + e2);
    }
    double w1 = 0.0, m1 = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      w1 += resp[k];
      m1 += resp[k] * x[k];
      m2 += (1.0 - resp[k]) * x[k];
    }
    double w2 = static_cast<double>(n) - w1;
    if (w1 < 1e-8 || w2 < 1e-8) {
      rec.degenerate = true;
      rec.iterations = it + 1;
      return false;
    }
    m1 /= w1;
    m2 /= w2;
    double v1 = 0.0, v2 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      v1 += resp[k] * (x[k] - m1) * (x[k] - m1);
      v2 += (1.0 - resp[k]) * (x[k] - m2) * (x[k] - m2);
    }
    double s1 = std::sqrt(v1 / w1), s2 = std::sqrt(v2 / w2);
    if (!(s1 >= floor) || !(s2 >= floor)) {
      rec.degenerate = true;
      rec.iterations = it + 1;
      return false;
    }
    th = {w1 / static_cast<double>(n), m1, s1, m2, s2};
    double ll = mixture_mean_loglik(x, th);
    rec.iterations = it + 1;
    rec.final_loglik = ll;
    if (std::abs(ll - prev) <= opt.tol) break;
    prev = ll;
  }
  return true;
}

}  // namespace detail

/// EM for the two-component mixture with quantile-based restarts; an
/// optional warm start is run as an extra restart.
inline EmResult fit_mixture_em(const Points& data, const EmOptions& opt = {},
                               const std::optional<std::vector<double>>& warm = std::nullopt) {
  if (data.cols() != 1) throw UnsupportedDimensionError("mixture fitting is only available for d = 1");
  if (data.rows() < 4) throw ArgumentError("mixture fitting needs at least 4 points");
  std::vector<double> x(data.data(), data.data() + data.rows());
  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const double sd = data_scale(data);
  static constexpr std::array<std::array<double, 2>, 10> kQuantilePairs = {{{0.25, 0.75},
                                                                            {0.10, 0.90},
                                                                            {0.20, 0.80},
                                                                            {0.30, 0.70},
                                                                            {0.05, 0.50},
                                                                            {0.50, 0.95},
                                                                            {0.10, 0.60},
                                                                            {0.40, 0.90},
                                                                            {0.15, 0.65},
                                                                            {0.35, 0.85}}};
  std::vector<std::array<double, 5>> inits;
  for (int r = 0; r < opt.restarts; ++r) {
    const auto& q = kQuantilePairs[static_cast<std::size_t>(r) % kQuantilePairs.size()];
    double spread = 0.5 * sd / (1.0 + static_cast<double>(r / static_cast<int>(kQuantilePairs.size())));
    inits.push_back({0.5, detail::quantile_sorted(sorted, q[0]), spread, detail::quantile_sorted(sorted, q[1]), spread});
  }
  if (warm) {
    if (warm->size() != 5) throw ArgumentError("mixture warm start expects 5 parameters");
    inits.push_back({(*warm)[0], (*warm)[1], (*warm)[2], (*warm)[3], (*warm)[4]});
  }
  EmResult best;
  bool found = false;
  for (auto th : inits) {
    EmRestart rec;
    bool ok = detail::run_em(x, th, opt, sd, rec);
    best.restarts.push_back(rec);
    if (ok && (!found || rec.final_loglik > best.loglik)) {
      found = true;
      best.loglik = rec.final_loglik;
      best.theta.assign(th.begin(), th.end());
    }
  }
  if (!found) throw DegeneracyError("all EM restarts collapsed to a degenerate component");
  return best;
}

/// Maximum likelihood estimate of a parametric target on `data`.
inline TargetDensity mle_fit(TargetFamily family, const Points& data,
                             const std::optional<std::vector<double>>& warm = std::nullopt,
                             const EmOptions& em = {}) {
  switch (family) {
    case TargetFamily::gaussian: {
      if (data.rows() < 2) throw ArgumentError("gaussian MLE needs at least 2 points");
      Vector mu = data.colwise().mean().transpose();
      double ss = 0.0;
      for (Eigen::Index k = 0; k < data.rows(); ++k) ss += (data.row(k).transpose() - mu).squaredNorm();
      double sd = std::sqrt(ss / (static_cast<double>(data.rows()) * static_cast<double>(data.cols())));
      if (!(sd > 0.0)) throw DegeneracyError("gaussian MLE: data have zero spread");
      return TargetDensity::gaussian(mu, sd);
    }
    case TargetFamily::gaussian_mixture2: {
      EmResult r = fit_mixture_em(data, em, warm);
      return TargetDensity::from_params(family, r.theta);
    }
    case TargetFamily::uniform_tapered:
      break;
  }
  throw ArgumentError("no MLE available for target family " + to_string(family));
}

inline double mean_log_density(const TargetDensity& t, const Points& x) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < x.rows(); ++k) s += t.log_density(x.row(k).data());
  return x.rows() ? s / static_cast<double>(x.rows()) : 0.0;
}

// --- data generators ------------------------------------------------------

/// Rejection sampler for a normal mixture truncated to [lo, hi].
inline Points sample_truncated_normal_mixture(const std::vector<double>& weights, const std::vector<double>& means,
                                              const std::vector<double>& sds, double lo, double hi, Eigen::Index n,
                                              std::uint64_t seed) {
  if (weights.empty() || weights.size() != means.size() || weights.size() != sds.size())
    throw ArgumentError("mixture generator: weights, means and sds must have equal nonzero length");
  if (!(lo < hi)) throw ArgumentError("mixture generator: empty truncation interval");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  Points out(n, 1);
  for (Eigen::Index k = 0; k < n; ++k) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000000) throw ArgumentError("mixture generator: truncation window has negligible mass");
      std::size_t c = pick(rng);
      double v = means[c] + sds[c] * normal(rng);
      if (v >= lo && v <= hi) {
        out(k, 0) = v;
        break;
      }
    }
  }
  return out;
}

/// Mixture of a chi-square (sum of `df` squared normals) and a normal.
inline Points sample_chisq_normal_mixture(double chisq_weight, int df, double mu, double sigma, Eigen::Index n,
                                          std::uint64_t seed) {
  if (df < 1 || !(sigma > 0.0) || !(chisq_weight >= 0.0 && chisq_weight <= 1.0))
    throw ArgumentError("chi-square mixture generator: invalid parameters");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Points out(n, 1);
  for (Eigen::Index k = 0; k < n; ++k) {
    if (unif(rng) < chisq_weight) {
      double s = 0.0;
      for (int i = 0; i < df; ++i) {
        double z = normal(rng);
        s += z * z;
      }
      out(k, 0) = s;
    } else {
      out(k, 0) = mu + sigma * normal(rng);
    }
  }
  return out;
}

}  // namespace flowdense
