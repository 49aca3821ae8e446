// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "flowdense/cli.hpp"

using namespace flowdense;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

Points uniform_points(std::mt19937_64& rng, Eigen::Index n, int d, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Points p(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) p(i, c) = u(rng);
  return p;
}

// Shared fit results
struct Fitted {
  std::string name;
  DensityEstimate est;
};
std::vector<Fitted> g_fits;            // fig2 and fig3 variants
std::vector<std::pair<std::string, double>> g_integrals;  // every d=1 acceptance fit
double g_worst_integral_seconds = 0.0;

void record_integral(const std::string& name, const DensityEstimate& est) {
  auto t0 = Clock::now();
  g_integrals.emplace_back(name, density_integral(est));
  g_worst_integral_seconds = std::max(g_worst_integral_seconds, seconds_since(t0));
}

std::vector<cli::VariantResult> run_config(const std::string& figure) {
  const fs::path path = cli::config_dir() / (figure + ".json");
  cli::FigureSetup f = cli::parse_figure(cli::read_json(path), path.parent_path());
  auto runs = cli::run_figure(f);
  for (auto& r : runs) {
    std::cerr << "  " << figure << "/" << r.name << ": " << r.estimate.report.status << ", "
              << r.estimate.report.iterations << " iterations, " << fmt(r.seconds) << " s\n";
    record_integral(figure + "/" + r.name, r.estimate);
    g_fits.push_back({figure + "/" + r.name, r.estimate});
  }
  return runs;
}

const cli::VariantResult& find(const std::vector<cli::VariantResult>& v, const std::string& name) {
  for (const auto& r : v)
    if (r.name == name) return r;
  throw std::runtime_error("missing variant " + name);
}

// 1
Outcome gradient_fidelity() {
  std::mt19937_64 rng(20240601);
  const TimeGrid grid(20);
  const double h = 1e-6;
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const int d = 1 + inst % 2;
    std::uniform_int_distribution<int> nk_d(1, 5), n_d(1, 8);
    const int nk = nk_d(rng), n = n_d(rng);
    auto kernel = RadialKernel::gaussian(0.4 + 0.1 * (inst % 4), d);
    auto target = TargetDensity::gaussian(Vector::Constant(d, 0.1), 0.8);
    KnotSystem ks{uniform_points(rng, nk, d, 1.0), uniform_points(rng, nk, d, 0.4)};
    Points x = uniform_points(rng, n, d, 1.0);
    const double lambda = 0.5;
    EnergyGradient g = energy_grad(kernel, ks, x, target, lambda, grid, true);
    Vector an(2 * nk * d), fd(2 * nk * d);
    Eigen::Index idx = 0;
    for (int block = 0; block < 2; ++block)
      for (Eigen::Index i = 0; i < nk; ++i)
        for (Eigen::Index c = 0; c < d; ++c, ++idx) {
          KnotSystem p = ks, m = ks;
          (block ? p.knots : p.momenta)(i, c) += h;
          (block ? m.knots : m.momenta)(i, c) -= h;
          fd(idx) = (energy_terms(kernel, p, x, target, lambda, grid).energy -
                     energy_terms(kernel, m, x, target, lambda, grid).energy) /
                    (2 * h);
          an(idx) = (block ? g.d_knots : g.d_momenta)(i, c);
        }
    worst = std::max(worst, (an - fd).norm() / fd.norm());
  }
  return {worst <= 1e-5, "max relative error " + fmt(worst) + " (<= 1e-05)"};
}

// 2
Outcome geodesic_conservation() {
  std::mt19937_64 rng(20240602);
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const int d = 1 + inst % 2;
    auto kernel = RadialKernel::gaussian(0.5, d);
    KnotSystem ks{uniform_points(rng, 5, d, 1.0), uniform_points(rng, 5, d, 0.5)};
    KnotPath path = integrate_knots(kernel, ks, TimeGrid(100));
    const double n0 = rkhs_norm_sq(kernel, ks);
    for (const auto& node : path.nodes)
      worst = std::max(worst, std::abs(rkhs_norm_sq(kernel, node) - n0) / (1.0 + n0));
  }
  return {worst <= 1e-6, "max drift / (1 + |v0|^2) " + fmt(worst) + " (<= 1e-06)"};
}

// 3
Outcome logdet_consistency() {
  std::mt19937_64 rng(20240603);
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const int d = 1 + inst % 2;
    auto kernel = RadialKernel::gaussian(0.5, d);
    KnotSystem ks{uniform_points(rng, 4, d, 1.0), uniform_points(rng, 4, d, 0.5)};
    Points x = uniform_points(rng, 8, d, 1.2);
    FlowTrajectory tr = shoot(kernel, ks, x, TimeGrid(20));
    for (std::size_t s = 0; s < tr.logdet_path.size(); ++s)
      for (Eigen::Index k = 0; k < x.rows(); ++k)
        worst = std::max(worst, std::abs(tr.logdet_path[s](k) - std::log(tr.jacobian(s, k).determinant())));
  }
  return {worst <= 1e-6, "max |logdet - log det J| " + fmt(worst) + " (<= 1e-06)"};
}

// 9
Outcome integrator_order() {
  std::mt19937_64 rng(20240609);
  auto kernel = RadialKernel::gaussian(0.5);
  KnotSystem ks{uniform_points(rng, 4, 1, 1.0), uniform_points(rng, 4, 1, 1.0)};
  Points x = uniform_points(rng, 8, 1, 1.2);
  auto end = [&](int s) { return shoot(kernel, ks, x, TimeGrid(s)).particle_path.back(); };
  Points ref = end(800);
  const double e50 = (end(50) - ref).cwiseAbs().maxCoeff();
  const double e100 = (end(100) - ref).cwiseAbs().maxCoeff();
  const double ratio = e50 / e100;
  return {ratio >= 8.0 && ratio <= 32.0, "error ratio S=50/S=100 " + fmt(ratio) + " (in [8, 32])"};
}

// 5
Outcome fig2() {
  auto runs = run_config("fig2");
  const double a = *find(runs, "at_data").estimate.report.el_relative_residual;
  const double b = *find(runs, "augmented_3n").estimate.report.el_relative_residual;
  return {b <= 0.05 && b < a, "augmented_3n " + fmt(b) + " (<= 0.05), at_data " + fmt(a)};
}

// 6
Outcome fig3() {
  auto runs = run_config("fig3");
  const auto& full = find(runs, "at_data").estimate;
  const auto& sub = find(runs, "subsample").estimate;
  const double ratio = *sub.report.el_relative_residual / *full.report.el_relative_residual;
  const double p_full = pushforward_gof(full, full.data).p_value;
  const double p_sub = pushforward_gof(sub, sub.data).p_value;
  bool ok = ratio >= 0.5 && ratio <= 2.0 && p_full > 0.01 && p_sub > 0.01;
  return {ok, "residual ratio " + fmt(ratio) + " (in [0.5, 2]), KS p " + fmt(p_full) + " / " + fmt(p_sub) +
                  " (> 0.01), N=" + std::to_string(full.knots.size()) + "/" + std::to_string(sub.knots.size())};
}

// 7
Outcome stein_linkage() {
  double worst_identity = 0.0;
  for (const auto& f : g_fits) {
    const DensityEstimate& e = f.est;
    auto fields = default_test_fields(e.data);
    SectionField r = residual_field(time_slice(e, e.data, 0.0), e.lambda);
    auto st = stein_residual_t0(e, e.data, fields);
    for (std::size_t i = 0; i < fields.size(); ++i)
      worst_identity = std::max(worst_identity, std::abs(st[i].residual - field_inner(e.kernel, r, fields[i].field)));
  }
  auto target = TargetDensity::gaussian(0.0, 1.0);
  Points y = target.sample(10000, 77);
  // no knots: same identity flow as knots at rest on y, without the n^2 sweeps
  DensityEstimate id =
      make_estimate(RadialKernel::gaussian(0.5), KnotSystem::at_rest(Points(0, 1)), target, TimeGrid(20), 1.0, y);
  auto fields = default_test_fields(y);
  double worst_mc = 0.0;
  for (const auto& set : {stein_residual_t0(id, y, fields), stein_residual_t1(id, y, fields)})
    for (const auto& s : set) worst_mc = std::max(worst_mc, std::abs(s.residual) / (4.0 * s.sample_sd / 100.0));
  return {worst_identity <= 1e-10 && worst_mc <= 1.0 && !g_fits.empty(),
          "identity error " + fmt(worst_identity) + " (<= 1e-10) over " + std::to_string(g_fits.size()) +
              " fits, Monte Carlo |r| / (4 sd/sqrt n) " + fmt(worst_mc) + " (<= 1)"};
}

// 8
Outcome semiparametric() {
  auto truth = TargetDensity::gaussian(3.0, 2.0);
  Points x = truth.sample(500, 2024);
  FitConfig c;
  c.lambda = 1e4;
  SemiFitReport r = fit_semiparametric(x, TargetFamily::gaussian, RadialKernel::gaussian(0.5 * data_scale(x)), c);
  record_integral("gaussian_shrinkage", r.estimate);
  const auto raw = r.initial_theta;
  const auto& th = r.estimate.target.params();
  const double z_mu = std::abs(th[0] - raw[0]) / (raw[1] / std::sqrt(500.0));
  const double z_sd = std::abs(th[1] - raw[1]) / (raw[1] / std::sqrt(1000.0));
  const double eta = r.estimate.knots.momenta.cwiseAbs().maxCoeff();
  bool ok = z_mu <= 3.0 && z_sd <= 3.0 && eta <= 1e-3;
  std::string detail = "shrinkage |dtheta|/SE " + fmt(std::max(z_mu, z_sd)) + " (<= 3), |eta|inf " + fmt(eta) +
                       " (<= 0.001)";

  const fs::path path = cli::config_dir() / "fig4.json";
  nlohmann::json cfg = cli::read_json(path);
  std::vector<std::string> fams = cfg["families"].get<std::vector<std::string>>();
  cfg.erase("families");
  cfg.erase("figure");
  for (const auto& fam : fams) {
    cfg["family"] = fam;
    cli::SemiSetup s = cli::parse_semifit(cfg, path.parent_path());
    auto t0 = Clock::now();
    auto folds = heldout_comparison(s.data, s.family, s.kernel["sigma_factor"].get<double>(), s.fit, s.outer,
                                    s.heldout_folds);
    double semi = 0.0, param = 0.0, n = 0.0;
    for (const auto& f : folds) {
      semi += f.semiparametric * static_cast<double>(f.test_size);
      param += f.parametric * static_cast<double>(f.test_size);
      n += static_cast<double>(f.test_size);
      g_integrals.emplace_back(fam + "/fold" + std::to_string(f.fold), f.density_integral);
    }
    semi /= n;
    param /= n;
    std::cerr << "  fig4/" << fam << ": held-out " << fmt(semi) << " vs " << fmt(param) << ", " << fmt(seconds_since(t0))
              << " s\n";
    ok = ok && semi > param && s.heldout_folds == 5;
    detail += ", " + fam + " held-out " + fmt(semi) + " > " + fmt(param);
  }
  return {ok, detail};
}

// 4
Outcome normalization() {
  double worst = 0.0;
  std::string where;
  for (const auto& [name, v] : g_integrals)
    if (std::abs(v - 1.0) >= worst) {
      worst = std::abs(v - 1.0);
      where = name;
    }
  bool ok = !g_integrals.empty() && worst <= 1e-3 && g_worst_integral_seconds < 10.0;
  return {ok, "max |integral - 1| " + fmt(worst) + " (<= 0.001) at " + where + " over " +
                  std::to_string(g_integrals.size()) + " fits"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_seconds;
    std::function<Outcome()> run;
  };
  // Normalization runs last so that it covers every fit made by the others.
  std::vector<Criterion> criteria = {
      {1, "gradient fidelity", 30, gradient_fidelity},
      {2, "geodesic conservation", 10, geodesic_conservation},
      {3, "log-det consistency", 10, logdet_consistency},
      {5, "two-bump knot richness", 120, fig2},
      {6, "subsampled knots", 300, fig3},
      {7, "Stein identity linkage", 60, stein_linkage},
      {8, "semiparametric sanity", 600, semiparametric},
      {9, "integrator order", 10, integrator_order},
      {4, "normalization", 1e300, normalization},
  };
  std::vector<std::string> lines(10);
  int failed = 0;
  for (auto& c : criteria) {
    std::cerr << "criterion " << c.id << ": " << c.name << "\n";
    auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    bool in_time = secs < c.limit_seconds;
    std::string timing = c.id == 4 ? "worst check " + fmt(g_worst_integral_seconds) + " s (< 10 s per fit)"
                                   : fmt(secs) + " s (< " + fmt(c.limit_seconds) + " s)";
    if (!in_time) o.pass = false;
    failed += !o.pass;
    lines[static_cast<std::size_t>(c.id)] = std::string(o.pass ? "PASS" : "FAIL") + " criterion " +
                                            std::to_string(c.id) + " " + c.name + ": " + o.detail + "; " + timing;
    std::cerr << "  " << lines[static_cast<std::size_t>(c.id)] << "\n";
  }
  for (int i = 1; i <= 9; ++i) std::cout << lines[static_cast<std::size_t>(i)] << "\n";
  return failed ? 1 : 0;
}
