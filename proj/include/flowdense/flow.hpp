#pragma once

// Geodesic shooting of kernel-expansion vector fields.
//
// Knots and momenta follow the Hamiltonian geodesic equations
//   d kappa_i / dt = sum_j eta_j R(kappa_i, kappa_j)
//   d eta_i / dt   = -sum_j (eta_i . eta_j) grad_1 R(kappa_i, kappa_j)
// and tracked particles are transported by v_t = sum_j eta_j(t) R(., kappa_j(t))
// together with their Jacobian, log-determinant (integrated divergence) and
// the spatial gradient of that log-determinant. All state is advanced with
// classical RK4 on a uniform grid; particles reuse the knot stage states so a
// batch transported later is bit-identical to a joint integration.

#include <array>
#include <optional>

#include "flowdense/common.hpp"
#include "flowdense/kernel.hpp"
#include "flowdense/knots.hpp"

namespace flowdense {

struct TimeGrid {
  int steps = 20;
  double begin = 0.0;
  double end = 1.0;

  TimeGrid() = default;
  explicit TimeGrid(int s, double b = 0.0, double e = 1.0) : steps(s), begin(b), end(e) { validate(); }

  double step() const { return (end - begin) / steps; }
  double node(int s) const { return s == steps ? end : begin + s * step(); }

  void validate() const {
    if (steps < 1) throw ArgumentError("time grid needs at least one step");
    if (!(begin < end)) throw ArgumentError("time grid must be strictly increasing");
  }
};

/// Knot/momentum states at every node and at the four RK4 stage points of every step.
struct KnotPath {
  TimeGrid grid;
  std::vector<KnotSystem> nodes;
  std::vector<std::array<KnotSystem, 4>> stages;

  const KnotSystem& initial() const { return nodes.front(); }
  const KnotSystem& terminal() const { return nodes.back(); }
};

// --- pointwise field evaluation -----------------------------------------

namespace detail {

inline void check_point(const RadialKernel& kernel, const KnotSystem& ks, const Vector& x) {
  if (x.size() != kernel.dim() || (ks.size() > 0 && ks.dim() != kernel.dim()))
    throw ArgumentError("dimension mismatch between point, knots and kernel");
}

}  // namespace detail

inline Vector velocity(const RadialKernel& kernel, const KnotSystem& ks, const Vector& x) {
  detail::check_point(kernel, ks, x);
  Vector v = Vector::Zero(kernel.dim());
  for (Eigen::Index j = 0; j < ks.size(); ++j)
    v += kernel.value_raw(x.data(), ks.knots.row(j).data()) * ks.momenta.row(j).transpose();
  return v;
}

/// Dv(x)_{ab} = d v_a / d x_b.
inline Matrix velocity_jacobian(const RadialKernel& kernel, const KnotSystem& ks, const Vector& x) {
  detail::check_point(kernel, ks, x);
  const int d = kernel.dim();
  Matrix dv = Matrix::Zero(d, d);
  for (Eigen::Index j = 0; j < ks.size(); ++j) {
    Vector kj = ks.knots.row(j).transpose();
    dv += ks.momenta.row(j).transpose() * kernel.grad_x(x, kj).transpose();
  }
  return dv;
}

inline double velocity_divergence(const RadialKernel& kernel, const KnotSystem& ks, const Vector& x) {
  detail::check_point(kernel, ks, x);
  double div = 0.0;
  for (Eigen::Index j = 0; j < ks.size(); ++j) {
    Vector kj = ks.knots.row(j).transpose();
    div += ks.momenta.row(j).dot(kernel.grad_x(x, kj).transpose());
  }
  return div;
}

// --- knot dynamics ------------------------------------------------------

namespace detail {

// Column-major copies of a knot system so sweeps over knots vectorize.
struct KnotColumns {
  Matrix k, e;
  explicit KnotColumns(const KnotSystem& ks) : k(ks.knots), e(ks.momenta) {}
  Eigen::Index size() const { return k.rows(); }
};

// Offsets r_j = x - kappa_j and the radial profile at every knot.
struct Sweep {
  Eigen::ArrayXXd r;
  Eigen::ArrayXd s, v, d1, d2;

  void run(const RadialKernel& kernel, const KnotColumns& kc, const double* x, int order) {
    const Eigen::Index n = kc.size();
    const int d = static_cast<int>(kc.k.cols());
    r.resize(n, d);
    for (int c = 0; c < d; ++c) r.col(c) = x[c] - kc.k.col(c).array();
    s = r.col(0).square();
    for (int c = 1; c < d; ++c) s += r.col(c).square();
    kernel.profile_array(s, v, d1, d2, order);
  }
};

}  // namespace detail

/// Time derivative of (knots, momenta) under the geodesic equations.
inline KnotSystem knot_rhs(const RadialKernel& kernel, const KnotSystem& ks) {
  const Eigen::Index n = ks.size();
  const int d = static_cast<int>(ks.dim());
  KnotSystem out;
  out.knots = Points::Zero(n, d);
  out.momenta = Points::Zero(n, d);
  if (n == 0) return out;
  detail::KnotColumns kc(ks);
  detail::Sweep sw;
  Eigen::ArrayXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sw.run(kernel, kc, ks.knots.row(i).data(), 1);
    w = (kc.e * ks.momenta.row(i).transpose()).array();
    Eigen::ArrayXd wg = 2.0 * w * sw.d1;
    for (int c = 0; c < d; ++c) {
      out.knots(i, c) = (sw.v * kc.e.col(c).array()).sum();
      out.momenta(i, c) = -(wg * sw.r.col(c)).sum();
    }
  }
  return out;
}

inline KnotSystem axpy(const KnotSystem& z, double a, const KnotSystem& k) {
  KnotSystem out;
  out.knots = z.knots + a * k.knots;
  out.momenta = z.momenta + a * k.momenta;
  return out;
}

inline bool finite(const KnotSystem& ks) { return all_finite(ks.knots) && all_finite(ks.momenta); }

/// RK4 integration of the knot system over grid (h may be negative for
/// reverse-time integration when begin > end is emulated by the caller).
inline KnotPath integrate_knots_signed(const RadialKernel& kernel, const KnotSystem& initial, int steps,
                                       double t_begin, double h) {
  KnotPath path;
  path.grid.steps = steps;
  path.grid.begin = t_begin;
  path.grid.end = t_begin + h * steps;
  path.nodes.reserve(static_cast<std::size_t>(steps) + 1);
  path.stages.reserve(static_cast<std::size_t>(steps));
  path.nodes.push_back(initial);
  for (int s = 0; s < steps; ++s) {
    const KnotSystem& z = path.nodes.back();
    std::array<KnotSystem, 4> st;
    st[0] = z;
    KnotSystem k1 = knot_rhs(kernel, st[0]);
    st[1] = axpy(z, 0.5 * h, k1);
    KnotSystem k2 = knot_rhs(kernel, st[1]);
    st[2] = axpy(z, 0.5 * h, k2);
    KnotSystem k3 = knot_rhs(kernel, st[2]);
    st[3] = axpy(z, h, k3);
    KnotSystem k4 = knot_rhs(kernel, st[3]);
    KnotSystem next;
    next.knots = z.knots + (h / 6.0) * (k1.knots + 2.0 * k2.knots + 2.0 * k3.knots + k4.knots);
    next.momenta = z.momenta + (h / 6.0) * (k1.momenta + 2.0 * k2.momenta + 2.0 * k3.momenta + k4.momenta);
    if (!finite(next)) throw DivergenceError("knot state diverged during shooting", s + 1);
    path.stages.push_back(std::move(st));
    path.nodes.push_back(std::move(next));
  }
  return path;
}

inline KnotPath integrate_knots(const RadialKernel& kernel, const KnotSystem& initial, const TimeGrid& grid) {
  grid.validate();
  initial.validate();
  if (initial.size() > 0 && initial.dim() != kernel.dim()) throw ArgumentError("knot dimension mismatch");
  KnotPath path = integrate_knots_signed(kernel, initial, grid.steps, grid.begin, grid.step());
  path.grid = grid;
  return path;
}

// --- particle transport -------------------------------------------------

struct TransportOptions {
  bool jacobian = true;
  bool logdet = true;
  bool logdet_grad = false;
  bool keep_path = true;    // store every node, otherwise only the terminal state
  bool keep_stages = false; // store stage positions (needed by the adjoint)
};

/// Particle states; jacobians are stored row-major as n x d*d.
struct ParticleFlow {
  std::vector<Points> positions;
  std::vector<Points> jacobians;
  std::vector<Vector> logdets;
  Points logdet_grad;  // terminal only, n x d (row k = grad_x log det Dphi(x_k))
  std::vector<std::array<Points, 4>> stage_positions;

  const Points& terminal_positions() const { return positions.back(); }
  const Vector& terminal_logdets() const { return logdets.back(); }
  const Points& terminal_jacobians() const { return jacobians.back(); }

  Matrix jacobian(std::size_t node, Eigen::Index k) const {
    const Points& j = jacobians[node];
    const auto d = static_cast<Eigen::Index>(std::lround(std::sqrt(static_cast<double>(j.cols()))));
    Matrix m(d, d);
    for (Eigen::Index a = 0; a < d; ++a)
      for (Eigen::Index b = 0; b < d; ++b) m(a, b) = j(k, a * d + b);
    return m;
  }
};

namespace detail {

struct ParticleBuffers {
  Points x, jac, q;
  Vector ell;
};

// Evaluates the particle RHS for rows [b, e) of the stage state `in`.
inline void particle_rhs(const RadialKernel& kernel, const KnotColumns& kc, const ParticleBuffers& in,
                         ParticleBuffers& out, const TransportOptions& opt, Eigen::Index b, Eigen::Index e) {
  const int d = kernel.dim();
  std::vector<double> dv(static_cast<std::size_t>(d * d)), gdiv(static_cast<std::size_t>(d));
  const bool need_dv = opt.jacobian || opt.logdet || opt.logdet_grad;
  Sweep sw;
  Eigen::ArrayXd g1, re, ge;
  for (Eigen::Index k = b; k < e; ++k) {
    double* vel = out.x.row(k).data();
    if (kc.size() == 0) {
      for (int c = 0; c < d; ++c) vel[c] = 0.0;
      std::fill(dv.begin(), dv.end(), 0.0);
      std::fill(gdiv.begin(), gdiv.end(), 0.0);
    } else {
      sw.run(kernel, kc, in.x.row(k).data(), opt.logdet_grad ? 2 : need_dv ? 1 : 0);
      for (int c = 0; c < d; ++c) vel[c] = (sw.v * kc.e.col(c).array()).sum();
      if (need_dv) {
        g1 = 2.0 * sw.d1;
        for (int a = 0; a < d; ++a) {
          ge = g1 * kc.e.col(a).array();
          for (int c = 0; c < d; ++c) dv[static_cast<std::size_t>(a * d + c)] = (ge * sw.r.col(c)).sum();
        }
      }
      if (opt.logdet_grad) {
        re = sw.r.col(0) * kc.e.col(0).array();
        for (int c = 1; c < d; ++c) re += sw.r.col(c) * kc.e.col(c).array();
        re *= 4.0 * sw.d2;
        for (int c = 0; c < d; ++c)
          gdiv[static_cast<std::size_t>(c)] = (g1 * kc.e.col(c).array() + re * sw.r.col(c)).sum();
      }
    }
    if (opt.logdet) {
      double tr = 0.0;
      for (int c = 0; c < d; ++c) tr += dv[static_cast<std::size_t>(c * d + c)];
      out.ell(k) = tr;
    }
    if (opt.jacobian || opt.logdet_grad) {
      const double* jk = in.jac.row(k).data();
      if (opt.jacobian) {
        double* dj = out.jac.row(k).data();
        for (int a = 0; a < d; ++a)
          for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int m = 0; m < d; ++m) acc += dv[static_cast<std::size_t>(a * d + m)] * jk[m * d + c];
            dj[a * d + c] = acc;
          }
      }
      if (opt.logdet_grad) {
        double* dq = out.q.row(k).data();
        for (int c = 0; c < d; ++c) {
          double acc = 0.0;
          for (int m = 0; m < d; ++m) acc += jk[m * d + c] * gdiv[static_cast<std::size_t>(m)];
          dq[c] = acc;
        }
      }
    }
  }
}

inline ParticleBuffers make_buffers(Eigen::Index n, int d, const TransportOptions& opt) {
  ParticleBuffers buf;
  buf.x = Points::Zero(n, d);
  if (opt.jacobian || opt.logdet_grad) buf.jac = Points::Zero(n, d * d);
  if (opt.logdet) buf.ell = Vector::Zero(n);
  if (opt.logdet_grad) buf.q = Points::Zero(n, d);
  return buf;
}

inline void buffers_axpy(ParticleBuffers& out, const ParticleBuffers& z, double a, const ParticleBuffers& k,
                         const TransportOptions& opt) {
  out.x = z.x + a * k.x;
  if (opt.jacobian) out.jac = z.jac + a * k.jac;
  else if (opt.logdet_grad) out.jac = z.jac;
  if (opt.logdet) out.ell = z.ell + a * k.ell;
  if (opt.logdet_grad) out.q = z.q + a * k.q;
}

inline void parallel_rhs(const RadialKernel& kernel, const KnotSystem& ks, const ParticleBuffers& in,
                         ParticleBuffers& out, const TransportOptions& opt) {
  const KnotColumns kc(ks);
  parallel_chunks(static_cast<std::size_t>(in.x.rows()), [&](std::size_t b, std::size_t e, std::size_t) {
    particle_rhs(kernel, kc, in, out, opt, static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e));
  });
}

}  // namespace detail

/// Transports particles along a precomputed knot path.
inline ParticleFlow transport(const RadialKernel& kernel, const KnotPath& path, const Points& particles,
                              TransportOptions opt = {}) {
  const int d = kernel.dim();
  if (particles.rows() > 0 && particles.cols() != d) throw ArgumentError("particle dimension mismatch");
  if (opt.logdet_grad) opt.jacobian = true;
  const Eigen::Index n = particles.rows();
  const int steps = path.grid.steps;
  const double h = (path.grid.end - path.grid.begin) / steps;

  detail::ParticleBuffers z = detail::make_buffers(n, d, opt);
  z.x = particles;
  if (opt.jacobian) {
    for (Eigen::Index k = 0; k < n; ++k)
      for (int c = 0; c < d; ++c) z.jac(k, c * d + c) = 1.0;
  }

  ParticleFlow flow;
  auto record = [&](const detail::ParticleBuffers& st) {
    flow.positions.push_back(st.x);
    if (opt.jacobian) flow.jacobians.push_back(st.jac);
    if (opt.logdet) flow.logdets.push_back(st.ell);
  };
  if (opt.keep_path) record(z);

  detail::ParticleBuffers k1 = detail::make_buffers(n, d, opt), k2 = k1, k3 = k1, k4 = k1, tmp = k1;
  for (int s = 0; s < steps; ++s) {
    const auto& st = path.stages[static_cast<std::size_t>(s)];
    std::array<Points, 4> stage_x;
    if (opt.keep_stages) stage_x[0] = z.x;
    detail::parallel_rhs(kernel, st[0], z, k1, opt);
    detail::buffers_axpy(tmp, z, 0.5 * h, k1, opt);
    if (opt.keep_stages) stage_x[1] = tmp.x;
    detail::parallel_rhs(kernel, st[1], tmp, k2, opt);
    detail::buffers_axpy(tmp, z, 0.5 * h, k2, opt);
    if (opt.keep_stages) stage_x[2] = tmp.x;
    detail::parallel_rhs(kernel, st[2], tmp, k3, opt);
    detail::buffers_axpy(tmp, z, h, k3, opt);
    if (opt.keep_stages) stage_x[3] = tmp.x;
    detail::parallel_rhs(kernel, st[3], tmp, k4, opt);
    z.x += (h / 6.0) * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
    if (opt.jacobian) z.jac += (h / 6.0) * (k1.jac + 2.0 * k2.jac + 2.0 * k3.jac + k4.jac);
    if (opt.logdet) z.ell += (h / 6.0) * (k1.ell + 2.0 * k2.ell + 2.0 * k3.ell + k4.ell);
    if (opt.logdet_grad) z.q += (h / 6.0) * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q);
    if (!all_finite(z.x) || (opt.logdet && !all_finite(z.ell.data(), static_cast<std::size_t>(z.ell.size()))))
      throw DivergenceError("particle state diverged during transport", s + 1);
    if (opt.keep_stages) flow.stage_positions.push_back(std::move(stage_x));
    if (opt.keep_path) record(z);
  }
  if (!opt.keep_path) record(z);
  if (opt.logdet_grad) flow.logdet_grad = z.q;
  return flow;
}

// --- trajectories ---------------------------------------------------------

struct FlowTrajectory {
  TimeGrid grid;
  KnotPath knot_path;
  std::vector<Points> particle_path;   // S+1 x (n x d)
  std::vector<Points> jacobian_path;   // S+1 x (n x d*d)
  std::vector<Vector> logdet_path;     // S+1 x n

  Matrix jacobian(std::size_t node, Eigen::Index k) const {
    const Points& j = jacobian_path[node];
    const auto d = knot_path.initial().dim() > 0 ? knot_path.initial().dim() : particle_path[node].cols();
    Matrix m(d, d);
    for (Eigen::Index a = 0; a < d; ++a)
      for (Eigen::Index b = 0; b < d; ++b) m(a, b) = j(k, a * d + b);
    return m;
  }
};

inline FlowTrajectory shoot(const RadialKernel& kernel, const KnotSystem& initial, const Points& particles,
                            const TimeGrid& grid) {
  FlowTrajectory traj;
  traj.grid = grid;
  traj.knot_path = integrate_knots(kernel, initial, grid);
  ParticleFlow pf = transport(kernel, traj.knot_path, particles, {});
  traj.particle_path = std::move(pf.positions);
  traj.jacobian_path = std::move(pf.jacobians);
  traj.logdet_path = std::move(pf.logdets);
  return traj;
}

inline double determinant_row(const Points& jac, Eigen::Index k, int d) {
  Matrix m(d, d);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) m(a, b) = jac(k, a * d + b);
  return m.determinant();
}

// --- inverse map ------------------------------------------------------------

struct InverseResult {
  Points points;
  std::vector<bool> extrapolated;  // true where |phi_1(x) - y| > 1e-6 after refinement
  Points residuals;
};

/// phi_1^{-1}(y): reverse-time RK4 of the frozen geodesic as a starting
/// guess, then Newton refinement on the discrete forward map.
inline InverseResult inverse_map(const RadialKernel& kernel, const KnotPath& path, const Points& y,
                                 int max_newton = 40) {
  const int d = kernel.dim();
  if (y.rows() > 0 && y.cols() != d) throw ArgumentError("inverse_map: point dimension mismatch");
  const int steps = path.grid.steps;
  const double h = (path.grid.end - path.grid.begin) / steps;
  KnotPath back = integrate_knots_signed(kernel, path.terminal(), steps, path.grid.end, -h);
  TransportOptions pos_only{false, false, false, false, false};
  ParticleFlow guess = transport(kernel, back, y, pos_only);

  InverseResult res;
  res.points = guess.terminal_positions();
  const Eigen::Index n = y.rows();
  TransportOptions with_jac{true, false, false, false, false};
  Points resid = Points::Zero(n, d);
  for (int it = 0; it <= max_newton; ++it) {
    ParticleFlow fwd = transport(kernel, path, res.points, with_jac);
    resid = fwd.terminal_positions() - y;
    double worst = 0.0;
    for (Eigen::Index k = 0; k < n; ++k)
      worst = std::max(worst, resid.row(k).lpNorm<Eigen::Infinity>() / (1.0 + y.row(k).lpNorm<Eigen::Infinity>()));
    if (worst <= 1e-14 || it == max_newton) break;
    for (Eigen::Index k = 0; k < n; ++k) {
      Matrix jm(d, d);
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) jm(a, b) = fwd.terminal_jacobians()(k, a * d + b);
      Vector step = jm.partialPivLu().solve(resid.row(k).transpose());
      if (step.allFinite()) res.points.row(k) -= step.transpose();
    }
  }
  res.residuals = resid;
  res.extrapolated.resize(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k)
    res.extrapolated[static_cast<std::size_t>(k)] =
        !(resid.row(k).lpNorm<Eigen::Infinity>() <= 1e-6) || !res.points.row(k).allFinite();
  return res;
}

inline Vector inverse_map(const RadialKernel& kernel, const KnotPath& path, const Vector& y) {
  Points p(1, y.size());
  p.row(0) = y.transpose();
  return inverse_map(kernel, path, p).points.row(0).transpose();
}

// --- forward sensitivities ------------------------------------------------

struct Perturbation {
  Points d_momenta;
  Points d_knots;
};

struct SensitivityResult {
  Points d_positions;   // n x d at t = 1
  Vector d_logdets;     // n at t = 1
  std::vector<Points> d_knot_path;
  std::vector<Points> d_momentum_path;
};

namespace detail {

inline KnotSystem knot_jvp(const RadialKernel& kernel, const KnotSystem& ks, const KnotSystem& t) {
  const Eigen::Index n = ks.size();
  const int d = static_cast<int>(ks.dim());
  KnotSystem out;
  out.knots = Points::Zero(n, d);
  out.momenta = Points::Zero(n, d);
  std::vector<double> r(static_cast<std::size_t>(d)), dr(static_cast<std::size_t>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0.0, rdr = 0.0, w = 0.0, dw = 0.0, gdr = 0.0;
      for (int c = 0; c < d; ++c) {
        r[c] = ks.knots(i, c) - ks.knots(j, c);
        dr[c] = t.knots(i, c) - t.knots(j, c);
        s += r[c] * r[c];
        rdr += r[c] * dr[c];
        w += ks.momenta(i, c) * ks.momenta(j, c);
        dw += t.momenta(i, c) * ks.momenta(j, c) + ks.momenta(i, c) * t.momenta(j, c);
      }
      RadialProfile p = kernel.profile(s);
      gdr = 2.0 * p.d1 * rdr;  // grad g . dr
      for (int c = 0; c < d; ++c) {
        out.knots(i, c) += t.momenta(j, c) * p.value + ks.momenta(j, c) * gdr;
        double g = 2.0 * p.d1 * r[c];
        double hdr = 2.0 * p.d1 * dr[c] + 4.0 * p.d2 * r[c] * rdr;
        out.momenta(i, c) -= dw * g + w * hdr;
      }
    }
  }
  return out;
}

// Tangent of (x, ell) RHS for all particles.
inline void particle_jvp(const RadialKernel& kernel, const KnotSystem& ks, const KnotSystem& tk, const Points& x,
                         const Points& dx, Points& out_x, Vector& out_ell) {
  const int d = kernel.dim();
  const Eigen::Index nk = ks.size();
  out_x.setZero(x.rows(), d);
  out_ell.setZero(x.rows());
  parallel_chunks(static_cast<std::size_t>(x.rows()), [&](std::size_t b, std::size_t e, std::size_t) {
    std::vector<double> r(static_cast<std::size_t>(d)), dr(static_cast<std::size_t>(d));
    for (auto k = static_cast<Eigen::Index>(b); k < static_cast<Eigen::Index>(e); ++k) {
      for (Eigen::Index j = 0; j < nk; ++j) {
        double s = 0.0, rdr = 0.0;
        for (int c = 0; c < d; ++c) {
          r[c] = x(k, c) - ks.knots(j, c);
          dr[c] = dx(k, c) - tk.knots(j, c);
          s += r[c] * r[c];
          rdr += r[c] * dr[c];
        }
        RadialProfile p = kernel.profile(s);
        const double gdr = 2.0 * p.d1 * rdr;
        double dl = 0.0;
        for (int c = 0; c < d; ++c) {
          out_x(k, c) += tk.momenta(j, c) * p.value + ks.momenta(j, c) * gdr;
          double g = 2.0 * p.d1 * r[c];
          double hdr = 2.0 * p.d1 * dr[c] + 4.0 * p.d2 * r[c] * rdr;
          dl += tk.momenta(j, c) * g + ks.momenta(j, c) * hdr;
        }
        out_ell(k) += dl;
      }
    }
  });
}

inline Points particle_velocity(const RadialKernel& kernel, const KnotSystem& ks, const Points& x) {
  ParticleBuffers in, out;
  TransportOptions opt{false, false, false, false, false};
  in.x = x;
  out.x = Points::Zero(x.rows(), x.cols());
  parallel_rhs(kernel, ks, in, out, opt);
  return out.x;
}

}  // namespace detail

/// Directional derivative of the discrete RK4 flow with respect to the
/// initial (momenta, knots), integrated alongside the primal state.
inline SensitivityResult sensitivity(const RadialKernel& kernel, const KnotSystem& initial, const Points& particles,
                                     const TimeGrid& grid, const Perturbation& seed) {
  grid.validate();
  initial.validate();
  if (seed.d_momenta.rows() != initial.size() || seed.d_momenta.cols() != initial.dim() ||
      seed.d_knots.rows() != initial.size() || seed.d_knots.cols() != initial.dim())
    throw ArgumentError("perturbation shape does not match the knot system");
  const int d = kernel.dim();
  const Eigen::Index n = particles.rows();
  const double h = grid.step();
  KnotPath path = integrate_knots(kernel, initial, grid);

  KnotSystem dz{seed.d_knots, seed.d_momenta};
  Points x = particles;
  Points dx = Points::Zero(n, d);
  Vector dl = Vector::Zero(n);

  SensitivityResult res;
  res.d_knot_path.push_back(dz.knots);
  res.d_momentum_path.push_back(dz.momenta);
  Points vx[4], tx[4];
  Vector tl[4];
  for (int s = 0; s < grid.steps; ++s) {
    const auto& st = path.stages[static_cast<std::size_t>(s)];
    // primal stage positions and their tangents
    Points xs = x;
    Points dxs = dx;
    KnotSystem dzs = dz;
    KnotSystem dk[4];
    const double coef[4] = {0.5 * h, 0.5 * h, h, 0.0};
    for (int q = 0; q < 4; ++q) {
      dk[q] = detail::knot_jvp(kernel, st[q], dzs);
      vx[q] = detail::particle_velocity(kernel, st[q], xs);
      detail::particle_jvp(kernel, st[q], dzs, xs, dxs, tx[q], tl[q]);
      if (q < 3) {
        xs = x + coef[q] * vx[q];
        dxs = dx + coef[q] * tx[q];
        dzs = axpy(dz, coef[q], dk[q]);
      }
    }
    x += (h / 6.0) * (vx[0] + 2.0 * vx[1] + 2.0 * vx[2] + vx[3]);
    dx += (h / 6.0) * (tx[0] + 2.0 * tx[1] + 2.0 * tx[2] + tx[3]);
    dl += (h / 6.0) * (tl[0] + 2.0 * tl[1] + 2.0 * tl[2] + tl[3]);
    dz.knots += (h / 6.0) * (dk[0].knots + 2.0 * dk[1].knots + 2.0 * dk[2].knots + dk[3].knots);
    dz.momenta += (h / 6.0) * (dk[0].momenta + 2.0 * dk[1].momenta + 2.0 * dk[2].momenta + dk[3].momenta);
    if (!all_finite(dx) || !finite(dz)) throw DivergenceError("sensitivity state diverged", s + 1);
    res.d_knot_path.push_back(dz.knots);
    res.d_momentum_path.push_back(dz.momenta);
  }
  res.d_positions = dx;
  res.d_logdets = dl;
  return res;
}

// --- adjoint ----------------------------------------------------------------

struct KnotGradient {
  Points d_knots;
  Points d_momenta;
};

namespace detail {

// b += J_F(ks)^T c for the knot block, one knot i against all j:
//   b_eta_i   += sum_j g_ij c_kappa_j - sum_j eta_j [(c_eta_i - c_eta_j) . grad g_ij]
//   b_kappa_i += sum_j [(c_kappa_i . eta_j) + (c_kappa_j . eta_i)] grad g_ij
//                - sum_j (eta_i . eta_j) Hess g_ij (c_eta_i - c_eta_j)
inline void knot_vjp(const RadialKernel& kernel, const KnotSystem& ks, const KnotSystem& c, KnotSystem& b) {
  const Eigen::Index n = ks.size();
  if (n == 0) return;
  const int d = static_cast<int>(ks.dim());
  const KnotColumns kc(ks);
  const Matrix ck = c.knots, ce = c.momenta;
  Sweep sw;
  Eigen::ArrayXd g1, g2, u, t, coef, w;
  for (Eigen::Index i = 0; i < n; ++i) {
    sw.run(kernel, kc, ks.knots.row(i).data(), 2);
    g1 = 2.0 * sw.d1;
    g2 = 4.0 * sw.d2;
    u = (c.momenta(i, 0) - ce.col(0).array()) * sw.r.col(0);
    for (int a = 1; a < d; ++a) u += (c.momenta(i, a) - ce.col(a).array()) * sw.r.col(a);
    t = g1 * u;
    coef = (kc.e * c.knots.row(i).transpose() + ck * ks.momenta.row(i).transpose()).array() * g1;
    w = (kc.e * ks.momenta.row(i).transpose()).array();
    for (int a = 0; a < d; ++a) {
      b.momenta(i, a) += (sw.v * ck.col(a).array()).sum() - (kc.e.col(a).array() * t).sum();
      b.knots(i, a) += (coef * sw.r.col(a)).sum() -
                       (w * (g1 * (c.momenta(i, a) - ce.col(a).array()) + g2 * sw.r.col(a) * u)).sum();
    }
  }
}

// Particle block: returns b_x and accumulates (b_kappa, b_eta).
inline void particle_vjp(const RadialKernel& kernel, const KnotSystem& ks, const Points& x, const Points& cx,
                         const Vector& cl, Points& bx, KnotSystem& b) {
  const int d = kernel.dim();
  const Eigen::Index nk = ks.size();
  bx.setZero(x.rows(), d);
  if (nk == 0) return;
  const KnotColumns kc(ks);
  const std::size_t chunks = chunk_count(static_cast<std::size_t>(x.rows()));
  std::vector<Matrix> part_k(chunks, Matrix::Zero(nk, d)), part_e(chunks, Matrix::Zero(nk, d));
  parallel_chunks(static_cast<std::size_t>(x.rows()), [&](std::size_t lo, std::size_t hi, std::size_t ci) {
    Matrix& pk = part_k[ci];
    Matrix& pe = part_e[ci];
    Sweep sw;
    Eigen::ArrayXd g1, g2, sx, re, ua;
    for (auto k = static_cast<Eigen::Index>(lo); k < static_cast<Eigen::Index>(hi); ++k) {
      const double ck = cl.size() ? cl(k) : 0.0;
      sw.run(kernel, kc, x.row(k).data(), 2);
      g1 = 2.0 * sw.d1;
      g2 = 4.0 * sw.d2;
      sx = (kc.e * cx.row(k).transpose()).array();
      re = sw.r.col(0) * kc.e.col(0).array();
      for (int a = 1; a < d; ++a) re += sw.r.col(a) * kc.e.col(a).array();
      for (int a = 0; a < d; ++a) {
        pe.col(a).array() += cx(k, a) * sw.v + ck * g1 * sw.r.col(a);
        ua = sx * g1 * sw.r.col(a) + ck * (g1 * kc.e.col(a).array() + g2 * sw.r.col(a) * re);
        bx(k, a) = ua.sum();
        pk.col(a).array() -= ua;
      }
    }
  });
  for (std::size_t c = 0; c < chunks; ++c) {
    b.knots += part_k[c];
    b.momenta += part_e[c];
  }
}

}  // namespace detail

/// Gradient of L = sum_k [cot_x_k . X_k(1) + cot_logdet_k ell_k(1)] with respect
/// to the initial knot state, by reverse-mode differentiation of the RK4
/// scheme. `flow` must come from transport(..., keep_stages = true).
inline KnotGradient pullback(const RadialKernel& kernel, const KnotPath& path, const ParticleFlow& flow,
                             const Points& cot_x, const Vector& cot_logdet) {
  const int steps = path.grid.steps;
  const double h = (path.grid.end - path.grid.begin) / steps;
  const Eigen::Index nk = path.initial().size();
  const int d = kernel.dim();
  if (static_cast<int>(flow.stage_positions.size()) != steps)
    throw ArgumentError("pullback requires stage positions from transport");

  KnotSystem a;  // cotangent of the knot state
  a.knots = Points::Zero(nk, d);
  a.momenta = Points::Zero(nk, d);
  Points ax = cot_x;
  const Vector& al = cot_logdet;  // constant: nothing depends on ell

  KnotSystem c, bsum, bq;
  Points cx, bx, bx_sum;
  for (int s = steps - 1; s >= 0; --s) {
    const auto& st = path.stages[static_cast<std::size_t>(s)];
    const auto& sx = flow.stage_positions[static_cast<std::size_t>(s)];
    bsum.knots = Points::Zero(nk, d);
    bsum.momenta = Points::Zero(nk, d);
    bx_sum = Points::Zero(ax.rows(), d);
    const double wa[4] = {h / 6.0, h / 3.0, h / 3.0, h / 6.0};
    const double wb[4] = {0.5 * h, 0.5 * h, h, 0.0};  // stage q+1 = z + wb[q] k_q
    KnotSystem prev_b;
    Points prev_bx;
    for (int q = 3; q >= 0; --q) {
      c.knots = wa[q] * a.knots;
      c.momenta = wa[q] * a.momenta;
      cx = wa[q] * ax;
      Vector cl = wa[q] * al;
      if (q < 3) {
        c.knots += wb[q] * prev_b.knots;
        c.momenta += wb[q] * prev_b.momenta;
        cx += wb[q] * prev_bx;
      }
      bq.knots = Points::Zero(nk, d);
      bq.momenta = Points::Zero(nk, d);
      detail::knot_vjp(kernel, st[static_cast<std::size_t>(q)], c, bq);
      detail::particle_vjp(kernel, st[static_cast<std::size_t>(q)], sx[static_cast<std::size_t>(q)], cx, cl, bx, bq);
      bsum.knots += bq.knots;
      bsum.momenta += bq.momenta;
      bx_sum += bx;
      prev_b = bq;
      prev_bx = bx;
    }
    a.knots += bsum.knots;
    a.momenta += bsum.momenta;
    ax += bx_sum;
  }
  return {a.knots, a.momenta};
}

}  // namespace flowdense
