#pragma once

// Radial reproducing kernels R(x, y) = psi(|x - y|^2) with closed-form
// spatial derivatives, Gram matrices and RKHS inner products of kernel
// sections. The vector-valued RKHS uses K(x, y) = R(x, y) I.

#include <string>
#include <string_view>

#include "flowdense/common.hpp"
#include "flowdense/knots.hpp"

namespace flowdense {

enum class KernelFamily { gaussian };

inline KernelFamily parse_kernel_family(std::string_view name) {
  if (name == "gaussian") return KernelFamily::gaussian;
  throw ArgumentError("unknown kernel family '" + std::string(name) + "'");
}

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::gaussian:
      return "gaussian";
  }
  return "unknown";
}

/// psi and its first two derivatives in s = |x - y|^2.
struct RadialProfile {
  double value;
  double d1;
  double d2;
};

class RadialKernel {
 public:
  RadialKernel(KernelFamily family, double sigma, int dim)
      : family_(family), sigma_(sigma), dim_(dim) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ArgumentError("kernel bandwidth must be positive");
    if (dim < 1) throw ArgumentError("kernel dimension must be at least 1");
    inv_two_sigma_sq_ = 1.0 / (2.0 * sigma * sigma);
  }

  static RadialKernel gaussian(double sigma, int dim = 1) {
    return RadialKernel(KernelFamily::gaussian, sigma, dim);
  }

  KernelFamily family() const { return family_; }
  double sigma() const { return sigma_; }
  int dim() const { return dim_; }

  RadialProfile profile(double s) const {
    switch (family_) {
      case KernelFamily::gaussian: {
        double v = std::exp(-s * inv_two_sigma_sq_);
        return {v, -v * inv_two_sigma_sq_, v * inv_two_sigma_sq_ * inv_two_sigma_sq_};
      }
    }
    return {0.0, 0.0, 0.0};
  }

  double value_raw(const double* x, const double* y) const {
    return profile(sqdist(x, y)).value;
  }

  /// profile() applied elementwise; d1/d2 are skipped when `order` is lower.
  void profile_array(const Eigen::ArrayXd& s, Eigen::ArrayXd& v, Eigen::ArrayXd& d1, Eigen::ArrayXd& d2,
                     int order = 2) const {
    switch (family_) {
      case KernelFamily::gaussian:
        v = (-inv_two_sigma_sq_ * s).exp();
        if (order >= 1) d1 = -inv_two_sigma_sq_ * v;
        if (order >= 2) d2 = (inv_two_sigma_sq_ * inv_two_sigma_sq_) * v;
        return;
    }
  }

  /// R(x, y) evaluated in extended precision.
  long double value_extended(const double* x, const double* y) const {
    long double s = 0.0L;
    for (int c = 0; c < dim_; ++c) {
      long double r = static_cast<long double>(x[c]) - y[c];
      s += r * r;
    }
    switch (family_) {
      case KernelFamily::gaussian:
        return std::exp(-s / (2.0L * sigma_ * sigma_));
    }
    return 0.0L;
  }

  double eval(const Vector& x, const Vector& y) const {
    check(x, y);
    return value_raw(x.data(), y.data());
  }

  /// Gradient in the second argument; equals -grad_x for radial kernels.
  Vector grad_y(const Vector& x, const Vector& y) const {
    check(x, y);
    RadialProfile p = profile(sqdist(x.data(), y.data()));
    return -2.0 * p.d1 * (x - y);
  }

  Vector grad_x(const Vector& x, const Vector& y) const { return -grad_y(x, y); }

  /// H_ij = d^2 R / dx_i dx_j.
  Matrix hess_xx(const Vector& x, const Vector& y) const {
    check(x, y);
    Vector r = x - y;
    RadialProfile p = profile(r.squaredNorm());
    Matrix h = 4.0 * p.d2 * r * r.transpose();
    h.diagonal().array() += 2.0 * p.d1;
    return h;
  }

  /// C_ij = d^2 R / dx_i dy_j.
  Matrix cross_hessian(const Vector& x, const Vector& y) const { return -hess_xx(x, y); }

  double sqdist(const double* x, const double* y) const {
    double s = 0.0;
    for (int c = 0; c < dim_; ++c) {
      double r = x[c] - y[c];
      s += r * r;
    }
    return s;
  }

 private:
  void check(const Vector& x, const Vector& y) const {
    if (x.size() != dim_ || y.size() != dim_)
      throw ArgumentError("point dimension does not match kernel dimension " + std::to_string(dim_));
  }

  KernelFamily family_;
  double sigma_;
  int dim_;
  double inv_two_sigma_sq_ = 0.5;
};

inline Matrix symmetrized(const Matrix& g) { return 0.5 * (g + g.transpose()); }

inline Matrix gram(const RadialKernel& kernel, const Points& points) {
  if (points.rows() > 0 && points.cols() != kernel.dim())
    throw ArgumentError("gram: point dimension mismatch");
  const Eigen::Index n = points.rows();
  Matrix g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i, i) = kernel.value_raw(points.row(i).data(), points.row(i).data());
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double v = kernel.value_raw(points.row(i).data(), points.row(j).data());
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

/// ||v||_V^2 for v = sum_k eta_k R(., kappa_k), i.e. eta^T (G (x) I) eta.
/// Near-coincident knots carry large cancelling momenta, so the quadratic
/// form is accumulated in extended precision.
inline double rkhs_norm_sq(const RadialKernel& kernel, const KnotSystem& ks) {
  if (ks.knots.rows() != ks.momenta.rows()) throw ArgumentError("knot/momentum count mismatch");
  const Eigen::Index n = ks.size();
  const long double diag = kernel.profile(0.0).value;
  long double total = 0.0L;
  for (Eigen::Index i = 0; i < n; ++i) {
    long double self = 0.0L;
    for (Eigen::Index c = 0; c < ks.dim(); ++c) self += static_cast<long double>(ks.momenta(i, c)) * ks.momenta(i, c);
    total += diag * self;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      long double w = 0.0L;
      for (Eigen::Index c = 0; c < ks.dim(); ++c) w += static_cast<long double>(ks.momenta(i, c)) * ks.momenta(j, c);
      total += 2.0L * kernel.value_extended(ks.knots.row(i).data(), ks.knots.row(j).data()) * w;
    }
  }
  return std::max(0.0, static_cast<double>(total));
}

// --- kernel sections ---------------------------------------------------

enum class SectionKind { value, gradient };

inline SectionKind parse_section_kind(std::string_view name) {
  if (name == "value") return SectionKind::value;
  if (name == "gradient") return SectionKind::gradient;
  throw ArgumentError("unknown section kind '" + std::string(name) + "'");
}

/// Scalar kernel section: R(., point) for value, d/dy_j R(., y)|_{y=point}
/// for gradient with j = component.
struct Section {
  Vector point;
  SectionKind kind = SectionKind::value;
  int component = 0;

  static Section value_at(Vector p) { return {std::move(p), SectionKind::value, 0}; }
  static Section gradient_at(Vector p, int j) { return {std::move(p), SectionKind::gradient, j}; }
};

/// <s_a, s_b> in the scalar RKHS of R.
inline double section_inner(const RadialKernel& kernel, const Section& a, const Section& b) {
  if (a.kind == SectionKind::value && b.kind == SectionKind::value) return kernel.eval(a.point, b.point);
  if (a.kind == SectionKind::value && b.kind == SectionKind::gradient)
    return kernel.grad_y(a.point, b.point)(b.component);
  if (a.kind == SectionKind::gradient && b.kind == SectionKind::value)
    return kernel.grad_y(b.point, a.point)(a.component);
  return kernel.cross_hessian(a.point, b.point)(a.component, b.component);
}

inline Matrix section_inner_products(const RadialKernel& kernel, const std::vector<Section>& sections) {
  const auto n = static_cast<Eigen::Index>(sections.size());
  for (const auto& s : sections) {
    if (s.point.size() != kernel.dim()) throw ArgumentError("section point dimension mismatch");
    if (s.component < 0 || s.component >= kernel.dim()) throw ArgumentError("section component out of range");
  }
  Matrix g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      double v = section_inner(kernel, sections[static_cast<std::size_t>(i)], sections[static_cast<std::size_t>(j)]);
      g(i, j) = v;
      g(j, i) = v;
    }
  return g;
}

/// Value of section s at x, and its x-gradient.
inline double section_value(const RadialKernel& kernel, const Section& s, const Vector& x) {
  if (s.kind == SectionKind::value) return kernel.eval(x, s.point);
  return kernel.grad_y(x, s.point)(s.component);
}

inline Vector section_gradient(const RadialKernel& kernel, const Section& s, const Vector& x) {
  if (s.kind == SectionKind::value) return kernel.grad_x(x, s.point);
  return kernel.cross_hessian(x, s.point).col(s.component);
}

/// Vector field u(x) = sum_s coeffs.row(s)^T section_s(x).
struct SectionField {
  std::vector<Section> sections;
  Points coeffs;  // |sections| x d

  Vector eval(const RadialKernel& kernel, const Vector& x) const {
    Vector u = Vector::Zero(kernel.dim());
    for (std::size_t s = 0; s < sections.size(); ++s)
      u += section_value(kernel, sections[s], x) * coeffs.row(static_cast<Eigen::Index>(s)).transpose();
    return u;
  }

  double divergence(const RadialKernel& kernel, const Vector& x) const {
    double div = 0.0;
    for (std::size_t s = 0; s < sections.size(); ++s)
      div += section_gradient(kernel, sections[s], x).dot(coeffs.row(static_cast<Eigen::Index>(s)).transpose());
    return div;
  }
};

/// <u, w>_V for two section fields; components decouple because K = R I.
inline double field_inner(const RadialKernel& kernel, const SectionField& u, const SectionField& w) {
  double total = 0.0;
  for (std::size_t a = 0; a < u.sections.size(); ++a)
    for (std::size_t b = 0; b < w.sections.size(); ++b) {
      double ip = section_inner(kernel, u.sections[a], w.sections[b]);
      total += ip * u.coeffs.row(static_cast<Eigen::Index>(a)).dot(w.coeffs.row(static_cast<Eigen::Index>(b)));
    }
  return total;
}

/// ||u||_V^2 through one Gram matrix over the field's sections.
inline double field_norm_sq(const RadialKernel& kernel, const SectionField& u) {
  if (u.sections.empty()) return 0.0;
  Matrix g = section_inner_products(kernel, u.sections);
  Matrix c = u.coeffs;
  return std::max(0.0, (c.transpose() * g * c).trace());
}

inline SectionField as_section_field(const KnotSystem& ks) {
  SectionField f;
  f.sections.reserve(static_cast<std::size_t>(ks.size()));
  for (Eigen::Index i = 0; i < ks.size(); ++i) f.sections.push_back(Section::value_at(ks.knots.row(i).transpose()));
  f.coeffs = ks.momenta;
  return f;
}

}  // namespace flowdense
