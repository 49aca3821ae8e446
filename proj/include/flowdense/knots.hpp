#pragma once

#include "flowdense/common.hpp"

namespace flowdense {

/// N knots with one momentum vector each; the initial field is
/// v(x) = sum_k momenta_k R(x, knots_k).
struct KnotSystem {
  Points knots;
  Points momenta;

  KnotSystem() = default;
  KnotSystem(Points k, Points m) : knots(std::move(k)), momenta(std::move(m)) { validate(); }

  static KnotSystem at_rest(Points k) {
    Points m = Points::Zero(k.rows(), k.cols());
    return KnotSystem(std::move(k), std::move(m));
  }

  Eigen::Index size() const { return knots.rows(); }
  Eigen::Index dim() const { return knots.cols(); }

  void validate() const {
    if (knots.rows() != momenta.rows() || knots.cols() != momenta.cols())
      throw ArgumentError("knot and momentum arrays must have identical shapes");
    if (!all_finite(knots) || !all_finite(momenta))
      throw ArgumentError("knot system contains non-finite coordinates");
  }
};

}  // namespace flowdense
