#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace flowdense {

/// n points in R^d, one point per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the integrated state stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int node)
      : std::runtime_error(what + " (first non-finite node " + std::to_string(node) + ")"),
        node_(node) {}
  int node() const { return node_; }

 private:
  int node_;
};

class DegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedDimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool all_finite(const double* p, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

inline bool all_finite(const Points& p) {
  return all_finite(p.data(), static_cast<std::size_t>(p.size()));
}

/// Thread cap, read from FLOWDENSE_THREADS (default: hardware concurrency).
inline unsigned thread_count() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FLOWDENSE_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) return std::min(hw, static_cast<unsigned>(cap));
  }
  return hw;
}

/// Runs body(chunk_begin, chunk_end, chunk_index) over fixed-size chunks of
/// [0, count). Chunk boundaries do not depend on the thread count, so callers
/// that reduce per-chunk partials in chunk order get identical results for
/// any FLOWDENSE_THREADS setting.
inline std::size_t chunk_count(std::size_t count, std::size_t chunk = 64) {
  return (count + chunk - 1) / chunk;
}

inline void parallel_chunks(std::size_t count,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& body,
                            std::size_t chunk = 64) {
  const std::size_t chunks = chunk_count(count, chunk);
  if (chunks == 0) return;
  const unsigned threads = std::min<unsigned>(thread_count(), static_cast<unsigned>(chunks));
  auto run = [&](std::size_t c) {
    std::size_t b = c * chunk;
    body(b, std::min(count, b + chunk), c);
  };
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < chunks; c += threads) run(c);
    });
  }
  for (auto& th : pool) th.join();
}

inline Points as_points(const std::vector<double>& values) {
  Points p(static_cast<Eigen::Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) p(static_cast<Eigen::Index>(i), 0) = values[i];
  return p;
}

/// Sample standard deviation (1/n) pooled over coordinates.
inline double data_scale(const Points& data) {
  if (data.rows() == 0) return 1.0;
  double s = 0.0;
  for (Eigen::Index c = 0; c < data.cols(); ++c) {
    double mean = data.col(c).mean();
    s += (data.col(c).array() - mean).square().mean();
  }
  s = std::sqrt(s / static_cast<double>(data.cols()));
  return s > 0.0 ? s : 1.0;
}

}  // namespace flowdense
