#pragma once

// Fixtures and generators shared by the test binaries.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "ccrm/core.hpp"
#include "ccrm/rng.hpp"

namespace ccrm::testing {

/// pi_k >= 0.05 and consecutive support gaps >= 0.25 within [-2, 2.5].
inline CategoricalDistribution random_theta(rng::Engine& eng, int K) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector pi(K), b(K);
  for (int k = 0; k < K; ++k) pi[k] = 0.05 + unit(eng);
  pi /= pi.sum();
  for (;;) {
    std::vector<double> pts(K);
    for (auto& v : pts) v = -2.0 + 4.5 * unit(eng);
    std::sort(pts.begin(), pts.end());
    bool ok = true;
    for (int k = 0; k + 1 < K; ++k) ok = ok && pts[k + 1] - pts[k] >= 0.25;
    if (!ok) continue;
    for (int k = 0; k < K; ++k) b[k] = pts[k];
    break;
  }
  return {pi, b};
}

/// Exact "population" sample: every combination of an x point, an error point
/// and a category, the category repeated counts[k] times. Sample moments of
/// (y~, x) then factor exactly as the model's population moments with the
/// given x and u points as the regressor and error distributions.
struct ProductFixture {
  RegressionSample sample;
  CategoricalDistribution theta;
  Vector sigma;  // sigma_2..sigma_{2K-1} of the error points
};

inline ProductFixture product_fixture(const std::vector<double>& x_points, const std::vector<double>& u_points,
                                      const std::vector<int>& counts, const Vector& b, double intercept = 0.25) {
  const int K = static_cast<int>(counts.size());
  int total = 0;
  for (int c : counts) total += c;
  const auto n = static_cast<Eigen::Index>(x_points.size() * u_points.size() * static_cast<std::size_t>(total));
  Vector y(n), x(n);
  Matrix z = Matrix::Ones(n, 1);
  Eigen::Index i = 0;
  for (double xv : x_points)
    for (double uv : u_points)
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < counts[k]; ++c) {
          x[i] = xv;
          y[i] = xv * b[k] + intercept + uv;
          ++i;
        }
  Vector pi(K);
  for (int k = 0; k < K; ++k) pi[k] = static_cast<double>(counts[k]) / total;
  Vector sigma(std::max(0, 2 * K - 2));
  for (int r = 2; r <= 2 * K - 1; ++r) {
    double acc = 0.0;
    for (double uv : u_points) acc += ipow(uv, r);
    sigma[r - 2] = acc / static_cast<double>(u_points.size());
  }
  return {RegressionSample(y, x, z), CategoricalDistribution(pi, b), sigma};
}

/// Mean-zero, skewed error points.
inline std::vector<double> skewed_errors() { return {-1.2, -0.7, -0.2, 0.3, 1.8}; }

/// Skewed regressor points with enough distinct values for order-6 moments.
inline std::vector<double> regressor_points() { return {-1.0, -0.6, -0.3, 0.1, 0.5, 1.2, 2.0, 3.1}; }

}  // namespace ccrm::testing
