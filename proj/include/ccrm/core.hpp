#pragma once

// Domain types shared by every stage of the estimator, plus the small integer
// and moment helpers the moment equations are built from.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccrm/error.hpp"

namespace ccrm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kProbabilitySumTolerance = 1e-12;
inline constexpr double kSupportGapTolerance = 1e-10;

/// Exact binomial coefficient r choose q. Throws on uint64 overflow.
inline std::uint64_t binomial(unsigned r, unsigned q) {
  if (q > r) {
    throw Error(ErrorCode::invalid_argument,
                "binomial requires q <= r, got r=" + std::to_string(r) + " q=" + std::to_string(q));
  }
  if (q > r - q) q = r - q;
  unsigned __int128 acc = 1;
  for (unsigned i = 1; i <= q; ++i) {
    // acc * (r - q + i) is divisible by i at every step.
    acc = acc * (r - q + i) / i;
    if (acc > std::numeric_limits<std::uint64_t>::max()) {
      throw Error(ErrorCode::overflow,
                  "binomial(" + std::to_string(r) + ", " + std::to_string(q) + ") exceeds 64 bits");
    }
  }
  return static_cast<std::uint64_t>(acc);
}

/// r! / (q_1! ... q_p!) with r = sum(q).
inline std::uint64_t multinomial(std::span<const int> exponents) {
  unsigned total = 0;
  unsigned __int128 acc = 1;
  for (int q : exponents) {
    if (q < 0) throw Error(ErrorCode::invalid_argument, "negative multinomial exponent");
    total += static_cast<unsigned>(q);
    acc *= binomial(total, static_cast<unsigned>(q));
    if (acc > std::numeric_limits<std::uint64_t>::max()) {
      throw Error(ErrorCode::overflow, "multinomial coefficient exceeds 64 bits");
    }
  }
  return static_cast<std::uint64_t>(acc);
}

/// n^{-1} sum_i v_i^r
inline double sample_moment(const Eigen::Ref<const Vector>& v, int r) {
  if (v.size() == 0) throw Error(ErrorCode::invalid_argument, "sample_moment of an empty vector");
  if (r < 0) throw Error(ErrorCode::invalid_argument, "sample_moment order must be nonnegative");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::pow(v[i], r);
  return acc / static_cast<double>(v.size());
}

/// One cross-section y_i = x_i beta_i + z_i' gamma + u_i.
class RegressionSample {
 public:
  RegressionSample(Vector y, Vector x, Matrix z) : y_(std::move(y)), x_(std::move(x)), z_(std::move(z)) {
    const auto n = y_.size();
    if (n < 1) throw Error(ErrorCode::invalid_argument, "sample needs at least one observation");
    if (x_.size() != n) {
      throw Error(ErrorCode::dimension_mismatch, "x has " + std::to_string(x_.size()) + " rows, y has " +
                                                     std::to_string(n));
    }
    if (z_.cols() > 0 && z_.rows() != n) {
      throw Error(ErrorCode::dimension_mismatch, "Z has " + std::to_string(z_.rows()) + " rows, y has " +
                                                     std::to_string(n));
    }
    if (z_.cols() == 0) z_.resize(n, 0);
    if (!y_.allFinite() || !x_.allFinite() || !z_.allFinite()) {
      throw Error(ErrorCode::invalid_argument, "sample contains non-finite values");
    }
  }

  RegressionSample(Vector y, Vector x) : RegressionSample(std::move(y), std::move(x), Matrix()) {}

  const Vector& y() const noexcept { return y_; }
  const Vector& x() const noexcept { return x_; }
  const Matrix& z() const noexcept { return z_; }
  Eigen::Index n() const noexcept { return y_.size(); }
  Eigen::Index pz() const noexcept { return z_.cols(); }

  /// w_i = (x_i, z_i')' stacked as rows.
  Matrix design() const {
    Matrix w(n(), 1 + pz());
    w.col(0) = x_;
    if (pz() > 0) w.rightCols(pz()) = z_;
    return w;
  }

 private:
  Vector y_;
  Vector x_;
  Matrix z_;
};

/// theta = (pi, b): beta takes value b_k with probability pi_k.
class CategoricalDistribution {
 public:
  CategoricalDistribution(Vector pi, Vector b) : pi_(std::move(pi)), b_(std::move(b)) {
    const auto k = pi_.size();
    if (k < 1) throw Error(ErrorCode::invalid_argument, "categorical distribution needs K >= 1");
    if (b_.size() != k) {
      throw Error(ErrorCode::dimension_mismatch, "pi has " + std::to_string(k) + " entries, b has " +
                                                     std::to_string(b_.size()));
    }
    if (!pi_.allFinite() || !b_.allFinite()) {
      throw Error(ErrorCode::invalid_argument, "categorical distribution has non-finite entries");
    }
    const double total = pi_.sum();
    if (std::abs(total - 1.0) > kProbabilitySumTolerance) {
      throw Error(ErrorCode::invalid_argument, "probabilities sum to " + std::to_string(total));
    }
    pi_ /= total;
    if (k == 1) {
      pi_[0] = 1.0;
    } else {
      for (Eigen::Index j = 0; j < k; ++j) {
        if (!(pi_[j] > 0.0 && pi_[j] < 1.0)) {
          throw Error(ErrorCode::invalid_argument, "pi_" + std::to_string(j + 1) + " = " +
                                                       std::to_string(pi_[j]) + " is outside (0,1)");
        }
      }
    }
    for (Eigen::Index j = 0; j + 1 < k; ++j) {
      if (!(b_[j + 1] - b_[j] > kSupportGapTolerance)) {
        throw Error(ErrorCode::invalid_argument, "support points must be strictly increasing (b_" +
                                                     std::to_string(j + 1) + ", b_" + std::to_string(j + 2) +
                                                     ")");
      }
    }
  }

  static CategoricalDistribution point_mass(double b) { return {Vector::Ones(1), Vector::Constant(1, b)}; }

  const Vector& pi() const noexcept { return pi_; }
  const Vector& b() const noexcept { return b_; }
  int K() const noexcept { return static_cast<int>(pi_.size()); }

  double mean() const { return pi_.dot(b_); }
  double variance() const {
    const double mu = mean();
    return pi_.dot((b_.array() - mu).square().matrix());
  }

 private:
  Vector pi_;
  Vector b_;
};

/// Raw moments m_r = E(beta^r), r = 1..2K-1, and error moments sigma_r, r = 2..2K-1.
/// The conventions sigma_0 = 1, sigma_1 = 0 and m_0 = 1 are exposed through the
/// index accessors.
struct MomentSet {
  Vector m;
  Vector sigma;
  int K = 1;

  MomentSet() = default;
  MomentSet(Vector m_in, Vector sigma_in, int k) : m(std::move(m_in)), sigma(std::move(sigma_in)), K(k) {
    if (K < 1) throw Error(ErrorCode::invalid_argument, "moment set needs K >= 1");
    if (m.size() != 2 * K - 1 || sigma.size() != 2 * K - 2) {
      throw Error(ErrorCode::dimension_mismatch, "moment set for K=" + std::to_string(K) + " needs " +
                                                     std::to_string(2 * K - 1) + " beta moments and " +
                                                     std::to_string(2 * K - 2) + " error moments");
    }
  }

  /// m_r with m_0 = 1.
  double beta_moment(int r) const { return r == 0 ? 1.0 : m[r - 1]; }
  /// sigma_r with sigma_0 = 1, sigma_1 = 0.
  double error_moment(int r) const {
    if (r == 0) return 1.0;
    if (r == 1) return 0.0;
    return sigma[r - 2];
  }

  /// Even moments nonnegative, sigma_2 >= 0 and var(beta) >= 0, each within tol.
  bool consistent(double tol = 1e-10) const {
    for (int r = 2; r <= 2 * K - 1; r += 2) {
      if (beta_moment(r) < -tol) return false;
    }
    if (K >= 2) {
      if (sigma[0] < -tol) return false;
      if (m[1] - m[0] * m[0] < -tol) return false;
    }
    return true;
  }
};

/// phi = (E(beta), gamma')' from least squares with its robust covariance.
struct PhiEstimate {
  Vector phi;
  /// Robust covariance of phi-hat, i.e. V_phi / n.
  Matrix cov;
  Vector residuals;
  /// Q_{n,ww} = n^{-1} sum w_i w_i'.
  Matrix gram;

  double mean_beta() const { return phi[0]; }
  Vector gamma() const { return phi.tail(phi.size() - 1); }
  Vector std_errors() const { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

/// Integer power for small exponents; avoids std::pow in inner loops.
inline double ipow(double base, int e) {
  double out = 1.0;
  while (e > 0) {
    if (e & 1) out *= base;
    base *= base;
    e >>= 1;
  }
  return out;
}

}  // namespace ccrm
