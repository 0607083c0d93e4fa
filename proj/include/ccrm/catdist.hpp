#pragma once

// Maps between theta = (pi, b) and the raw moments of beta.
//
// The inverse runs the classical route for finite mixtures: the K support
// points are the roots of the characteristic polynomial of the linear
// recurrence satisfied by the moment sequence, and the weights then solve a
// Vandermonde system. A few Newton steps on the square system
// sum_k pi_k b_k^r = m_r, r = 0..2K-1, polish the algebraic answer.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "ccrm/core.hpp"

namespace ccrm::catdist {

inline constexpr double kVarianceTolerance = 1e-10;
inline constexpr double kImaginaryTolerance = 1e-6;
inline constexpr double kProbabilitySlack = 1e-8;
inline constexpr double kHankelRcondTolerance = 1e-13;

/// (sum_k pi_k b_k^r)_{r=1..R}
inline Vector forward_moments(const CategoricalDistribution& theta, int R) {
  if (R < 1) throw Error(ErrorCode::invalid_argument, "forward_moments needs R >= 1");
  Vector out = Vector::Zero(R);
  const auto& pi = theta.pi();
  const auto& b = theta.b();
  for (int k = 0; k < theta.K(); ++k) {
    double p = 1.0;
    for (int r = 0; r < R; ++r) {
      p *= b[k];
      out[r] += pi[k] * p;
    }
  }
  return out;
}

/// Prepends m_0 = 1.
inline Vector with_unit_moment(const Vector& m) {
  Vector full(m.size() + 1);
  full[0] = 1.0;
  full.tail(m.size()) = m;
  return full;
}

/// K x K Hankel matrix [m_{i+j}], i, j = 0..K-1, with m_0 = 1.
inline Matrix hankel_matrix(const Vector& m, int K) {
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  if (m.size() < 2 * K - 2) {
    throw Error(ErrorCode::dimension_mismatch, "Hankel matrix of order " + std::to_string(K) + " needs m_1..m_" +
                                                   std::to_string(2 * K - 2));
  }
  const Vector full = with_unit_moment(m);
  Matrix h(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) h(i, j) = full[i + j];
  return h;
}

inline double hankel_det(const Vector& m, int K) { return hankel_matrix(m, K).determinant(); }

/// Solves V' pi = rhs where V(r, k) = b_k^r, r = 0..K-1 (Bjorck-Pereyra).
inline Vector vandermonde_solve(const Vector& b, const Vector& rhs) {
  const auto k = b.size();
  if (rhs.size() != k) throw Error(ErrorCode::dimension_mismatch, "Vandermonde system size mismatch");
  Vector a = rhs;
  for (Eigen::Index j = 0; j + 1 < k; ++j) {
    for (Eigen::Index i = k - 1; i > j; --i) a[i] -= b[j] * a[i - 1];
  }
  for (Eigen::Index j = k - 2; j >= 0; --j) {
    for (Eigen::Index i = j + 1; i < k; ++i) {
      const double gap = b[i] - b[i - j - 1];
      if (gap == 0.0) throw Error(ErrorCode::degenerate_support, "repeated support point in Vandermonde solve");
      a[i] /= gap;
    }
    for (Eigen::Index i = j; i + 1 < k; ++i) a[i] -= a[i + 1];
  }
  return a;
}

/// Closed form for two categories.
struct K2Inversion {
  CategoricalDistribution theta;
  /// (b_2 - b_1)^2 as computed from the moments.
  double discriminant;
};

inline K2Inversion invert_k2_detail(const Vector& m) {
  if (m.size() != 3) throw Error(ErrorCode::dimension_mismatch, "two-category inversion needs (m1, m2, m3)");
  const double m1 = m[0], m2 = m[1], m3 = m[2];
  const double var = m2 - m1 * m1;
  if (!(var > kVarianceTolerance)) {
    throw Error(ErrorCode::homogeneity, "var(beta) = " + std::to_string(var) +
                                            " is not positive; pi is not identified");
  }
  const double sum = (m3 - m1 * m2) / var;       // b_L + b_H
  const double prod = (m1 * m3 - m2 * m2) / var;  // b_L b_H
  const double disc = sum * sum - 4.0 * prod;
  if (!(disc > kVarianceTolerance)) {
    throw Error(ErrorCode::degenerate_support, "discriminant " + std::to_string(disc) + " is not positive");
  }
  const double root = std::sqrt(disc);
  const double lo = 0.5 * (sum - root);
  const double hi = 0.5 * (sum + root);
  const double pi_lo = (hi - m1) / (hi - lo);
  if (!(pi_lo > 0.0 && pi_lo < 1.0)) {
    throw Error(ErrorCode::infeasible_moments, "implied pi = " + std::to_string(pi_lo) + " is outside (0,1)");
  }
  Vector pi(2), b(2);
  pi << pi_lo, 1.0 - pi_lo;
  b << lo, hi;
  return {CategoricalDistribution(pi, b), disc};
}

inline CategoricalDistribution invert_k2(const Vector& m) { return invert_k2_detail(m).theta; }

namespace detail {

// Newton refinement of sum_k pi_k b_k^r = m_r, r = 0..2K-1 (square system).
inline void polish(Vector& pi, Vector& b, const Vector& full_moments) {
  const auto K = pi.size();
  const int rows = static_cast<int>(2 * K);
  for (int iter = 0; iter < 6; ++iter) {
    Vector resid(rows);
    Matrix jac(rows, 2 * K);
    for (int r = 0; r < rows; ++r) {
      double fit = 0.0;
      for (Eigen::Index k = 0; k < K; ++k) {
        const double br = ipow(b[k], r);
        fit += pi[k] * br;
        jac(r, k) = br;
        jac(r, K + k) = r == 0 ? 0.0 : pi[k] * r * ipow(b[k], r - 1);
      }
      resid[r] = full_moments[r] - fit;
    }
    Eigen::FullPivLU<Matrix> lu(jac);
    if (!lu.isInvertible()) return;
    const Vector step = lu.solve(resid);
    if (!step.allFinite()) return;
    pi += step.head(K);
    b += step.tail(K);
    if (step.norm() <= 1e-15 * (1.0 + b.norm())) return;
  }
}

}  // namespace detail

/// General-K inversion: recurrence coefficients from the Hankel system, support
/// from the companion-matrix eigenvalues, weights from the Vandermonde system.
inline CategoricalDistribution invert_general(const Vector& m, int K) {
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  if (m.size() != 2 * K - 1) {
    throw Error(ErrorCode::dimension_mismatch, "inversion with K=" + std::to_string(K) + " needs " +
                                                   std::to_string(2 * K - 1) + " moments");
  }
  if (!m.allFinite()) throw Error(ErrorCode::invalid_argument, "moments must be finite");
  if (K == 1) return CategoricalDistribution::point_mass(m[0]);

  const Vector full = with_unit_moment(m);
  const Matrix hankel = hankel_matrix(m, K);
  Eigen::JacobiSVD<Matrix> svd(hankel);
  const auto& sv = svd.singularValues();
  if (!(sv[K - 1] > kHankelRcondTolerance * sv[0])) {
    throw Error(ErrorCode::reduced_rank, "Hankel moment matrix is numerically singular; the moments are "
                                         "consistent with fewer than " + std::to_string(K) +
                                             " categories, try a smaller K");
  }
  // lambda^K = sum_i a_i lambda^i holds at every support point, hence
  // sum_i a_i m_{i+j} = m_{K+j} for j = 0..K-1.
  Vector rhs(K);
  for (int j = 0; j < K; ++j) rhs[j] = full[K + j];
  const Vector a = hankel.partialPivLu().solve(rhs);

  Matrix companion = Matrix::Zero(K, K);
  for (int i = 1; i < K; ++i) companion(i, i - 1) = 1.0;
  for (int i = 0; i < K; ++i) companion(i, K - 1) = a[i];
  Eigen::EigenSolver<Matrix> es(companion, false);
  const auto roots = es.eigenvalues();
  std::vector<double> support;
  support.reserve(K);
  for (int k = 0; k < K; ++k) {
    const std::complex<double> z = roots[k];
    if (std::abs(z.imag()) > kImaginaryTolerance * std::max(std::abs(z), 1.0)) {
      throw Error(ErrorCode::non_real_support, "characteristic polynomial has a complex root " +
                                                   std::to_string(z.real()) + (z.imag() < 0 ? "" : "+") +
                                                   std::to_string(z.imag()) + "i");
    }
    support.push_back(z.real());
  }
  std::sort(support.begin(), support.end());
  Vector b = Eigen::Map<Vector>(support.data(), K);
  for (int k = 0; k + 1 < K; ++k) {
    if (!(b[k + 1] - b[k] > kSupportGapTolerance)) {
      throw Error(ErrorCode::degenerate_support, "characteristic polynomial has a repeated root");
    }
  }
  Vector pi = vandermonde_solve(b, full.head(K));
  detail::polish(pi, b, full);

  for (int k = 0; k < K; ++k) {
    if (!(pi[k] > -kProbabilitySlack && pi[k] < 1.0 + kProbabilitySlack)) {
      throw Error(ErrorCode::infeasible_moments, "implied pi_" + std::to_string(k + 1) + " = " +
                                                     std::to_string(pi[k]) + " is outside (0,1)");
    }
    if (!(pi[k] > 0.0)) {
      throw Error(ErrorCode::infeasible_moments, "implied pi_" + std::to_string(k + 1) + " is zero");
    }
  }
  for (int k = 0; k + 1 < K; ++k) {
    if (!(b[k + 1] - b[k] > kSupportGapTolerance)) {
      throw Error(ErrorCode::degenerate_support, "support points collapsed during refinement");
    }
  }
  const double total = pi.sum();
  if (std::abs(total - 1.0) > kProbabilitySumTolerance) pi /= total;
  return {pi, b};
}

/// Scalar inversion with the closed form for K = 2.
inline CategoricalDistribution invert(const Vector& m, int K) {
  return K == 2 ? invert_k2(m) : invert_general(m, K);
}

}  // namespace ccrm::catdist
