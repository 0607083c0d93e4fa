#pragma once

// Identification of E(beta^r) and sigma_r from the joint moments of (y~, x).
//
// For each r = 2..2K-1 the conditions with s = 0 and s = r are linear in
// (m_r, sigma_r) once lower orders are known:
//
//   rho_{0,r}  m_r + sigma_r          = rho_{r,0} - sum_{q=2}^{r-1} C(r,q) rho_{0,r-q}  sigma_q m_{r-q}
//   rho_{0,2r} m_r + rho_{0,r} sigma_r = rho_{r,r} - sum_{q=2}^{r-1} C(r,q) rho_{0,2r-q} sigma_q m_{r-q}
//
// so the orders are solved in increasing r.

#include <algorithm>
#include <cmath>
#include <string>

#include "ccrm/core.hpp"

namespace ccrm::momsolve {

inline constexpr double kDeterminantTolerance = 1e-10;

/// rho(r, s) = n^{-1} sum_i y~_i^r x_i^s.
class RhoTable {
 public:
  RhoTable() = default;
  explicit RhoTable(Matrix values) : values_(std::move(values)) {
    if (values_.rows() < 1 || values_.cols() < 1) throw Error(ErrorCode::invalid_argument, "empty rho table");
    if (!values_.allFinite()) throw Error(ErrorCode::invalid_argument, "rho table has non-finite entries");
  }

  double operator()(int r, int s) const {
    if (r < 0 || s < 0 || r >= values_.rows() || s >= values_.cols()) {
      throw Error(ErrorCode::dimension_mismatch,
                  "rho(" + std::to_string(r) + "," + std::to_string(s) + ") is outside the table");
    }
    return values_(r, s);
  }
  int max_r() const noexcept { return static_cast<int>(values_.rows()) - 1; }
  int max_s() const noexcept { return static_cast<int>(values_.cols()) - 1; }
  const Matrix& values() const noexcept { return values_; }

 private:
  Matrix values_;
};

/// Highest x-power the table must carry for a given K and stack order S.
inline int rho_columns(int K, int S) { return std::max(2 * (2 * K - 1), S); }

inline RhoTable build_rho_table(const Vector& ytilde, const Vector& x, int K, int S) {
  if (ytilde.size() != x.size()) throw Error(ErrorCode::dimension_mismatch, "y~ and x lengths differ");
  if (x.size() < 1) throw Error(ErrorCode::invalid_argument, "rho table needs at least one observation");
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  if (S <= 2 * K - 1) {
    throw Error(ErrorCode::invalid_argument, "S must exceed 2K-1 (S=" + std::to_string(S) + ")");
  }
  const int rmax = 2 * K - 1;
  const int smax = rho_columns(K, S);
  const auto n = x.size();
  Matrix table = Matrix::Zero(rmax + 1, smax + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double yr = 1.0;
    for (int r = 0; r <= rmax; ++r) {
      double term = yr;
      for (int s = 0; s <= smax; ++s) {
        table(r, s) += term;
        term *= x[i];
      }
      yr *= ytilde[i];
    }
  }
  table /= static_cast<double>(n);
  for (int r = 0; r <= rmax; ++r) {
    for (int s = 0; s <= smax; ++s) {
      if (!std::isfinite(table(r, s))) {
        throw Error(ErrorCode::overflow,
                    "rho(" + std::to_string(r) + "," + std::to_string(s) + ") is not finite");
      }
    }
  }
  return RhoTable(std::move(table));
}

struct MomentSolution {
  MomentSet moments;
  /// sigma_2 came out negative and was set to zero.
  bool sigma2_clamped = false;
  /// The solved moments violate nonnegativity of even moments or of var(beta).
  bool inconsistent = false;
};

/// Sequential solve for (m_r, sigma_r), r = 2..2K-1, with m_1 taken from the
/// first-stage least squares.
inline MomentSolution solve_moments(const RhoTable& rho, int K, double m1) {
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  const int rmax = 2 * K - 1;
  if (rho.max_r() < rmax || rho.max_s() < 2 * rmax) {
    throw Error(ErrorCode::dimension_mismatch, "rho table too small for K=" + std::to_string(K));
  }
  Vector m(rmax);
  Vector sigma = Vector::Zero(std::max(0, rmax - 1));
  m[0] = m1;
  auto beta_m = [&](int r) { return r == 0 ? 1.0 : m[r - 1]; };
  auto err_m = [&](int q) { return q == 0 ? 1.0 : (q == 1 ? 0.0 : sigma[q - 2]); };

  for (int r = 2; r <= rmax; ++r) {
    double rhs1 = rho(r, 0);
    double rhs2 = rho(r, r);
    for (int q = 2; q <= r - 1; ++q) {
      const double c = static_cast<double>(binomial(static_cast<unsigned>(r), static_cast<unsigned>(q)));
      rhs1 -= c * rho(0, r - q) * err_m(q) * beta_m(r - q);
      rhs2 -= c * rho(0, 2 * r - q) * err_m(q) * beta_m(r - q);
    }
    const double a = rho(0, r);
    const double d = rho(0, 2 * r);
    const double det = a * a - d;
    if (!(std::abs(det) > kDeterminantTolerance * std::max(std::abs(d), 1e-300))) {
      throw Error(ErrorCode::no_variation, "x^" + std::to_string(r) +
                                               " has no sample variation; the order-" + std::to_string(r) +
                                               " system is singular");
    }
    // [a 1; d a] [m; s] = [rhs1; rhs2]
    m[r - 1] = (a * rhs1 - rhs2) / det;
    sigma[r - 2] = (a * rhs2 - d * rhs1) / det;
  }

  MomentSolution out;
  out.moments = MomentSet(m, sigma, K);
  out.inconsistent = !out.moments.consistent();
  if (K >= 2 && out.moments.sigma[0] < 0.0) {
    out.moments.sigma[0] = 0.0;
    out.sigma2_clamped = true;
  }
  return out;
}

/// kappa^2 = m_1^2 / m_2; equals one exactly when beta is degenerate.
inline double kappa_squared(const MomentSet& moments) {
  if (moments.m.size() < 2) throw Error(ErrorCode::invalid_argument, "kappa^2 needs the second moment");
  const double m2 = moments.m[1];
  if (!(m2 > 0.0)) throw Error(ErrorCode::invalid_argument, "kappa^2 requires E(beta^2) > 0");
  return moments.m[0] * moments.m[0] / m2;
}

}  // namespace ccrm::momsolve
