#pragma once

#include <Eigen/Dense>

#include <sstream>

#include "ccrm/core.hpp"

namespace ccrm::ols {

inline constexpr double kEigenFloor = 1e-10;

/// Least squares of y on the rows of W with the heteroskedasticity-robust
/// sandwich Q^{-1} V_{w xi} Q^{-1} / n. The first-stage estimator for both the
/// scalar and the multi-coefficient model.
inline PhiEstimate least_squares(const Matrix& w, const Vector& y) {
  const auto n = w.rows();
  const auto k = w.cols();
  if (y.size() != n) throw Error(ErrorCode::dimension_mismatch, "design and outcome row counts differ");
  if (n <= k) {
    throw Error(ErrorCode::invalid_argument, "need more observations (" + std::to_string(n) +
                                                 ") than regressors (" + std::to_string(k) + ")");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix gram = (w.transpose() * w) * inv_n;
  Vector cross = (w.transpose() * y) * inv_n;

  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  const double lambda_min = eig.eigenvalues().minCoeff();
  if (!(lambda_min > kEigenFloor)) {
    std::ostringstream msg;
    msg << "rank-deficient design: smallest eigenvalue of Q_ww is " << lambda_min;
    throw Error(ErrorCode::singular_design, msg.str());
  }

  Eigen::LLT<Matrix> llt(gram);
  PhiEstimate out;
  out.phi = llt.solve(cross);
  out.residuals = y - w * out.phi;
  Matrix meat = (w.array().colwise() * out.residuals.array()).matrix();
  Matrix v_wxi = (meat.transpose() * meat) * inv_n;
  Matrix q_inv = llt.solve(Matrix::Identity(k, k));
  Matrix v_phi = q_inv * v_wxi * q_inv;
  out.cov = 0.5 * (v_phi + v_phi.transpose()) * inv_n;
  out.gram = std::move(gram);
  return out;
}

/// phi-hat = Q_{n,ww}^{-1} q_{n,wy} on w_i = (x_i, z_i')'.
inline PhiEstimate estimate_phi(const RegressionSample& sample) { return least_squares(sample.design(), sample.y()); }

/// y_i - z_i' gamma
inline Vector detilde(const RegressionSample& sample, const Vector& gamma) {
  if (gamma.size() != sample.pz()) {
    throw Error(ErrorCode::dimension_mismatch, "gamma has " + std::to_string(gamma.size()) +
                                                   " entries, Z has " + std::to_string(sample.pz()) + " columns");
  }
  if (sample.pz() == 0) return sample.y();
  return sample.y() - sample.z() * gamma;
}

}  // namespace ccrm::ols
