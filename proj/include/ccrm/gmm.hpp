#pragma once

// Two-step iterated GMM for the distribution of a categorical random slope.
//
// Each condition (r, s) of the stack is
//
//   g_i^{(r,s)} = sum_{q=0}^{r} C(r,q) x_i^{r-q+s} sigma_q m_{r-q} - y~_i^r x_i^s
//
// with sigma_0 = 1, sigma_1 = 0, m_0 = 1 and m = h(theta) when the parameters
// are distributional. Averaging over i leaves a function of the sample means of
// x^k and of y~^r x^s only, so the objective is evaluated from precomputed
// moments and per-observation contributions are formed only for weighting
// and variance estimation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ccrm/catdist.hpp"
#include "ccrm/core.hpp"
#include "ccrm/momsolve.hpp"
#include "ccrm/ols.hpp"
#include "ccrm/optimize.hpp"

namespace ccrm::gmm {

/// Ordered (r, s_r) pairs, r = 1..2K-1, s_r = 0..S-r.
class MomentStack {
 public:
  MomentStack(int K, int S) : K_(K), S_(S) {
    if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
    if (S <= 2 * K - 1 || S > 4 * K - 2) {
      throw Error(ErrorCode::invalid_argument, "S must lie in [" + std::to_string(2 * K) + ", " +
                                                   std::to_string(4 * K - 2) + "], got " + std::to_string(S));
    }
    for (int r = 1; r <= 2 * K - 1; ++r)
      for (int s = 0; s <= S - r; ++s) conditions_.emplace_back(r, s);
  }

  int K() const noexcept { return K_; }
  int S() const noexcept { return S_; }
  int dimension() const noexcept { return static_cast<int>(conditions_.size()); }
  const std::vector<std::pair<int, int>>& conditions() const noexcept { return conditions_; }

 private:
  int K_;
  int S_;
  std::vector<std::pair<int, int>> conditions_;
};

/// S = 2K: 4 for two categories, 6 for three.
inline int default_order(int K) { return 2 * K; }

/// Which parameter vector the stack is minimized over.
///  moments: (m_1..m_{2K-1}, sigma_2..sigma_{2K-1})
///  theta:   (pi_1..pi_{K-1}, b_1..b_K, sigma_2..sigma_{2K-1})
/// Both have 4K-3 entries.
enum class Mode { moments, theta };

inline int parameter_count(int K) { return 4 * K - 3; }

/// Parameter names in the order used by every covariance matrix.
inline std::vector<std::string> parameter_names(Mode mode, int K) {
  std::vector<std::string> names;
  if (mode == Mode::moments) {
    for (int r = 1; r <= 2 * K - 1; ++r) names.push_back("m" + std::to_string(r));
  } else {
    for (int k = 1; k < K; ++k) names.push_back("pi" + std::to_string(k));
    for (int k = 1; k <= K; ++k) names.push_back("b" + std::to_string(k));
  }
  for (int r = 2; r <= 2 * K - 1; ++r) names.push_back("sigma" + std::to_string(r));
  return names;
}

/// Packs theta and sigma in the theta-mode layout.
inline Vector pack_theta(const CategoricalDistribution& theta, const Vector& sigma) {
  const int K = theta.K();
  Vector eta(parameter_count(K));
  eta.head(K - 1) = theta.pi().head(K - 1);
  eta.segment(K - 1, K) = theta.b();
  eta.tail(2 * K - 2) = sigma;
  return eta;
}

inline Vector pack_moments(const Vector& m, const Vector& sigma) {
  Vector eta(m.size() + sigma.size());
  eta << m, sigma;
  return eta;
}

/// m_0..m_{2K-1} with m_0 = 1 and the derivative of m_1..m_{2K-1} with respect
/// to the leading 2K-1 entries of eta.
struct MomentMap {
  Vector m_full;
  Matrix dm;
};

inline MomentMap moment_map(Mode mode, int K, const Vector& eta) {
  const int R = 2 * K - 1;
  MomentMap out;
  out.m_full = Vector::Zero(R + 1);
  out.m_full[0] = 1.0;
  if (mode == Mode::moments) {
    out.m_full.tail(R) = eta.head(R);
    out.dm = Matrix::Identity(R, R);
    return out;
  }
  Vector pi(K);
  pi.head(K - 1) = eta.head(K - 1);
  pi[K - 1] = 1.0 - eta.head(K - 1).sum();
  const Vector b = eta.segment(K - 1, K);
  out.dm = Matrix::Zero(R, R);
  for (int r = 1; r <= R; ++r) {
    double sum = 0.0;
    const double last = ipow(b[K - 1], r);
    for (int k = 0; k < K; ++k) {
      const double br = ipow(b[k], r);
      sum += pi[k] * br;
      if (k < K - 1) out.dm(r - 1, k) = br - last;
      out.dm(r - 1, K - 1 + k) = pi[k] * r * ipow(b[k], r - 1);
    }
    out.m_full[r] = sum;
  }
  return out;
}

/// sigma_0..sigma_{2K-1} with sigma_0 = 1, sigma_1 = 0.
inline Vector sigma_full(int K, const Vector& eta) {
  Vector s = Vector::Zero(2 * K);
  s[0] = 1.0;
  if (K >= 2) s.tail(2 * K - 2) = eta.tail(2 * K - 2);
  return s;
}

/// Sample moments feeding the stacked conditions for fixed (x, y~).
class MomentModel {
 public:
  MomentModel(Vector x, Vector ytilde, MomentStack stack)
      : x_(std::move(x)), ytilde_(std::move(ytilde)), stack_(std::move(stack)) {
    if (x_.size() != ytilde_.size()) throw Error(ErrorCode::dimension_mismatch, "x and y~ lengths differ");
    if (x_.size() < 1) throw Error(ErrorCode::invalid_argument, "empty sample");
    const int S = stack_.S();
    const int R = 2 * stack_.K() - 1;
    xbar_ = Vector::Zero(S + 1);
    Matrix rho = Matrix::Zero(R + 1, S + 1);
    for (Eigen::Index i = 0; i < x_.size(); ++i) {
      double xp = 1.0;
      for (int s = 0; s <= S; ++s) {
        xbar_[s] += xp;
        double yr = 1.0;
        for (int r = 0; r <= R && r + s <= S; ++r) {
          rho(r, s) += yr * xp;
          yr *= ytilde_[i];
        }
        xp *= x_[i];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(x_.size());
    xbar_ *= inv_n;
    rho *= inv_n;
    rho_.resize(stack_.dimension());
    for (int c = 0; c < stack_.dimension(); ++c) {
      const auto [r, s] = stack_.conditions()[c];
      rho_[c] = rho(r, s);
    }
    if (!xbar_.allFinite() || !rho_.allFinite()) {
      throw Error(ErrorCode::overflow, "sample moments of the stack are not finite");
    }
    binom_ = Matrix::Zero(R + 1, R + 1);
    for (int r = 0; r <= R; ++r)
      for (int q = 0; q <= r; ++q)
        binom_(r, q) = static_cast<double>(binomial(static_cast<unsigned>(r), static_cast<unsigned>(q)));
  }

  const MomentStack& stack() const noexcept { return stack_; }
  int K() const noexcept { return stack_.K(); }
  int dimension() const noexcept { return stack_.dimension(); }
  const Vector& x() const noexcept { return x_; }
  const Vector& ytilde() const noexcept { return ytilde_; }
  Eigen::Index n() const noexcept { return x_.size(); }
  /// n^{-1} sum x_i^k, k = 0..S
  const Vector& xbar() const noexcept { return xbar_; }

  /// g_n from m_0..m_{2K-1} and sigma_0..sigma_{2K-1}.
  Vector g(const Vector& m_full, const Vector& s_full) const {
    Vector out(dimension());
    for (int c = 0; c < dimension(); ++c) {
      const auto [r, s] = stack_.conditions()[c];
      double acc = 0.0;
      for (int q = 0; q <= r; ++q) acc += binom_(r, q) * xbar_[r - q + s] * s_full[q] * m_full[r - q];
      out[c] = acc - rho_[c];
    }
    return out;
  }

  /// Per-observation contributions, one row per i.
  Matrix contributions(const Vector& m_full, const Vector& s_full) const {
    const int S = stack_.S();
    const int R = 2 * K() - 1;
    Matrix out(n(), dimension());
    std::vector<double> xp(S + 1), yp(R + 1);
    for (Eigen::Index i = 0; i < n(); ++i) {
      xp[0] = 1.0;
      for (int s = 1; s <= S; ++s) xp[s] = xp[s - 1] * x_[i];
      yp[0] = 1.0;
      for (int r = 1; r <= R; ++r) yp[r] = yp[r - 1] * ytilde_[i];
      for (int c = 0; c < dimension(); ++c) {
        const auto [r, s] = stack_.conditions()[c];
        double acc = 0.0;
        for (int q = 0; q <= r; ++q) acc += binom_(r, q) * xp[r - q + s] * s_full[q] * m_full[r - q];
        out(i, c) = acc - yp[r] * xp[s];
      }
    }
    return out;
  }

  /// d g_n / d(m_1..m_{2K-1}, sigma_2..sigma_{2K-1}).
  Matrix jacobian_moments(const Vector& m_full, const Vector& s_full) const {
    const int R = 2 * K() - 1;
    Matrix jac = Matrix::Zero(dimension(), parameter_count(K()));
    for (int c = 0; c < dimension(); ++c) {
      const auto [r, s] = stack_.conditions()[c];
      for (int j = 1; j <= r; ++j) jac(c, j - 1) = binom_(r, r - j) * xbar_[j + s] * s_full[r - j];
      for (int t = 2; t <= r; ++t) jac(c, R + t - 2) = binom_(r, t) * xbar_[r - t + s] * m_full[r - t];
    }
    return jac;
  }

  Vector g(Mode mode, const Vector& eta) const {
    return g(moment_map(mode, K(), eta).m_full, sigma_full(K(), eta));
  }

  Matrix contributions(Mode mode, const Vector& eta) const {
    return contributions(moment_map(mode, K(), eta).m_full, sigma_full(K(), eta));
  }

  /// d g_n / d eta.
  Matrix jacobian(Mode mode, const Vector& eta) const {
    const auto map = moment_map(mode, K(), eta);
    Matrix jac = jacobian_moments(map.m_full, sigma_full(K(), eta));
    const int R = 2 * K() - 1;
    if (mode == Mode::theta) jac.leftCols(R) = (jac.leftCols(R) * map.dm).eval();
    return jac;
  }

 private:
  Vector x_;
  Vector ytilde_;
  MomentStack stack_;
  Vector xbar_;
  Vector rho_;
  Matrix binom_;
};

/// g_n(theta, sigma, gamma-hat) on a sample.
inline Vector moment_vector(const RegressionSample& sample, const Vector& gammahat,
                            const CategoricalDistribution& theta, const Vector& sigma, const MomentStack& stack) {
  if (theta.K() != stack.K()) throw Error(ErrorCode::dimension_mismatch, "theta and stack disagree on K");
  if (sigma.size() != 2 * stack.K() - 2) throw Error(ErrorCode::dimension_mismatch, "sigma has the wrong length");
  MomentModel model(sample.x(), ols::detilde(sample, gammahat), stack);
  return model.g(Mode::theta, pack_theta(theta, sigma));
}

/// d g_n / d gamma: the y~ terms depend on gamma through y~_i = y_i - z_i' gamma.
inline Matrix gamma_jacobian(const MomentModel& model, const Matrix& z) {
  const auto pz = z.cols();
  Matrix jac = Matrix::Zero(model.dimension(), pz);
  if (pz == 0) return jac;
  const auto n = model.n();
  const int S = model.stack().S();
  const int R = 2 * model.K() - 1;
  std::vector<double> xp(S + 1), yp(R + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    xp[0] = 1.0;
    for (int s = 1; s <= S; ++s) xp[s] = xp[s - 1] * model.x()[i];
    yp[0] = 1.0;
    for (int r = 1; r <= R; ++r) yp[r] = yp[r - 1] * model.ytilde()[i];
    for (int c = 0; c < model.dimension(); ++c) {
      const auto [r, s] = model.stack().conditions()[c];
      jac.row(c) += (r * yp[r - 1] * xp[s]) * z.row(i);
    }
  }
  return jac / static_cast<double>(n);
}

struct Weighting {
  Matrix A;
  bool regularized = false;
};

inline constexpr double kWeightConditionLimit = 1e12;

/// [n^{-1} sum g_i g_i' - g-bar g-bar']^{-1}, ridge-regularized when the
/// inner matrix is numerically singular.
inline Weighting weighting_from_contributions(const Matrix& contrib) {
  const auto n = contrib.rows();
  const auto dim = contrib.cols();
  const Vector mean = contrib.colwise().mean().transpose();
  Matrix inner = (contrib.transpose() * contrib) / static_cast<double>(n) - mean * mean.transpose();
  inner = 0.5 * (inner + inner.transpose());
  Weighting out;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(inner);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(hi > 0.0) || !(lo > 0.0) || hi / lo > kWeightConditionLimit) {
    out.regularized = true;
    const double trace = inner.trace();
    const double lambda = trace > 0.0 ? 1e-10 * trace / static_cast<double>(dim) : 1.0;
    inner.diagonal().array() += lambda;
    if (!(lo + lambda > 0.0)) inner.diagonal().array() += std::abs(lo);
    eig.compute(inner);
  }
  const Vector inv = eig.eigenvalues().cwiseMax(std::numeric_limits<double>::min()).cwiseInverse();
  out.A = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  out.A = 0.5 * (out.A + out.A.transpose());
  return out;
}

inline Weighting weighting_matrix(const MomentModel& model, Mode mode, const Vector& eta) {
  return weighting_from_contributions(model.contributions(mode, eta));
}

inline Weighting weighting_matrix(const RegressionSample& sample, const Vector& gammahat,
                                  const CategoricalDistribution& theta_prelim, const Vector& sigma_prelim,
                                  const MomentStack& stack) {
  MomentModel model(sample.x(), ols::detilde(sample, gammahat), stack);
  return weighting_matrix(model, Mode::theta, pack_theta(theta_prelim, sigma_prelim));
}

/// Smooth bijection between the feasible parameter set and R^{4K-3}.
///  theta: pi_k = e^{a_k} / (1 + sum_j e^{a_j}), b_1 = c, b_k = b_{k-1} + e^{d_k}
///  sigma: sigma_r = sigma_max_r tanh(s_r)
/// An empty sigma_max drops the sigma block entirely.
class Reparameterization {
 public:
  Reparameterization(Mode mode, int K, Vector sigma_max)
      : mode_(mode), K_(K), sigma_max_(std::move(sigma_max)) {
    if (sigma_max_.size() != 0 && sigma_max_.size() != 2 * K - 2) {
      throw Error(ErrorCode::dimension_mismatch, "sigma bound length");
    }
  }

  const Vector& sigma_max() const noexcept { return sigma_max_; }

  Vector to_unconstrained(const Vector& eta) const {
    Vector u(eta.size());
    const int R = 2 * K_ - 1;
    if (mode_ == Mode::moments) {
      u.head(R) = eta.head(R);
    } else {
      const double last = 1.0 - eta.head(K_ - 1).sum();
      for (int k = 0; k < K_ - 1; ++k) u[k] = std::log(eta[k] / last);
      u[K_ - 1] = eta[K_ - 1];
      for (int k = 1; k < K_; ++k) u[K_ - 1 + k] = std::log(eta[K_ - 1 + k] - eta[K_ - 2 + k]);
    }
    for (Eigen::Index j = 0; j < sigma_max_.size(); ++j) u[R + j] = std::atanh(eta[R + j] / sigma_max_[j]);
    return u;
  }

  Vector to_constrained(const Vector& u) const {
    Vector eta(u.size());
    const int R = 2 * K_ - 1;
    if (mode_ == Mode::moments) {
      eta.head(R) = u.head(R);
    } else {
      const double shift = K_ > 1 ? std::max(0.0, u.head(K_ - 1).maxCoeff()) : 0.0;
      double denom = std::exp(-shift);
      for (int k = 0; k < K_ - 1; ++k) denom += std::exp(u[k] - shift);
      for (int k = 0; k < K_ - 1; ++k) eta[k] = std::exp(u[k] - shift) / denom;
      eta[K_ - 1] = u[K_ - 1];
      for (int k = 1; k < K_; ++k) eta[K_ - 1 + k] = eta[K_ - 2 + k] + std::exp(u[K_ - 1 + k]);
    }
    for (Eigen::Index j = 0; j < sigma_max_.size(); ++j) eta[R + j] = sigma_max_[j] * std::tanh(u[R + j]);
    return eta;
  }

  /// d eta / d u.
  Matrix jacobian(const Vector& u) const {
    const Vector eta = to_constrained(u);
    const auto p = u.size();
    Matrix jac = Matrix::Zero(p, p);
    const int R = 2 * K_ - 1;
    if (mode_ == Mode::moments) {
      jac.topLeftCorner(R, R).setIdentity();
    } else {
      for (int k = 0; k < K_ - 1; ++k)
        for (int j = 0; j < K_ - 1; ++j) jac(k, j) = eta[k] * ((k == j ? 1.0 : 0.0) - eta[j]);
      for (int k = 0; k < K_; ++k) {
        jac(K_ - 1 + k, K_ - 1) = 1.0;
        for (int j = 1; j <= k; ++j) jac(K_ - 1 + k, K_ - 1 + j) = std::exp(u[K_ - 1 + j]);
      }
    }
    for (Eigen::Index j = 0; j < sigma_max_.size(); ++j) {
      const double t = std::tanh(u[R + j]);
      jac(R + j, R + j) = sigma_max_[j] * (1.0 - t * t);
    }
    return jac;
  }

 private:
  Mode mode_;
  int K_;
  Vector sigma_max_;
};

struct StageResult {
  Vector eta;
  double objective = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Minimizes g_n' A g_n over the feasible set from each start; keeps the best.
inline StageResult minimize_stage(const MomentModel& model, Mode mode, const Matrix& A,
                                  const Reparameterization& rep, const std::vector<Vector>& starts,
                                  const optimize::Options& opt) {
  auto objective = [&](const Vector& u, Vector& grad) {
    const Vector eta = rep.to_constrained(u);
    if (!eta.allFinite()) {
      grad.setZero(u.size());
      return std::numeric_limits<double>::infinity();
    }
    const Vector g = model.g(mode, eta);
    const Vector ag = A * g;
    grad = rep.jacobian(u).transpose() * (2.0 * (model.jacobian(mode, eta).transpose() * ag));
    return g.dot(ag);
  };
  StageResult best;
  best.objective = std::numeric_limits<double>::infinity();
  int total_iterations = 0;
  for (const auto& start : starts) {
    const auto res = optimize::minimize(objective, rep.to_unconstrained(start), opt);
    total_iterations += res.iterations;
    if (res.value < best.objective || best.eta.size() == 0) {
      best.eta = rep.to_constrained(res.x);
      best.objective = res.value;
      best.gradient_norm = res.gradient_norm;
      best.converged = res.converged;
    }
  }
  best.iterations = total_iterations;
  return best;
}

/// First-stage inputs for the gamma correction of the GMM variance.
struct FirstStage {
  Matrix design;     ///< rows w_i'
  Vector residuals;  ///< xi-hat_i
  Matrix gram;       ///< Q_{n,ww}
  Matrix z;          ///< covariates with homogeneous slopes
};

inline FirstStage first_stage(const RegressionSample& sample, const PhiEstimate& phi) {
  return {sample.design(), phi.residuals, phi.gram, sample.z()};
}

/// Sandwich (G'AG)^{-1} G'A V_zeta A G (G'AG)^{-1} / n with
/// psi_i = g_i + (d g_n / d gamma) L Q^{-1} w_i xi_i.
inline Matrix variance(const MomentModel& model, Mode mode, const Vector& eta, const Matrix& A,
                       const FirstStage& first) {
  const auto n = model.n();
  const Matrix G = model.jacobian(mode, eta);
  Matrix psi = model.contributions(mode, eta);
  const auto pz = first.z.cols();
  if (pz > 0) {
    const Matrix g_gamma = gamma_jacobian(model, first.z);
    const Matrix scores = (first.design.array().colwise() * first.residuals.array()).matrix();
    const Matrix influence = first.gram.llt().solve(scores.transpose());  // (1+pz) x n
    psi += (g_gamma * influence.bottomRows(pz)).transpose();
  }
  const Matrix v_zeta = (psi.transpose() * psi) / static_cast<double>(n);
  const Matrix bread_inv = G.transpose() * A * G;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (bread_inv + bread_inv.transpose()));
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-14 * hi) || !(hi > 0.0)) {
    throw Error(ErrorCode::rank_deficient, "G'AG is singular at the estimate (smallest eigenvalue " +
                                               std::to_string(lo) + ")");
  }
  const Matrix bread =
      eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  const Matrix ga = G.transpose() * A;
  Matrix v = bread * ga * v_zeta * ga.transpose() * bread;
  v = 0.5 * (v + v.transpose());
  return v / static_cast<double>(n);
}

struct Options {
  /// Highest x-moment order in the stack; 0 selects default_order(K).
  int S = 0;
  /// sigma_r is bounded by sigma_bound_factor * scale^r with scale the RMS of y~.
  double sigma_bound_factor = 10.0;
  /// var(beta) below this fraction of m_1^2 is treated as homogeneity.
  double homogeneity_cutoff = 1e-4;
  optimize::Options optimizer{};
  /// Throw non_convergence instead of returning a flagged estimate.
  bool require_convergence = true;
};

struct Flags {
  /// var(beta) is numerically zero; theta is reported as a point mass.
  bool pi_not_identified = false;
  bool weighting_regularized = false;
  bool sigma2_clamped = false;
  bool initial_moments_inconsistent = false;
  /// Some pi_k is within 1e-6 of the boundary or sigma_r within 1% of its bound.
  bool boundary = false;
  bool converged = true;
};

struct MomentEstimate {
  Vector m;
  Vector sigma;
  Matrix cov;
  Matrix weighting;
  double objective = 0.0;
  /// Identification-stage solution the GMM started from.
  MomentSet initial;
};

struct GmmEstimate {
  CategoricalDistribution theta = CategoricalDistribution::point_mass(0.0);
  Vector sigma;
  double objective = 0.0;
  Matrix weighting;
  /// Covariance of (pi_1..pi_{K-1}, b_1..b_K, sigma_2..sigma_{2K-1}) / n.
  Matrix cov;
  double gradient_norm = 0.0;
  int iterations = 0;
  Flags flags;
  /// Minimum-distance projection of the moment estimates.
  CategoricalDistribution initial_theta = CategoricalDistribution::point_mass(0.0);
  /// Final-stage objective evaluated at (initial_theta, moment-stage sigma).
  double initial_objective = 0.0;
  MomentEstimate moments;
  PhiEstimate phi;
  int K = 1;
  int S = 2;

  Vector eta() const { return pack_theta(theta, sigma); }
  Vector std_errors() const { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& what, GmmEstimate best)
      : Error(ErrorCode::non_convergence, what), best_(std::move(best)) {}
  const GmmEstimate& best_iterate() const noexcept { return best_; }

 private:
  GmmEstimate best_;
};

namespace detail {

inline Vector sigma_bounds(const Vector& ytilde, int K, double factor) {
  const double rms = std::sqrt(ytilde.squaredNorm() / static_cast<double>(ytilde.size()));
  const double scale = std::max(rms, 1e-3);
  Vector bound(2 * K - 2);
  for (int r = 2; r <= 2 * K - 1; ++r) bound[r - 2] = factor * ipow(scale, r);
  return bound;
}

inline Vector clip_sigma(Vector sigma, const Vector& bound) {
  for (Eigen::Index j = 0; j < sigma.size(); ++j) sigma[j] = std::clamp(sigma[j], -0.9 * bound[j], 0.9 * bound[j]);
  return sigma;
}

/// min_theta sum_r (h(theta)_r - m_r)^2 over the ordered, interior parameter set.
inline CategoricalDistribution minimum_distance(const Vector& m, int K, const optimize::Options& opt) {
  if (K == 1) return CategoricalDistribution::point_mass(m[0]);
  const int R = 2 * K - 1;
  std::vector<Vector> starts;
  try {
    const auto inv = catdist::invert(m, K);
    starts.push_back(pack_theta(inv, Vector::Zero(2 * K - 2)).head(R));
  } catch (const Error&) {
  }
  const double spread = std::sqrt(std::max(m[1] - m[0] * m[0], 1e-4 * std::max(1.0, m[0] * m[0])));
  for (double width : {1.0, 2.0}) {
    Vector eta(R);
    for (int k = 0; k < K - 1; ++k) eta[k] = 1.0 / K;
    for (int k = 0; k < K; ++k) {
      const double offset = K == 1 ? 0.0 : -1.0 + 2.0 * k / (K - 1);
      eta[K - 1 + k] = m[0] + width * spread * offset;
    }
    starts.push_back(eta);
  }
  Reparameterization rep(Mode::theta, K, Vector());
  auto objective = [&](const Vector& u, Vector& grad) {
    Vector eta = rep.to_constrained(u);
    if (!eta.allFinite()) {
      grad.setZero(u.size());
      return std::numeric_limits<double>::infinity();
    }
    const auto map = moment_map(Mode::theta, K, eta);
    const Vector resid = map.m_full.tail(R) - m;
    grad = rep.jacobian(u).transpose() * (2.0 * map.dm.transpose() * resid);
    return resid.squaredNorm();
  };
  double best_value = std::numeric_limits<double>::infinity();
  Vector best_eta;
  for (const auto& s : starts) {
    const auto res = optimize::minimize(objective, rep.to_unconstrained(s), opt);
    if (res.value < best_value || best_eta.size() == 0) {
      best_value = res.value;
      best_eta = rep.to_constrained(res.x);
    }
  }
  Vector pi(K);
  pi.head(K - 1) = best_eta.head(K - 1);
  pi[K - 1] = 1.0 - best_eta.head(K - 1).sum();
  return {pi, best_eta.tail(K)};
}

inline bool near_boundary(const Vector& pi, const Vector& sigma, const Vector& bound) {
  if (pi.size() > 1 && (pi.minCoeff() < 1e-6 || pi.maxCoeff() > 1.0 - 1e-6)) return true;
  for (Eigen::Index j = 0; j < sigma.size(); ++j)
    if (std::abs(sigma[j]) > 0.99 * bound[j]) return true;
  return false;
}

}  // namespace detail

/// Full pipeline: least squares, moment identification, two-step GMM in moment
/// space, minimum-distance starting values, two-step GMM in theta space and the
/// sandwich covariance.
inline GmmEstimate estimate(const RegressionSample& sample, int K, const Options& options = {}) {
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  const int S = options.S == 0 ? default_order(K) : options.S;
  const MomentStack stack(K, S);
  const int R = 2 * K - 1;

  const Vector& x = sample.x();
  const double x_mean = x.mean();
  if (!((x.array() - x_mean).square().sum() > 1e-12 * std::max(1.0, x.squaredNorm()))) {
    throw Error(ErrorCode::no_variation, "the focal regressor x has no sample variation");
  }

  GmmEstimate out;
  out.K = K;
  out.S = S;
  out.phi = ols::estimate_phi(sample);
  const Vector gammahat = out.phi.gamma();
  const Vector ytilde = ols::detilde(sample, gammahat);
  const FirstStage first = first_stage(sample, out.phi);

  // Identification-stage moments.
  MomentSet initial;
  if (K == 1) {
    initial = MomentSet(Vector::Constant(1, out.phi.mean_beta()), Vector(), 1);
  } else {
    const auto rho = momsolve::build_rho_table(ytilde, x, K, S);
    const auto sol = momsolve::solve_moments(rho, K, out.phi.mean_beta());
    initial = sol.moments;
    out.flags.sigma2_clamped = sol.sigma2_clamped;
    out.flags.initial_moments_inconsistent = sol.inconsistent;
  }

  const MomentModel model(x, ytilde, stack);
  const Vector bound = detail::sigma_bounds(ytilde, K, options.sigma_bound_factor);
  const auto& opt = options.optimizer;
  bool converged = true;

  // GMM over (m, sigma): preliminary -> weight -> estimate -> re-weight -> estimate.
  const Reparameterization rep_m(Mode::moments, K, bound);
  Vector mu = pack_moments(initial.m, detail::clip_sigma(initial.sigma, bound));
  Weighting w = weighting_matrix(model, Mode::moments, mu);
  out.flags.weighting_regularized |= w.regularized;
  StageResult stage = minimize_stage(model, Mode::moments, w.A, rep_m, {mu}, opt);
  w = weighting_matrix(model, Mode::moments, stage.eta);
  out.flags.weighting_regularized |= w.regularized;
  stage = minimize_stage(model, Mode::moments, w.A, rep_m, {stage.eta}, opt);
  converged &= stage.converged;

  out.moments.m = stage.eta.head(R);
  out.moments.sigma = stage.eta.tail(2 * K - 2);
  out.moments.objective = stage.objective;
  out.moments.weighting = w.A;
  out.moments.initial = initial;
  try {
    out.moments.cov = variance(model, Mode::moments, stage.eta, w.A, first);
  } catch (const Error&) {
    out.moments.cov = Matrix::Constant(parameter_count(K), parameter_count(K),
                                       std::numeric_limits<double>::quiet_NaN());
  }

  const double m1 = out.moments.m[0];
  if (K >= 2) {
    const double var = out.moments.m[1] - m1 * m1;
    if (var < std::max(options.homogeneity_cutoff * m1 * m1, 1e-12)) {
      out.flags.pi_not_identified = true;
      out.theta = CategoricalDistribution::point_mass(m1);
      out.initial_theta = out.theta;
      out.sigma = out.moments.sigma;
      out.objective = out.moments.objective;
      out.weighting = out.moments.weighting;
      // Point mass at m_1 with the moment-stage sigma: keep the matching rows.
      std::vector<int> keep{0};
      for (int j = 0; j < 2 * K - 2; ++j) keep.push_back(R + j);
      out.cov.resize(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(keep.size()));
      for (std::size_t a = 0; a < keep.size(); ++a)
        for (std::size_t b = 0; b < keep.size(); ++b) out.cov(a, b) = out.moments.cov(keep[a], keep[b]);
      out.gradient_norm = stage.gradient_norm;
      out.iterations = stage.iterations;
      out.flags.converged = converged;
      return out;
    }
  }

  // Starting values for theta from the moment estimates.
  out.initial_theta = detail::minimum_distance(out.moments.m, K, opt);
  const Vector sigma0 = detail::clip_sigma(out.moments.sigma, bound);
  const Vector eta0 = pack_theta(out.initial_theta, sigma0);

  const Reparameterization rep_t(Mode::theta, K, bound);
  w = weighting_matrix(model, Mode::theta, eta0);
  out.flags.weighting_regularized |= w.regularized;
  StageResult theta_stage = minimize_stage(model, Mode::theta, w.A, rep_t, {eta0}, opt);
  const Vector eta1 = theta_stage.eta;
  w = weighting_matrix(model, Mode::theta, eta1);
  out.flags.weighting_regularized |= w.regularized;
  theta_stage = minimize_stage(model, Mode::theta, w.A, rep_t, {eta1, eta0}, opt);
  converged &= theta_stage.converged;

  const Vector& eta = theta_stage.eta;
  Vector pi(K);
  pi.head(K - 1) = eta.head(K - 1);
  pi[K - 1] = 1.0 - eta.head(K - 1).sum();
  out.theta = CategoricalDistribution(pi, eta.segment(K - 1, K));
  out.sigma = eta.tail(2 * K - 2);
  out.objective = theta_stage.objective;
  out.weighting = w.A;
  out.gradient_norm = theta_stage.gradient_norm;
  out.iterations = theta_stage.iterations + stage.iterations;
  {
    const Vector g0 = model.g(Mode::theta, eta0);
    out.initial_objective = g0.dot(w.A * g0);
  }
  out.flags.boundary = detail::near_boundary(pi, out.sigma, bound);
  out.cov = variance(model, Mode::theta, eta, w.A, first);
  out.flags.converged = converged;
  if (!converged && options.require_convergence) {
    throw NonConvergence("GMM optimizer did not converge within " +
                             std::to_string(options.optimizer.max_evaluations) + " evaluations",
                         out);
  }
  return out;
}

/// Sandwich covariance of a finished estimate, recomputed from the sample.
inline Matrix variance_estimate(const RegressionSample& sample, const GmmEstimate& est, const PhiEstimate& phi,
                                const MomentStack& stack) {
  const MomentModel model(sample.x(), ols::detilde(sample, phi.gamma()), stack);
  return variance(model, Mode::theta, est.eta(), est.weighting, first_stage(sample, phi));
}

}  // namespace ccrm::gmm
