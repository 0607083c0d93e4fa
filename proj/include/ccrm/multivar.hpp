#pragma once

// Several categorical coefficients: y_i = x_i' beta_i + z_i' gamma + u_i with
// beta_i in R^p.
//
// Moments of beta are carried per degree r as E[tau_r(beta)], the vector of
// all degree-r monomials. Expanding (x' beta)^r with the multinomial theorem
// gives tau_r(x)' Lambda_r tau_r(beta), and the order-r conditions
//
//   rho_{0,r}' Lambda_r E tau_r(beta) + sigma_r = E y~^r          - sum_{s=2}^{r-1} C(r,s) rho_{0,r-s}' Lambda_{r-s} E tau_{r-s}(beta) sigma_s
//   Xi_{r,r}   Lambda_r E tau_r(beta) + rho_{0,r} sigma_r = E y~^r tau_r(x) - sum_{s=2}^{r-1} C(r,s) Xi_{r,r-s} Lambda_{r-s} E tau_{r-s}(beta) sigma_s
//
// are linear in (E tau_r(beta), sigma_r) given lower orders.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ccrm/catdist.hpp"
#include "ccrm/core.hpp"
#include "ccrm/ols.hpp"

namespace ccrm::multivar {

inline constexpr int kMaxCoefficients = 4;
inline constexpr double kCollinearityTolerance = 1e-10;
inline constexpr double kJointSlack = 1e-8;

/// Exponent vectors q with |q| = r, in graded reverse-lexicographic order.
class MonomialBasis {
 public:
  MonomialBasis(int p, int r) : p_(p), r_(r) {
    if (p < 1 || p > kMaxCoefficients) {
      throw Error(ErrorCode::invalid_argument, "coefficient count p=" + std::to_string(p) + " must lie in [1, " +
                                                   std::to_string(kMaxCoefficients) + "]");
    }
    if (r < 0) throw Error(ErrorCode::invalid_argument, "monomial degree must be nonnegative");
    std::vector<int> q(p, 0);
    enumerate(q, 0, r);
    // Within a degree, grevlex puts a before b when the last nonzero entry of
    // a - b is negative.
    std::sort(exponents_.begin(), exponents_.end(), [](const std::vector<int>& a, const std::vector<int>& b) {
      for (auto j = a.size(); j-- > 0;) {
        if (a[j] != b[j]) return a[j] < b[j];
      }
      return false;
    });
  }

  int p() const noexcept { return p_; }
  int degree() const noexcept { return r_; }
  std::size_t size() const noexcept { return exponents_.size(); }
  const std::vector<std::vector<int>>& exponents() const noexcept { return exponents_; }
  const std::vector<int>& operator[](std::size_t i) const { return exponents_.at(i); }

  /// tau_r(v) = (prod_j v_j^{q_j})_q
  Vector evaluate(const Eigen::Ref<const Vector>& v) const {
    if (v.size() != p_) throw Error(ErrorCode::dimension_mismatch, "monomial argument has the wrong length");
    Vector out(size());
    for (std::size_t i = 0; i < size(); ++i) {
      double prod = 1.0;
      for (int j = 0; j < p_; ++j) prod *= ipow(v[j], exponents_[i][j]);
      out[static_cast<Eigen::Index>(i)] = prod;
    }
    return out;
  }

  /// Position of the pure power v_j^r.
  std::size_t pure_power_index(int j) const {
    for (std::size_t i = 0; i < size(); ++i)
      if (exponents_[i][j] == r_) return i;
    throw Error(ErrorCode::invalid_argument, "coordinate out of range");
  }

  std::size_t index_of(const std::vector<int>& q) const {
    for (std::size_t i = 0; i < size(); ++i)
      if (exponents_[i] == q) return i;
    throw Error(ErrorCode::invalid_argument, "exponent vector is not in this basis");
  }

 private:
  void enumerate(std::vector<int>& q, int j, int remaining) {
    if (j == p_ - 1) {
      q[j] = remaining;
      exponents_.push_back(q);
      return;
    }
    for (int e = remaining; e >= 0; --e) {
      q[j] = e;
      enumerate(q, j + 1, remaining - e);
    }
  }

  int p_;
  int r_;
  std::vector<std::vector<int>> exponents_;
};

inline MonomialBasis monomial_basis(int p, int r) { return {p, r}; }

/// Multinomial coefficients r! / (q_1! ... q_p!) along the basis.
inline Vector lambda_diagonal(const MonomialBasis& basis) {
  Vector out(basis.size());
  for (std::size_t i = 0; i < basis.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = static_cast<double>(multinomial(basis[i]));
  }
  return out;
}

inline Matrix lambda_matrix(const MonomialBasis& basis) { return lambda_diagonal(basis).asDiagonal(); }

/// Outcome, n x p matrix of random-coefficient regressors, and covariates.
class MultiRegressionSample {
 public:
  MultiRegressionSample(Vector y, Matrix x, Matrix z) : y_(std::move(y)), x_(std::move(x)), z_(std::move(z)) {
    const auto n = y_.size();
    if (n < 1) throw Error(ErrorCode::invalid_argument, "sample needs at least one observation");
    if (x_.rows() != n) throw Error(ErrorCode::dimension_mismatch, "X and y row counts differ");
    if (x_.cols() < 1 || x_.cols() > kMaxCoefficients) {
      throw Error(ErrorCode::invalid_argument, "X must have between 1 and " + std::to_string(kMaxCoefficients) +
                                                   " columns");
    }
    if (z_.cols() > 0 && z_.rows() != n) throw Error(ErrorCode::dimension_mismatch, "Z and y row counts differ");
    if (z_.cols() == 0) z_.resize(n, 0);
    if (!y_.allFinite() || !x_.allFinite() || !z_.allFinite()) {
      throw Error(ErrorCode::invalid_argument, "sample contains non-finite values");
    }
  }

  const Vector& y() const noexcept { return y_; }
  const Matrix& x() const noexcept { return x_; }
  const Matrix& z() const noexcept { return z_; }
  Eigen::Index n() const noexcept { return y_.size(); }
  int p() const noexcept { return static_cast<int>(x_.cols()); }
  Eigen::Index pz() const noexcept { return z_.cols(); }

  Matrix design() const {
    Matrix w(n(), x_.cols() + pz());
    w.leftCols(x_.cols()) = x_;
    if (pz() > 0) w.rightCols(pz()) = z_;
    return w;
  }

 private:
  Vector y_;
  Matrix x_;
  Matrix z_;
};

/// Least squares of y on (x', z')'; the first p entries estimate E(beta).
inline PhiEstimate estimate_phi(const MultiRegressionSample& sample) {
  return ols::least_squares(sample.design(), sample.y());
}

struct MultiMomentSolution {
  int p = 1;
  int K = 1;
  /// beta_moments[r] = E tau_r(beta), r = 0..2K-1.
  std::vector<Vector> beta_moments;
  /// sigma_2 .. sigma_{2K-1}
  Vector sigma;

  /// (E beta_j, E beta_j^2, ..., E beta_j^{2K-1})
  Vector marginal_moments(int j) const {
    if (j < 0 || j >= p) throw Error(ErrorCode::invalid_argument, "coordinate out of range");
    Vector out(2 * K - 1);
    for (int r = 1; r <= 2 * K - 1; ++r) {
      const MonomialBasis basis(p, r);
      out[r - 1] = beta_moments[r][static_cast<Eigen::Index>(basis.pure_power_index(j))];
    }
    return out;
  }

  /// E prod_j beta_j^{q_j}
  double moment(const std::vector<int>& q) const {
    int r = 0;
    for (int e : q) r += e;
    if (static_cast<int>(q.size()) != p || r >= static_cast<int>(beta_moments.size())) {
      throw Error(ErrorCode::invalid_argument, "requested moment is not identified at this K");
    }
    const MonomialBasis basis(p, r);
    return beta_moments[r][static_cast<Eigen::Index>(basis.index_of(q))];
  }
};

/// Sequential solve of the order-r block systems, r = 2..2K-1. first_moments
/// is E(beta) from the least-squares stage.
inline MultiMomentSolution solve_moments_multi(const Matrix& x, const Vector& ytilde, const Vector& first_moments,
                                               int K) {
  if (K < 1) throw Error(ErrorCode::invalid_argument, "K must be positive");
  const auto n = x.rows();
  const int p = static_cast<int>(x.cols());
  if (ytilde.size() != n) throw Error(ErrorCode::dimension_mismatch, "y~ and X row counts differ");
  if (first_moments.size() != p) throw Error(ErrorCode::dimension_mismatch, "E(beta) must have p entries");
  const int rmax = 2 * K - 1;

  std::vector<MonomialBasis> bases;
  std::vector<Vector> lambdas;
  for (int r = 0; r <= rmax; ++r) {
    bases.emplace_back(p, r);
    lambdas.push_back(lambda_diagonal(bases.back()));
  }
  // tau_r(x_i) for every observation, one matrix per degree.
  std::vector<Matrix> tau(rmax + 1);
  for (int r = 0; r <= rmax; ++r) {
    tau[r].resize(n, static_cast<Eigen::Index>(bases[r].size()));
    for (Eigen::Index i = 0; i < n; ++i) tau[r].row(i) = bases[r].evaluate(x.row(i).transpose()).transpose();
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto rho0 = [&](int r) -> Vector { return tau[r].colwise().sum().transpose() * inv_n; };
  auto xi = [&](int r, int s) -> Matrix { return tau[r].transpose() * tau[s] * inv_n; };

  MultiMomentSolution out;
  out.p = p;
  out.K = K;
  out.beta_moments.resize(rmax + 1);
  out.beta_moments[0] = Vector::Ones(1);
  out.beta_moments[1] = first_moments;
  out.sigma = Vector::Zero(std::max(0, rmax - 1));
  auto err = [&](int s) { return s == 0 ? 1.0 : (s == 1 ? 0.0 : out.sigma[s - 2]); };

  Vector ypow = Vector::Ones(n);
  ypow = ypow.cwiseProduct(ytilde);
  for (int r = 2; r <= rmax; ++r) {
    ypow = ypow.cwiseProduct(ytilde);  // y~^r
    const auto nu = static_cast<Eigen::Index>(bases[r].size());
    const Vector rho_r = rho0(r);
    const Matrix xi_rr = xi(r, r);

    Matrix centered = xi_rr - rho_r * rho_r.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(centered, Eigen::EigenvaluesOnly);
    const double scale = std::max(xi_rr.diagonal().maxCoeff(), 1e-300);
    if (!(eig.eigenvalues().minCoeff() > kCollinearityTolerance * scale)) {
      throw Error(ErrorCode::singular_design, "degree-" + std::to_string(r) +
                                                  " monomials of the regressors are collinear");
    }

    double rhs_scalar = ypow.mean();
    Vector rhs_vec = tau[r].transpose() * ypow * inv_n;
    for (int s = 2; s <= r - 1; ++s) {
      const double c = static_cast<double>(binomial(static_cast<unsigned>(r), static_cast<unsigned>(s)));
      const Vector lam_m = lambdas[r - s].cwiseProduct(out.beta_moments[r - s]);
      rhs_scalar -= c * rho0(r - s).dot(lam_m) * err(s);
      rhs_vec -= c * xi(r, r - s) * lam_m * err(s);
    }

    Matrix block(nu + 1, nu + 1);
    block.topLeftCorner(nu, nu) = xi_rr * lambdas[r].asDiagonal();
    block.topRightCorner(nu, 1) = rho_r;
    block.bottomLeftCorner(1, nu) = (lambdas[r].cwiseProduct(rho_r)).transpose();
    block(nu, nu) = 1.0;
    Vector rhs(nu + 1);
    rhs.head(nu) = rhs_vec;
    rhs[nu] = rhs_scalar;
    const Vector sol = block.partialPivLu().solve(rhs);
    out.beta_moments[r] = sol.head(nu);
    out.sigma[r - 2] = sol[nu];
  }
  return out;
}

/// Least squares, then the moment solve on y~ = y - z' gamma-hat.
inline MultiMomentSolution solve_moments_multi(const MultiRegressionSample& sample, int K) {
  const auto phi = estimate_phi(sample);
  Vector ytilde = sample.y();
  if (sample.pz() > 0) ytilde -= sample.z() * phi.phi.tail(sample.pz());
  return solve_moments_multi(sample.x(), ytilde, phi.phi.head(sample.p()), K);
}

/// Distribution of a single coordinate from its moments (m_1..m_{2K-1}).
inline CategoricalDistribution marginal_distribution(const Vector& moments, int K) {
  if (K >= 2) {
    if (moments.size() < 2) throw Error(ErrorCode::dimension_mismatch, "marginal needs at least two moments");
    const double var = moments[1] - moments[0] * moments[0];
    if (!(var > catdist::kVarianceTolerance)) {
      throw Error(ErrorCode::homogeneity, "coordinate has no variation (var = " + std::to_string(var) + ")");
    }
  }
  return catdist::invert_general(moments, K);
}

/// Joint law of (beta_1, beta_2) with two categories each; pi is ordered
/// (LL, LH, HL, HH) with the first letter for beta_1.
struct JointDistribution2x2 {
  Vector pi;
  Vector b1;
  Vector b2;

  CategoricalDistribution marginal1() const {
    Vector lam(2);
    lam << pi[0] + pi[1], pi[2] + pi[3];
    return {lam, b1};
  }
  CategoricalDistribution marginal2() const {
    Vector lam(2);
    lam << pi[0] + pi[2], pi[1] + pi[3];
    return {lam, b2};
  }
  double cross_moment() const {
    return pi[0] * b1[0] * b2[0] + pi[1] * b1[0] * b2[1] + pi[2] * b1[1] * b2[0] + pi[3] * b1[1] * b2[1];
  }
};

/// Rows: lambda_1L, lambda_1H, lambda_2L, E(beta_1 beta_2).
inline Matrix joint_system_2x2(const Vector& b1, const Vector& b2) {
  Matrix B(4, 4);
  B << 1, 1, 0, 0,
       0, 0, 1, 1,
       1, 0, 1, 0,
       b1[0] * b2[0], b1[0] * b2[1], b1[1] * b2[0], b1[1] * b2[1];
  return B;
}

inline JointDistribution2x2 joint_2x2(const CategoricalDistribution& first, const CategoricalDistribution& second,
                                      double cross_moment) {
  if (first.K() != 2 || second.K() != 2) {
    throw Error(ErrorCode::invalid_argument, "joint recovery is implemented for two categories per coefficient");
  }
  if (!std::isfinite(cross_moment)) throw Error(ErrorCode::invalid_argument, "cross moment must be finite");
  const Matrix B = joint_system_2x2(first.b(), second.b());
  Vector rhs(4);
  rhs << first.pi()[0], first.pi()[1], second.pi()[0], cross_moment;
  Vector pi = B.fullPivLu().solve(rhs);
  static const char* labels[] = {"LL", "LH", "HL", "HH"};
  for (int k = 0; k < 4; ++k) {
    if (!(pi[k] >= -kJointSlack && pi[k] <= 1.0 + kJointSlack)) {
      throw Error(ErrorCode::infeasible_joint, std::string("implied pi_") + labels[k] + " = " +
                                                   std::to_string(pi[k]) + " is outside [0,1]");
    }
  }
  pi = pi.cwiseMax(0.0).cwiseMin(1.0);
  return {pi, first.b(), second.b()};
}

/// Marginal-probability constraints lambda_{jk} = sum of joint cells with
/// k_j = k; rows (j, k) in order, columns the K^p cells with the first
/// coordinate varying slowest.
inline Matrix marginal_constraint_matrix(int p, int K) {
  if (p < 1 || p > kMaxCoefficients || K < 1) throw Error(ErrorCode::invalid_argument, "bad (p, K)");
  int cells = 1;
  for (int j = 0; j < p; ++j) cells *= K;
  Matrix A = Matrix::Zero(p * K, cells);
  for (int c = 0; c < cells; ++c) {
    int rest = c;
    for (int j = p - 1; j >= 0; --j) {
      A(j * K + rest % K, c) = 1.0;
      rest /= K;
    }
  }
  return A;
}

/// Count of identified moment equations beyond the marginals against the
/// number of joint probabilities. Purely informational.
struct JointCount {
  long long moment_equations;
  long long joint_probabilities;
};

inline JointCount joint_identification_count(int p, int K) {
  if (p < 1 || K < 1) throw Error(ErrorCode::invalid_argument, "bad (p, K)");
  long long moments = 0;
  for (int r = 1; r <= 2 * K - 1; ++r) {
    moments += static_cast<long long>(binomial(static_cast<unsigned>(r + p - 1), static_cast<unsigned>(p - 1)));
  }
  long long cells = 1;
  for (int j = 0; j < p; ++j) cells *= K;
  return {moments - static_cast<long long>(p) * K, cells - 1};
}

}  // namespace ccrm::multivar
