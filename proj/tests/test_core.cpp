#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ccrm/core.hpp"
#include "ccrm/csv.hpp"
#include "ccrm/ols.hpp"
#include "ccrm/rng.hpp"

namespace {

using ccrm::Error;
using ccrm::ErrorCode;
using ccrm::Matrix;
using ccrm::Vector;

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a ccrm::Error";
  return ErrorCode::parse;
}

TEST(Binomial, MatchesPascalTriangle) {
  std::vector<std::vector<std::uint64_t>> pascal(61);
  for (unsigned r = 0; r <= 60; ++r) {
    pascal[r].assign(r + 1, 1);
    for (unsigned q = 1; q < r; ++q) pascal[r][q] = pascal[r - 1][q - 1] + pascal[r - 1][q];
  }
  for (unsigned r = 0; r <= 60; ++r)
    for (unsigned q = 0; q <= r; ++q) EXPECT_EQ(ccrm::binomial(r, q), pascal[r][q]) << r << " " << q;
}

TEST(Binomial, RejectsBadArguments) {
  EXPECT_EQ(code_of([] { ccrm::binomial(3, 4); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { ccrm::binomial(200, 100); }), ErrorCode::overflow);
}

TEST(Multinomial, FactorialRatio) {
  auto fact = [](int k) {
    double f = 1.0;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
  };
  for (int a = 0; a <= 5; ++a)
    for (int b = 0; b <= 5; ++b)
      for (int c = 0; c <= 5; ++c) {
        const std::vector<int> q{a, b, c};
        const double expected = fact(a + b + c) / (fact(a) * fact(b) * fact(c));
        EXPECT_EQ(static_cast<double>(ccrm::multinomial(q)), expected);
      }
}

TEST(SampleMoment, AgreesWithLoop) {
  Vector v(4);
  v << 1.0, -2.0, 0.5, 3.0;
  EXPECT_DOUBLE_EQ(ccrm::sample_moment(v, 0), 1.0);
  EXPECT_DOUBLE_EQ(ccrm::sample_moment(v, 3), (1.0 - 8.0 + 0.125 + 27.0) / 4.0);
  EXPECT_EQ(code_of([] { ccrm::sample_moment(Vector(), 2); }), ErrorCode::invalid_argument);
}

TEST(CategoricalDistribution, Validation) {
  Vector pi(2), b(2);
  pi << 0.5, 0.5;
  b << 1.0, 2.0;
  const ccrm::CategoricalDistribution theta(pi, b);
  EXPECT_DOUBLE_EQ(theta.mean(), 1.5);
  EXPECT_DOUBLE_EQ(theta.variance(), 0.25);

  Vector bad_sum(2);
  bad_sum << 0.5, 0.6;
  EXPECT_EQ(code_of([&] { ccrm::CategoricalDistribution(bad_sum, b); }), ErrorCode::invalid_argument);
  Vector unordered(2);
  unordered << 2.0, 1.0;
  EXPECT_EQ(code_of([&] { ccrm::CategoricalDistribution(pi, unordered); }), ErrorCode::invalid_argument);
  Vector corner(2);
  corner << 1.0, 0.0;
  EXPECT_EQ(code_of([&] { ccrm::CategoricalDistribution(corner, b); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { ccrm::CategoricalDistribution(pi, Vector::Ones(3)); }), ErrorCode::dimension_mismatch);

  const auto point = ccrm::CategoricalDistribution::point_mass(3.0);
  EXPECT_EQ(point.K(), 1);
  EXPECT_DOUBLE_EQ(point.variance(), 0.0);
}

TEST(RegressionSample, RejectsMismatchedAndNonFiniteInput) {
  EXPECT_EQ(code_of([] { ccrm::RegressionSample(Vector::Ones(3), Vector::Ones(2)); }), ErrorCode::dimension_mismatch);
  Vector y = Vector::Ones(3);
  y[1] = std::nan("");
  EXPECT_EQ(code_of([&] { ccrm::RegressionSample(y, Vector::Ones(3)); }), ErrorCode::invalid_argument);
  const ccrm::RegressionSample s(Vector::Ones(3), Vector::Zero(3));
  EXPECT_EQ(s.pz(), 0);
  EXPECT_EQ(s.design().cols(), 1);
}

// Least squares against Householder QR on the design and an explicit-loop sandwich.
TEST(LeastSquares, MatchesQrAndLoopSandwich) {
  auto eng = ccrm::rng::engine(11, 0, 0);
  std::normal_distribution<double> normal;
  const Eigen::Index n = 400, k = 4;
  Matrix w(n, k);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) w(i, j) = j == 0 ? 1.0 : normal(eng) + 0.3 * j;
    y[i] = 0.5 + w(i, 1) - 2.0 * w(i, 2) + 0.1 * w(i, 3) + (1.0 + std::abs(w(i, 1))) * normal(eng);
  }
  const auto est = ccrm::ols::least_squares(w, y);
  const Vector qr = w.householderQr().solve(y);
  for (Eigen::Index j = 0; j < k; ++j) EXPECT_NEAR(est.phi[j], qr[j], 1e-11);

  Matrix meat = Matrix::Zero(k, k), q = Matrix::Zero(k, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector wi = w.row(i).transpose();
    const double e = y[i] - wi.dot(qr);
    meat += e * e * wi * wi.transpose();
    q += wi * wi.transpose();
  }
  meat /= static_cast<double>(n);
  q /= static_cast<double>(n);
  const Matrix q_inv = q.fullPivLu().inverse();
  const Matrix expected = q_inv * meat * q_inv / static_cast<double>(n);
  EXPECT_LT((est.cov - expected).cwiseAbs().maxCoeff(), 1e-12 * expected.cwiseAbs().maxCoeff());
}

TEST(LeastSquares, ExactOnNoiselessData) {
  Matrix w(6, 2);
  w << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4, 1, 5;
  const Vector y = w * Vector::Constant(2, 0.75);
  const auto est = ccrm::ols::least_squares(w, y);
  EXPECT_NEAR(est.phi[0], 0.75, 1e-13);
  EXPECT_NEAR(est.phi[1], 0.75, 1e-13);
  EXPECT_LT(est.cov.cwiseAbs().maxCoeff(), 1e-20);
}

TEST(LeastSquares, SingularDesignIsReported) {
  Matrix w(5, 2);
  w << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10;
  EXPECT_EQ(code_of([&] { ccrm::ols::least_squares(w, Vector::Ones(5)); }), ErrorCode::singular_design);
  EXPECT_EQ(code_of([&] { ccrm::ols::least_squares(Matrix::Ones(2, 2), Vector::Ones(2)); }),
            ErrorCode::invalid_argument);
}

TEST(LeastSquares, DetildeRemovesCovariates) {
  Vector x(5), y(5);
  x << 0.1, 0.4, -0.3, 1.0, 2.0;
  Matrix z(5, 2);
  z << 1, 0.5, 1, -1.0, 1, 0.2, 1, 0.0, 1, 3.0;
  Vector gamma(2);
  gamma << 0.25, 1.5;
  y = 2.0 * x + z * gamma;
  const ccrm::RegressionSample s(y, x, z);
  const Vector yt = ccrm::ols::detilde(s, gamma);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(yt[i], 2.0 * x[i], 1e-14);
  EXPECT_EQ(code_of([&] { ccrm::ols::detilde(s, Vector::Ones(3)); }), ErrorCode::dimension_mismatch);
}

TEST(Csv, ParsesQuotedFieldsAndWhitespace) {
  const auto t = ccrm::csv::read_string("y, \"x\",z\n1.5, 2 ,-3e-1\n\"4\",5,6\n\n");
  ASSERT_EQ(t.header.size(), 3u);
  EXPECT_EQ(t.header[1], "x");
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_DOUBLE_EQ(t.column("z")[0], -0.3);
  EXPECT_DOUBLE_EQ(t.column("y")[1], 4.0);
}

TEST(Csv, ErrorsNameTheLine) {
  try {
    ccrm::csv::read_string("a,b\n1,2\n3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parse);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  try {
    ccrm::csv::read_string("a,b\n1,2\n3,abc\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parse);
    EXPECT_NE(std::string(e.what()).find("line 3, column 'b'"), std::string::npos);
  }
  EXPECT_EQ(code_of([] { ccrm::csv::read_string(""); }), ErrorCode::parse);
  EXPECT_EQ(code_of([] { ccrm::csv::read_string("a,a\n1,2\n"); }), ErrorCode::parse);
  EXPECT_EQ(code_of([] { ccrm::csv::read_string("a\n1\n").column("b"); }), ErrorCode::invalid_argument);
}

}  // namespace
