#pragma once

// Unconstrained minimizers used by the GMM stages: a Nelder-Mead simplex
// search followed by BFGS with an Armijo backtracking line search.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "ccrm/core.hpp"

namespace ccrm::optimize {

using Objective = std::function<double(const Vector&)>;
/// Returns the objective and writes the gradient.
using ObjectiveWithGradient = std::function<double(const Vector&, Vector&)>;

struct Options {
  double f_tolerance = 1e-10;
  int max_evaluations = 10000;
  double initial_step = 0.1;
  double gradient_tolerance = 1e-9;
  int max_bfgs_iterations = 500;
};

struct Result {
  Vector x;
  double value = std::numeric_limits<double>::infinity();
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  int evaluations = 0;
  int iterations = 0;
  bool converged = false;
};

inline Result nelder_mead(const Objective& f, const Vector& start, const Options& opt = {}) {
  const auto dim = start.size();
  Result res;
  auto eval = [&](const Vector& x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  if (dim == 0) {
    res.x = start;
    res.value = eval(start);
    res.converged = true;
    return res;
  }

  std::vector<Vector> pts(dim + 1, start);
  std::vector<double> vals(dim + 1);
  for (Eigen::Index j = 0; j < dim; ++j) {
    pts[j + 1][j] += opt.initial_step * std::max(1.0, std::abs(start[j]));
  }
  for (std::size_t j = 0; j < pts.size(); ++j) vals[j] = eval(pts[j]);

  std::vector<std::size_t> order(dim + 1);
  while (res.evaluations < opt.max_evaluations) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second_worst = order[dim - 1];
    ++res.iterations;

    if (std::isfinite(vals[worst]) &&
        vals[worst] - vals[best] <= opt.f_tolerance * (std::abs(vals[best]) + opt.f_tolerance)) {
      res.converged = true;
      break;
    }

    Vector centroid = Vector::Zero(dim);
    for (std::size_t j = 0; j <= static_cast<std::size_t>(dim); ++j)
      if (j != worst) centroid += pts[j];
    centroid /= static_cast<double>(dim);

    const Vector reflected = centroid + (centroid - pts[worst]);
    const double f_reflected = eval(reflected);
    if (f_reflected < vals[best]) {
      const Vector expanded = centroid + 2.0 * (centroid - pts[worst]);
      const double f_expanded = eval(expanded);
      if (f_expanded < f_reflected) {
        pts[worst] = expanded;
        vals[worst] = f_expanded;
      } else {
        pts[worst] = reflected;
        vals[worst] = f_reflected;
      }
      continue;
    }
    if (f_reflected < vals[second_worst]) {
      pts[worst] = reflected;
      vals[worst] = f_reflected;
      continue;
    }
    const bool outside = f_reflected < vals[worst];
    const Vector contracted =
        outside ? Vector(centroid + 0.5 * (reflected - centroid)) : Vector(centroid + 0.5 * (pts[worst] - centroid));
    const double f_contracted = eval(contracted);
    if (f_contracted < std::min(f_reflected, vals[worst])) {
      pts[worst] = contracted;
      vals[worst] = f_contracted;
      continue;
    }
    for (std::size_t j = 0; j <= static_cast<std::size_t>(dim); ++j) {
      if (j == best) continue;
      pts[j] = pts[best] + 0.5 * (pts[j] - pts[best]);
      vals[j] = eval(pts[j]);
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
  res.x = pts[best];
  res.value = vals[best];
  return res;
}

inline Result bfgs(const ObjectiveWithGradient& f, const Vector& start, const Options& opt = {}) {
  const auto dim = start.size();
  Result res;
  res.x = start;
  Vector grad(dim);
  res.value = f(res.x, grad);
  ++res.evaluations;
  if (!std::isfinite(res.value) || !grad.allFinite()) return res;
  Matrix h_inv = Matrix::Identity(dim, dim);
  for (; res.iterations < opt.max_bfgs_iterations; ++res.iterations) {
    res.gradient_norm = grad.norm();
    if (res.gradient_norm <= opt.gradient_tolerance * (1.0 + std::abs(res.value))) {
      res.converged = true;
      break;
    }
    Vector dir = -h_inv * grad;
    double slope = dir.dot(grad);
    if (!(slope < 0.0)) {
      h_inv.setIdentity();
      dir = -grad;
      slope = dir.dot(grad);
    }
    double step = 1.0;
    Vector x_new(dim), g_new(dim);
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = res.x + step * dir;
      f_new = f(x_new, g_new);
      ++res.evaluations;
      if (std::isfinite(f_new) && g_new.allFinite() && f_new <= res.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No descent possible at working precision.
      res.converged = res.gradient_norm <= 1e-6 * (1.0 + std::abs(res.value));
      break;
    }
    const Vector s = x_new - res.x;
    const Vector y = g_new - grad;
    const double sy = s.dot(y);
    const double change = res.value - f_new;
    res.x = x_new;
    grad = g_new;
    res.value = f_new;
    if (sy > 1e-300) {
      const double rho = 1.0 / sy;
      const Matrix ident = Matrix::Identity(dim, dim);
      h_inv = (ident - rho * s * y.transpose()) * h_inv * (ident - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    if (change <= opt.f_tolerance * 1e-2 * (std::abs(f_new) + 1e-300) && s.norm() <= 1e-12 * (1.0 + res.x.norm())) {
      res.converged = true;
      break;
    }
    if (res.evaluations >= opt.max_evaluations) break;
  }
  res.gradient_norm = grad.norm();
  return res;
}

/// Simplex search, then quasi-Newton refinement from the simplex optimum.
inline Result minimize(const ObjectiveWithGradient& f, const Vector& start, const Options& opt = {}) {
  Vector scratch(start.size());
  auto value_only = [&](const Vector& x) { return f(x, scratch); };
  Result coarse = nelder_mead(value_only, start, opt);
  Result fine = bfgs(f, coarse.x, opt);
  fine.evaluations += coarse.evaluations;
  fine.iterations += coarse.iterations;
  if (!(fine.value <= coarse.value)) {
    coarse.gradient_norm = fine.gradient_norm;
    coarse.evaluations = fine.evaluations;
    coarse.iterations = fine.iterations;
    return coarse;
  }
  fine.converged = fine.converged || coarse.converged;
  return fine;
}

}  // namespace ccrm::optimize
