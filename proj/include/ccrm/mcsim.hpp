#pragma once

// Monte Carlo designs for the categorical random coefficient model and the
// replication harness that turns estimates into bias / RMSE / size / power.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ccrm/catdist.hpp"
#include "ccrm/core.hpp"
#include "ccrm/gmm.hpp"
#include "ccrm/ols.hpp"
#include "ccrm/rng.hpp"
#include "json.hpp"

namespace ccrm::mcsim {

enum class DgpKind {
  baseline,
  categorical_x,
  categorical_u,
  k3,
  hetero,
  /// Baseline regressors with u_i = x_i eps_i.
  conditional_hetero,
};

inline std::string to_string(DgpKind kind) {
  switch (kind) {
    case DgpKind::baseline: return "baseline";
    case DgpKind::categorical_x: return "categorical_x";
    case DgpKind::categorical_u: return "categorical_u";
    case DgpKind::k3: return "k3";
    case DgpKind::hetero: return "hetero";
    case DgpKind::conditional_hetero: return "conditional_hetero";
  }
  return "unknown";
}

inline DgpKind parse_kind(const std::string& name) {
  for (auto kind : {DgpKind::baseline, DgpKind::categorical_x, DgpKind::categorical_u, DgpKind::k3,
                    DgpKind::hetero, DgpKind::conditional_hetero}) {
    if (to_string(kind) == name) return kind;
  }
  throw Error(ErrorCode::invalid_argument, "unknown DGP '" + name + "'");
}

/// Named parametrizations of beta.
///  high:  pi = 0.5, b = (1, 2)         var = 0.25
///  low:   pi = 0.3, b = (0.5, 1.345)   var = 0.15
///  var6:  pi = 0.3, b = (0.5, 6)       var = 6.3525
///  var19: pi = 0.3, b = (0.5, 10)      var = 18.9525
///  k3:    pi = (0.3, 0.3, 0.4), b = (1, 2, 3)
inline CategoricalDistribution parametrization(const std::string& name) {
  auto two = [](double p, double lo, double hi) {
    Vector pi(2), b(2);
    pi << p, 1.0 - p;
    b << lo, hi;
    return CategoricalDistribution(pi, b);
  };
  if (name == "high") return two(0.5, 1.0, 2.0);
  if (name == "low") return two(0.3, 0.5, 1.345);
  if (name == "var6") return two(0.3, 0.5, 6.0);
  if (name == "var19") return two(0.3, 0.5, 10.0);
  if (name == "k3") {
    Vector pi(3), b(3);
    pi << 0.3, 0.3, 0.4;
    b << 1.0, 2.0, 3.0;
    return {pi, b};
  }
  throw Error(ErrorCode::invalid_argument, "unknown parametrization '" + name + "'");
}

struct DgpSpec {
  DgpKind kind = DgpKind::baseline;
  CategoricalDistribution theta = parametrization("high");
  std::string parametrization_name = "high";
  Eigen::Index n = 1000;
  double alpha_intercept = 0.25;
  Vector gamma = Vector::Ones(2);
  /// Degree of idiosyncratic heterogeneity for DgpKind::hetero: the first
  /// floor(n^degree) errors carry a fixed shift e_i.
  double hetero_degree = 0.5;

  void validate() const {
    if (n < 10) throw Error(ErrorCode::invalid_argument, "DGP needs n >= 10");
    if (gamma.size() != 2) throw Error(ErrorCode::invalid_argument, "DGP gamma must have two entries");
    if (kind == DgpKind::hetero && !(hetero_degree >= 0.0 && hetero_degree <= 1.0)) {
      throw Error(ErrorCode::invalid_argument, "heterogeneity degree must lie in [0, 1]");
    }
  }

  /// (alpha, gamma_1, gamma_2): the slopes on Z = [1, z_1, z_2].
  Vector z_coefficients() const {
    Vector out(3);
    out << alpha_intercept, gamma[0], gamma[1];
    return out;
  }
};

inline DgpSpec make_spec(DgpKind kind, const std::string& parametrization_name, Eigen::Index n) {
  DgpSpec spec;
  spec.kind = kind;
  spec.parametrization_name = kind == DgpKind::k3 ? "k3" : parametrization_name;
  spec.theta = parametrization(spec.parametrization_name);
  spec.n = n;
  return spec;
}

struct SimulatedSample {
  RegressionSample sample;
  Vector beta;
  Vector u;
};

namespace detail {

enum Stream : std::uint64_t { kRegressor = 1, kCovariate = 2, kError = 3, kSlope = 4, kFixedEffect = 5 };

inline double chi_squared(rng::Engine& eng, int df) {
  std::normal_distribution<double> normal;
  double acc = 0.0;
  for (int j = 0; j < df; ++j) {
    const double z = normal(eng);
    acc += z * z;
  }
  return acc;
}

}  // namespace detail

/// Draws one sample. Deterministic in (spec, seed, replication); the fixed
/// heterogeneity shifts depend on seed only.
inline SimulatedSample generate(const DgpSpec& spec, std::uint64_t seed, std::uint64_t replication = 0) {
  spec.validate();
  using namespace detail;
  const auto n = spec.n;
  const auto half = n / 2;
  auto x_eng = rng::engine(seed, replication, kRegressor);
  auto z_eng = rng::engine(seed, replication, kCovariate);
  auto u_eng = rng::engine(seed, replication, kError);
  auto b_eng = rng::engine(seed, replication, kSlope);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;

  Vector x(n), beta(n), u(n), y(n);
  Matrix z(n, 3);
  const auto& pi = spec.theta.pi();
  const auto& b = spec.theta.b();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (spec.kind == DgpKind::categorical_x && i >= half) {
      x[i] = (chi_squared(x_eng, 4) - 2.0) / 4.0;
    } else {
      x[i] = (chi_squared(x_eng, 2) - 2.0) / 2.0;
    }
    const double z1 = x[i] + normal(z_eng);
    const double z2 = z1 + normal(z_eng);
    z(i, 0) = 1.0;
    z(i, 1) = z1;
    z(i, 2) = z2;

    const double draw = uniform(b_eng);
    double cumulative = 0.0;
    int k = 0;
    for (; k < spec.theta.K() - 1; ++k) {
      cumulative += pi[k];
      if (draw < cumulative) break;
    }
    beta[i] = b[k];

    switch (spec.kind) {
      case DgpKind::categorical_u:
        if (i < half) {
          u[i] = std::sqrt(chi_squared(u_eng, 2)) * normal(u_eng);
        } else {
          u[i] = (chi_squared(u_eng, 2) - 2.0) / 2.0;
        }
        break;
      case DgpKind::conditional_hetero:
        u[i] = x[i] * normal(u_eng);
        break;
      default: {
        const double scale = std::sqrt(0.5 * (1.0 + chi_squared(u_eng, 1)));
        u[i] = scale * normal(u_eng);
      }
    }
  }
  if (spec.kind == DgpKind::hetero) {
    const auto shifted = std::min<Eigen::Index>(
        n, static_cast<Eigen::Index>(std::floor(std::pow(static_cast<double>(n), spec.hetero_degree))));
    auto e_eng = rng::engine(seed, rng::kSharedReplication, kFixedEffect);
    for (Eigen::Index i = 0; i < shifted; ++i) u[i] += normal(e_eng);
  }
  const Vector coef = spec.z_coefficients();
  y = x.cwiseProduct(beta) + z * coef + u;
  return {RegressionSample(std::move(y), std::move(x), std::move(z)), std::move(beta), std::move(u)};
}

/// How far each replication goes.
///  ols:     least squares only
///  moments: plus two-step GMM for (m, sigma)
///  full:    plus two-step GMM for (theta, sigma)
enum class Stage { ols, moments, full };

inline Stage parse_stage(const std::string& name) {
  if (name == "ols") return Stage::ols;
  if (name == "moments") return Stage::moments;
  if (name == "full") return Stage::full;
  throw Error(ErrorCode::invalid_argument, "unknown estimator stage '" + name + "'");
}

inline std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::ols: return "ols";
    case Stage::moments: return "moments";
    case Stage::full: return "full";
  }
  return "unknown";
}

struct EstimatorConfig {
  Stage stage = Stage::full;
  /// Category count used by the estimator; 0 uses the DGP's K.
  int K = 0;
  gmm::Options gmm{};
  /// Points on the power grid (odd, so the truth is on it).
  int power_points = 21;
  /// Half-width of the power grid in units of the median standard error.
  double power_halfwidth = 4.0;
  /// Worker threads; 0 reads CCRM_THREADS and falls back to the hardware count.
  unsigned threads = 0;
};

inline constexpr double kCriticalValue = 1.959963984540054;  // Phi^{-1}(0.975)

struct ParameterRecord {
  std::string name;
  double truth = 0.0;
  double bias = 0.0;
  double rmse = 0.0;
  double size = 0.0;
  std::size_t valid = 0;
};

struct PowerPoint {
  std::string parameter;
  double theta_delta = 0.0;
  double rejection_rate = 0.0;
};

struct McReport {
  DgpSpec spec;
  Stage stage = Stage::full;
  std::size_t replications = 0;
  std::uint64_t seed = 0;
  std::size_t failures = 0;
  std::map<std::string, std::size_t> failure_reasons;
  std::vector<ParameterRecord> parameters;
  std::vector<PowerPoint> power;
  /// Wall-clock seconds; not part of the serialized report.
  double runtime_seconds = 0.0;

  const ParameterRecord& parameter(const std::string& name) const {
    for (const auto& p : parameters)
      if (p.name == name) return p;
    throw Error(ErrorCode::invalid_argument, "report has no parameter '" + name + "'");
  }
};

/// One replication's estimates with standard errors, in a fixed order.
struct ReplicationResult {
  std::vector<std::string> names;
  std::vector<double> truth;
  std::vector<double> estimate;
  std::vector<double> std_error;
  std::optional<std::string> failure;
};

inline ReplicationResult estimate_replication(const DgpSpec& spec, const EstimatorConfig& config,
                                              std::uint64_t seed, std::uint64_t replication) {
  ReplicationResult out;
  auto add = [&](std::string name, double truth, double est, double se) {
    out.names.push_back(std::move(name));
    out.truth.push_back(truth);
    out.estimate.push_back(est);
    out.std_error.push_back(se);
  };
  try {
    const auto sim = generate(spec, seed, replication);
    const int K = config.K == 0 ? spec.theta.K() : config.K;
    const Vector zc = spec.z_coefficients();
    if (config.stage == Stage::ols) {
      const auto phi = ols::estimate_phi(sim.sample);
      const Vector se = phi.std_errors();
      add("ols.E_beta", spec.theta.mean(), phi.phi[0], se[0]);
      add("ols.alpha", zc[0], phi.phi[1], se[1]);
      add("ols.gamma1", zc[1], phi.phi[2], se[2]);
      add("ols.gamma2", zc[2], phi.phi[3], se[3]);
    } else {
      gmm::Options opts = config.gmm;
      const auto est = gmm::estimate(sim.sample, K, opts);
      const Vector se_phi = est.phi.std_errors();
      add("ols.E_beta", spec.theta.mean(), est.phi.phi[0], se_phi[0]);
      add("ols.alpha", zc[0], est.phi.phi[1], se_phi[1]);
      add("ols.gamma1", zc[1], est.phi.phi[2], se_phi[2]);
      add("ols.gamma2", zc[2], est.phi.phi[3], se_phi[3]);
      const Vector true_m = catdist::forward_moments(spec.theta, 2 * K - 1);
      const Vector se_m = est.moments.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
      for (int r = 1; r <= 2 * K - 1; ++r) {
        add("moments.m" + std::to_string(r), true_m[r - 1], est.moments.m[r - 1], se_m[r - 1]);
      }
      if (config.stage == Stage::full) {
        if (est.flags.pi_not_identified) throw Error(ErrorCode::homogeneity, "pi not identified");
        if (spec.theta.K() != K) throw Error(ErrorCode::invalid_argument, "estimator K differs from the DGP");
        const Vector se = est.std_errors();
        for (int k = 0; k < K - 1; ++k) {
          add("gmm.pi" + std::to_string(k + 1), spec.theta.pi()[k], est.theta.pi()[k], se[k]);
        }
        for (int k = 0; k < K; ++k) {
          add("gmm.b" + std::to_string(k + 1), spec.theta.b()[k], est.theta.b()[k], se[K - 1 + k]);
        }
        // E(beta) = sum pi_k b_k by the delta method.
        Vector grad = Vector::Zero(est.cov.rows());
        const auto& pi = est.theta.pi();
        const auto& b = est.theta.b();
        for (int k = 0; k < K - 1; ++k) grad[k] = b[k] - b[K - 1];
        for (int k = 0; k < K; ++k) grad[K - 1 + k] = pi[k];
        add("gmm.E_beta", spec.theta.mean(), est.theta.mean(), std::sqrt(std::max(0.0, grad.dot(est.cov * grad))));
      }
    }
    for (std::size_t j = 0; j < out.std_error.size(); ++j) {
      if (!std::isfinite(out.estimate[j]) || !std::isfinite(out.std_error[j]) || !(out.std_error[j] > 0.0)) {
        throw Error(ErrorCode::rank_deficient, "non-finite estimate or standard error for " + out.names[j]);
      }
    }
  } catch (const Error& e) {
    out.failure = std::string(ccrm::to_string(e.code()));
  }
  return out;
}

inline unsigned resolve_threads(unsigned requested) {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CCRM_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) return std::min<unsigned>(hw, static_cast<unsigned>(cap));
  }
  return hw;
}

/// Bias, RMSE and size over the replications that succeeded.
inline McReport aggregate(const DgpSpec& spec, const EstimatorConfig& config, std::uint64_t seed,
                          const std::vector<ReplicationResult>& results) {
  McReport report;
  report.spec = spec;
  report.stage = config.stage;
  report.replications = results.size();
  report.seed = seed;
  const ReplicationResult* layout = nullptr;
  for (const auto& res : results) {
    if (res.failure) {
      ++report.failures;
      ++report.failure_reasons[*res.failure];
    } else if (!layout) {
      layout = &res;
    }
  }
  if (!layout) return report;

  const std::size_t params = layout->names.size();
  for (std::size_t j = 0; j < params; ++j) {
    ParameterRecord rec;
    rec.name = layout->names[j];
    rec.truth = layout->truth[j];
    double sum = 0.0, sum_sq = 0.0, rejections = 0.0;
    std::vector<double> errors;
    for (const auto& res : results) {
      if (res.failure) continue;
      const double err = res.estimate[j] - rec.truth;
      sum += err;
      sum_sq += err * err;
      if (std::abs(err) / res.std_error[j] > kCriticalValue) rejections += 1.0;
      errors.push_back(res.std_error[j]);
      ++rec.valid;
    }
    const auto count = static_cast<double>(rec.valid);
    rec.bias = sum / count;
    rec.rmse = std::sqrt(sum_sq / count);
    rec.size = rejections / count;
    report.parameters.push_back(rec);

    if (config.power_points > 0) {
      std::nth_element(errors.begin(), errors.begin() + static_cast<long>(errors.size() / 2), errors.end());
      const double median_se = errors[errors.size() / 2];
      const int half = config.power_points / 2;
      const double step = half > 0 ? config.power_halfwidth * median_se / half : 0.0;
      for (int g = -half; g <= half; ++g) {
        const double delta = rec.truth + g * step;
        double rejected = 0.0;
        for (const auto& res : results) {
          if (res.failure) continue;
          if (std::abs(res.estimate[j] - delta) / res.std_error[j] > kCriticalValue) rejected += 1.0;
        }
        report.power.push_back({rec.name, delta, rejected / count});
      }
    }
  }
  return report;
}

/// Replication i is a pure function of (spec, config, seed, i); workers pick
/// indices from a shared counter and results are aggregated in index order.
inline std::vector<ReplicationResult> run_replications(const DgpSpec& spec, std::size_t R,
                                                       const EstimatorConfig& config, std::uint64_t seed) {
  std::vector<ReplicationResult> results(R);
  const unsigned threads = std::min<unsigned>(resolve_threads(config.threads), static_cast<unsigned>(std::max<std::size_t>(R, 1)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < R; i = next++) results[i] = estimate_replication(spec, config, seed, i);
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return results;
}

inline McReport run_study(const DgpSpec& spec, std::size_t R, const EstimatorConfig& config, std::uint64_t seed) {
  if (R < 1) throw Error(ErrorCode::invalid_argument, "a study needs at least one replication");
  spec.validate();
  const auto start = std::chrono::steady_clock::now();
  auto report = aggregate(spec, config, seed, run_replications(spec, R, config, seed));
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// Serialization.

inline nlohmann::ordered_json to_json(const McReport& report) {
  nlohmann::ordered_json j;
  j["dgp"] = {{"kind", to_string(report.spec.kind)},
              {"parametrization", report.spec.parametrization_name},
              {"n", report.spec.n},
              {"pi", std::vector<double>(report.spec.theta.pi().begin(), report.spec.theta.pi().end())},
              {"b", std::vector<double>(report.spec.theta.b().begin(), report.spec.theta.b().end())},
              {"alpha", report.spec.alpha_intercept},
              {"gamma", std::vector<double>(report.spec.gamma.begin(), report.spec.gamma.end())}};
  if (report.spec.kind == DgpKind::hetero) j["dgp"]["hetero_degree"] = report.spec.hetero_degree;
  j["estimator"] = to_string(report.stage);
  j["replications"] = report.replications;
  j["seed"] = report.seed;
  j["failures"] = report.failures;
  j["failure_reasons"] = report.failure_reasons;
  auto& params = j["parameters"] = nlohmann::ordered_json::array();
  for (const auto& p : report.parameters) {
    params.push_back({{"name", p.name},
                      {"truth", p.truth},
                      {"bias", p.bias},
                      {"rmse", p.rmse},
                      {"size", p.size},
                      {"valid", p.valid}});
  }
  auto& power = j["power"] = nlohmann::ordered_json::array();
  for (const auto& p : report.power) {
    power.push_back({{"parameter", p.parameter}, {"theta_delta", p.theta_delta}, {"rejection_rate", p.rejection_rate}});
  }
  return j;
}

inline McReport from_json(const nlohmann::ordered_json& j) {
  McReport report;
  const auto& d = j.at("dgp");
  report.spec.kind = parse_kind(d.at("kind").get<std::string>());
  report.spec.parametrization_name = d.at("parametrization").get<std::string>();
  const auto pi = d.at("pi").get<std::vector<double>>();
  const auto b = d.at("b").get<std::vector<double>>();
  report.spec.theta = CategoricalDistribution(Eigen::Map<const Vector>(pi.data(), static_cast<Eigen::Index>(pi.size())),
                                              Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size())));
  report.spec.n = d.at("n").get<Eigen::Index>();
  report.spec.alpha_intercept = d.at("alpha").get<double>();
  const auto gamma = d.at("gamma").get<std::vector<double>>();
  report.spec.gamma = Eigen::Map<const Vector>(gamma.data(), static_cast<Eigen::Index>(gamma.size()));
  if (d.contains("hetero_degree")) report.spec.hetero_degree = d.at("hetero_degree").get<double>();
  report.stage = parse_stage(j.at("estimator").get<std::string>());
  report.replications = j.at("replications").get<std::size_t>();
  report.seed = j.at("seed").get<std::uint64_t>();
  report.failures = j.at("failures").get<std::size_t>();
  report.failure_reasons = j.at("failure_reasons").get<std::map<std::string, std::size_t>>();
  for (const auto& p : j.at("parameters")) {
    report.parameters.push_back({p.at("name").get<std::string>(), p.at("truth").get<double>(),
                                 p.at("bias").get<double>(), p.at("rmse").get<double>(), p.at("size").get<double>(),
                                 p.at("valid").get<std::size_t>()});
  }
  for (const auto& p : j.at("power")) {
    report.power.push_back(
        {p.at("parameter").get<std::string>(), p.at("theta_delta").get<double>(), p.at("rejection_rate").get<double>()});
  }
  return report;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One row per parameter: dgp, parametrization, n, estimator, parameter, truth, bias, rmse, size, valid, replications.
inline std::string to_csv(const McReport& report) {
  std::ostringstream out;
  out << "dgp,parametrization,n,estimator,parameter,truth,bias,rmse,size,valid,replications\n";
  for (const auto& p : report.parameters) {
    out << to_string(report.spec.kind) << ',' << report.spec.parametrization_name << ',' << report.spec.n << ','
        << to_string(report.stage) << ',' << p.name << ',' << format_double(p.truth) << ','
        << format_double(p.bias) << ',' << format_double(p.rmse) << ',' << format_double(p.size) << ','
        << p.valid << ',' << report.replications << '\n';
  }
  return out.str();
}

inline std::string power_csv(const McReport& report) {
  std::ostringstream out;
  out << "parameter,theta_delta,rejection_rate\n";
  for (const auto& p : report.power) {
    out << p.parameter << ',' << format_double(p.theta_delta) << ',' << format_double(p.rejection_rate) << '\n';
  }
  return out.str();
}

}  // namespace ccrm::mcsim
