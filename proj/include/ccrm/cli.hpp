#pragma once

// Command-line front end. Kept in a header so the test suite can drive it
// in-process; tools/ccrm.cpp is a thin main().
//
// Exit codes: 0 success, 1 input or usage error, 2 identification failure.

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ccrm/catdist.hpp"
#include "ccrm/core.hpp"
#include "ccrm/csv.hpp"
#include "ccrm/gmm.hpp"
#include "ccrm/mcsim.hpp"
#include "ccrm/momsolve.hpp"
#include "json.hpp"

namespace ccrm::cli {

using json = nlohmann::ordered_json;

enum ExitCode : int { kSuccess = 0, kInputError = 1, kIdentificationFailure = 2 };

namespace detail {

inline json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline json numbers(const Vector& v) {
  json arr = json::array();
  for (double x : v) arr.push_back(number(x));
  return arr;
}

inline void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorCode::invalid_argument, "cannot write '" + path + "'");
  file << text;
}

inline std::vector<double> parse_list(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto table = csv::read_string("v\n" + item + "\n");
    values.push_back(table.columns[0][0]);
  }
  return values;
}

struct CsvRows {
  std::ostringstream out;
  CsvRows() { out << "block,parameter,estimate,std_error\n"; }
  void add(const std::string& block, const std::string& name, double est, double se) {
    out << block << ',' << name << ',' << mcsim::format_double(est) << ','
        << (std::isfinite(se) ? mcsim::format_double(se) : "") << '\n';
  }
};

}  // namespace detail

struct EstimateConfig {
  std::string input;
  std::string outcome;
  std::string focal;
  std::vector<std::string> covariates;
  bool intercept = true;
  int K = 2;
  int S = 0;
  std::string out;
  std::string format = "json";
};

struct EstimateReport {
  json document;
  std::string csv;
  bool pi_not_identified = false;
};

/// Builds the estimate report; throws ccrm::Error on input or identification problems.
inline EstimateReport build_estimate(const EstimateConfig& cfg) {
  const auto table = csv::read_file(cfg.input);
  if (table.rows() == 0) throw Error(ErrorCode::invalid_argument, "input has a header but no data rows");
  const Vector y = table.column(cfg.outcome);
  const Vector x = table.column(cfg.focal);
  const auto n = static_cast<Eigen::Index>(table.rows());
  const Eigen::Index pz = static_cast<Eigen::Index>(cfg.covariates.size()) + (cfg.intercept ? 1 : 0);
  Matrix z(n, pz);
  std::vector<std::string> phi_names{cfg.focal};
  Eigen::Index col = 0;
  if (cfg.intercept) {
    z.col(col++).setOnes();
    phi_names.emplace_back("intercept");
  }
  for (const auto& name : cfg.covariates) {
    z.col(col++) = table.column(name);
    phi_names.push_back(name);
  }
  const RegressionSample sample(y, x, z);

  gmm::Options options;
  options.S = cfg.S;
  options.require_convergence = false;
  const auto est = gmm::estimate(sample, cfg.K, options);
  const int K = cfg.K;

  EstimateReport report;
  report.pi_not_identified = est.flags.pi_not_identified;
  json& doc = report.document;
  detail::CsvRows rows;
  doc["n"] = n;
  doc["K"] = K;
  doc["S"] = est.S;

  const Vector phi_se = est.phi.std_errors();
  json phi = json::array();
  for (std::size_t j = 0; j < phi_names.size(); ++j) {
    const auto idx = static_cast<Eigen::Index>(j);
    phi.push_back({{"name", phi_names[j]}, {"estimate", est.phi.phi[idx]}, {"std_error", detail::number(phi_se[idx])}});
    rows.add("phi", phi_names[j], est.phi.phi[idx], phi_se[idx]);
  }
  doc["phi"] = phi;

  const int R = 2 * K - 1;
  const Vector mom_se = est.moments.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  json moments;
  moments["m"] = detail::numbers(est.moments.m);
  moments["m_std_error"] = detail::numbers(mom_se.head(R));
  moments["sigma"] = detail::numbers(est.moments.sigma);
  moments["sigma_std_error"] = detail::numbers(mom_se.tail(2 * K - 2));
  doc["moments"] = moments;
  for (int r = 1; r <= R; ++r) rows.add("moments", "m" + std::to_string(r), est.moments.m[r - 1], mom_se[r - 1]);
  for (int r = 2; r <= R; ++r) {
    rows.add("moments", "sigma" + std::to_string(r), est.moments.sigma[r - 2], mom_se[R + r - 2]);
  }

  const Vector se = est.std_errors();
  json theta;
  if (est.flags.pi_not_identified) {
    theta["pi"] = json::array({1.0});
    theta["pi_std_error"] = json::array({nullptr});
    theta["b"] = json::array({est.theta.b()[0]});
    theta["b_std_error"] = json::array({detail::number(se[0])});
    theta["sigma"] = detail::numbers(est.sigma);
    theta["sigma_std_error"] = detail::numbers(se.tail(2 * K - 2));
    rows.add("theta", "b1", est.theta.b()[0], se[0]);
  } else {
    theta["pi"] = detail::numbers(est.theta.pi());
    Vector pi_se(K);
    pi_se.head(K - 1) = se.head(K - 1);
    // pi_K = 1 - sum of the others.
    Vector grad = Vector::Zero(se.size());
    grad.head(K - 1).setConstant(-1.0);
    pi_se[K - 1] = std::sqrt(std::max(0.0, grad.dot(est.cov * grad)));
    theta["pi_std_error"] = detail::numbers(pi_se);
    theta["b"] = detail::numbers(est.theta.b());
    theta["b_std_error"] = detail::numbers(se.segment(K - 1, K));
    theta["sigma"] = detail::numbers(est.sigma);
    theta["sigma_std_error"] = detail::numbers(se.tail(2 * K - 2));
    for (int k = 0; k < K; ++k) rows.add("theta", "pi" + std::to_string(k + 1), est.theta.pi()[k], pi_se[k]);
    for (int k = 0; k < K; ++k) rows.add("theta", "b" + std::to_string(k + 1), est.theta.b()[k], se[K - 1 + k]);
  }
  for (int r = 2; r <= R; ++r) {
    rows.add("theta", "sigma" + std::to_string(r), est.sigma[r - 2], se[se.size() - (2 * K - 2) + (r - 2)]);
  }
  doc["theta"] = theta;

  // b_K / b_1 with a delta-method standard error.
  if (!est.flags.pi_not_identified && K >= 2) {
    const double b1 = est.theta.b()[0];
    const double bK = est.theta.b()[K - 1];
    Vector grad = Vector::Zero(se.size());
    grad[K - 1] = -bK / (b1 * b1);
    grad[2 * K - 2] = 1.0 / b1;
    const double ratio = bK / b1;
    const double ratio_se = std::sqrt(std::max(0.0, grad.dot(est.cov * grad)));
    doc["ratio"] = {{"value", detail::number(ratio)}, {"std_error", detail::number(ratio_se)}};
    rows.add("ratio", "b" + std::to_string(K) + "/b1", ratio, ratio_se);
  } else {
    doc["ratio"] = nullptr;
  }

  if (K >= 2 && est.moments.m[1] > 0.0) {
    const double kappa = momsolve::kappa_squared(MomentSet(est.moments.m, est.moments.sigma, K));
    doc["kappa2"] = kappa;
    rows.add("kappa2", "kappa2", kappa, NAN);
  } else {
    doc["kappa2"] = nullptr;
  }
  doc["objective"] = detail::number(est.objective);
  doc["flags"] = {{"pi_not_identified", est.flags.pi_not_identified},
                  {"weighting_regularized", est.flags.weighting_regularized},
                  {"sigma2_clamped", est.flags.sigma2_clamped},
                  {"initial_moments_inconsistent", est.flags.initial_moments_inconsistent},
                  {"boundary", est.flags.boundary},
                  {"converged", est.flags.converged}};
  report.csv = rows.out.str();
  return report;
}

struct SimulateConfig {
  std::string dgp = "baseline";
  std::string var = "high";
  long n = 1000;
  long reps = 100;
  std::uint64_t seed = 1;
  std::string estimator = "full";
  int K = 0;
  int S = 0;
  double hetero_degree = 0.5;
  std::string out;
  std::string format = "json";
};

inline mcsim::McReport run_simulation(const SimulateConfig& cfg) {
  auto spec = mcsim::make_spec(mcsim::parse_kind(cfg.dgp), cfg.var, cfg.n);
  spec.hetero_degree = cfg.hetero_degree;
  mcsim::EstimatorConfig est;
  est.stage = mcsim::parse_stage(cfg.estimator);
  est.K = cfg.K;
  est.gmm.S = cfg.S;
  return mcsim::run_study(spec, static_cast<std::size_t>(cfg.reps), est, cfg.seed);
}

inline std::string render(const mcsim::McReport& report, const std::string& format) {
  return format == "csv" ? mcsim::to_csv(report) : mcsim::to_json(report).dump(2) + "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Categorical random coefficient models: estimation, moment inversion and Monte Carlo"};
  app.require_subcommand(1);

  EstimateConfig ecfg;
  auto* estimate = app.add_subcommand("estimate", "Estimate the distribution of the focal slope from a CSV file");
  estimate->add_option("--input", ecfg.input, "CSV file with a header row")->required();
  estimate->add_option("--outcome", ecfg.outcome, "Outcome column")->required();
  estimate->add_option("--focal", ecfg.focal, "Column whose slope is categorical")->required();
  estimate->add_option("--covariates", ecfg.covariates, "Columns with homogeneous slopes")->delimiter(',');
  estimate->add_flag("!--no-intercept", ecfg.intercept, "Do not add a constant to the covariates");
  estimate->add_option("--k", ecfg.K, "Number of categories")->check(CLI::Range(1, 6));
  estimate->add_option("--s-order", ecfg.S, "Highest x-moment order in the GMM stack (default 2K)");
  estimate->add_option("--out", ecfg.out, "Output file (default stdout)");
  estimate->add_option("--format", ecfg.format, "Output format")->check(CLI::IsMember({"json", "csv"}));

  SimulateConfig scfg;
  auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo study");
  simulate->add_option("--dgp", scfg.dgp, "baseline | categorical_x | categorical_u | k3 | hetero | conditional_hetero")
      ->check(CLI::IsMember({"baseline", "categorical_x", "categorical_u", "k3", "hetero", "conditional_hetero"}));
  simulate->add_option("--var", scfg.var, "Parametrization of beta")
      ->check(CLI::IsMember({"high", "low", "var6", "var19"}));
  simulate->add_option("--n", scfg.n, "Sample size")->check(CLI::Range(10L, std::numeric_limits<long>::max()));
  simulate->add_option("--reps", scfg.reps, "Replications")->check(CLI::Range(1L, std::numeric_limits<long>::max()));
  simulate->add_option("--seed", scfg.seed, "Master seed");
  simulate->add_option("--estimator", scfg.estimator, "Stages to run")->check(CLI::IsMember({"ols", "moments", "full"}));
  simulate->add_option("--k", scfg.K, "Categories assumed by the estimator (default: the DGP's)")->check(CLI::Range(1, 6));
  simulate->add_option("--s-order", scfg.S, "Highest x-moment order in the GMM stack (default 2K)");
  simulate->add_option("--hetero-degree", scfg.hetero_degree, "Degree of idiosyncratic error heterogeneity")
      ->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--out", scfg.out, "Report file (default stdout); the power curve goes to <out>.power.csv");
  simulate->add_option("--format", scfg.format, "Report format")->check(CLI::IsMember({"json", "csv"}));

  int inv_k = 2;
  std::string inv_moments;
  std::string inv_format = "json";
  std::string inv_out;
  auto* invert = app.add_subcommand("invert-moments", "Recover (pi, b) from E(beta), ..., E(beta^{2K-1})");
  invert->add_option("--k", inv_k, "Number of categories")->check(CLI::Range(1, 6));
  invert->add_option("--moments", inv_moments, "Comma-separated m_1..m_{2K-1}")->required();
  invert->add_option("--out", inv_out, "Output file (default stdout)");
  invert->add_option("--format", inv_format, "Output format")->check(CLI::IsMember({"json", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  }

  try {
    if (*estimate) {
      const auto report = build_estimate(ecfg);
      detail::emit(ecfg.format == "csv" ? report.csv : report.document.dump(2) + "\n", ecfg.out, out);
      if (!report.document["flags"]["converged"].get<bool>()) {
        err << "warning: the GMM optimizer stopped before meeting its tolerance\n";
      }
      if (report.pi_not_identified) {
        err << "identification: var(beta) is numerically zero; pi is not identified, reporting a point mass\n";
        return kIdentificationFailure;
      }
      return kSuccess;
    }
    if (*simulate) {
      const auto report = run_simulation(scfg);
      detail::emit(render(report, scfg.format), scfg.out, out);
      if (!scfg.out.empty()) detail::emit(mcsim::power_csv(report), scfg.out + ".power.csv", out);
      err << "simulate: " << report.replications << " replications, " << report.failures << " failed, "
          << report.runtime_seconds << " s\n";
      return kSuccess;
    }
    if (*invert) {
      const auto values = detail::parse_list(inv_moments);
      const Vector m = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
      const auto theta = catdist::invert(m, inv_k);
      std::string text;
      if (inv_format == "csv") {
        std::ostringstream rows;
        rows << "category,pi,b\n";
        for (int k = 0; k < theta.K(); ++k) {
          rows << k + 1 << ',' << mcsim::format_double(theta.pi()[k]) << ',' << mcsim::format_double(theta.b()[k])
               << '\n';
        }
        text = rows.str();
      } else {
        json doc;
        doc["K"] = theta.K();
        doc["pi"] = detail::numbers(theta.pi());
        doc["b"] = detail::numbers(theta.b());
        text = doc.dump(2) + "\n";
      }
      detail::emit(text, inv_out, out);
      return kSuccess;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_identification_failure(e.code()) ? kIdentificationFailure : kInputError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}

}  // namespace ccrm::cli
