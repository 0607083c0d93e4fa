#include <gtest/gtest.h>

#include <cmath>

#include "ccrm/mcsim.hpp"

namespace {

using ccrm::Error;
using ccrm::ErrorCode;
using ccrm::Vector;
namespace mc = ccrm::mcsim;

double mean_of(const Vector& v) { return v.mean(); }
double var_of(const Vector& v) { return (v.array() - v.mean()).square().mean(); }

TEST(Generate, BaselineMoments) {
  const auto sim = mc::generate(mc::make_spec(mc::DgpKind::baseline, "high", 200000), 7);
  const Vector& x = sim.sample.x();
  EXPECT_NEAR(mean_of(x), 0.0, 0.01);
  EXPECT_NEAR(var_of(x), 1.0, 0.02);
  EXPECT_NEAR((x.array().cube()).mean(), 2.0, 0.1);  // skewness of (chi2(2)-2)/2
  EXPECT_NEAR(sim.u.array().square().mean(), 1.0, 0.02);
  EXPECT_NEAR((sim.beta.array() == 1.0).cast<double>().mean(), 0.5, 0.005);
  const Vector v1 = sim.sample.z().col(1) - x;
  EXPECT_NEAR(var_of(v1), 1.0, 0.02);
  EXPECT_NEAR(var_of(sim.sample.z().col(2) - sim.sample.z().col(1)), 1.0, 0.02);
  const mc::DgpSpec spec = mc::make_spec(mc::DgpKind::baseline, "high", 200000);
  const Vector resid = sim.sample.y() - x.cwiseProduct(sim.beta) - sim.sample.z() * spec.z_coefficients();
  EXPECT_LT((resid - sim.u).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Generate, VariantDesigns) {
  const Eigen::Index n = 200000;
  const auto cx = mc::generate(mc::make_spec(mc::DgpKind::categorical_x, "high", n), 7);
  EXPECT_NEAR(cx.sample.x().head(n / 2).mean(), 0.0, 0.015);
  EXPECT_NEAR(cx.sample.x().tail(n / 2).mean(), 0.5, 0.015);
  EXPECT_NEAR(var_of(cx.sample.x().tail(n / 2)), 0.5, 0.02);

  const auto cu = mc::generate(mc::make_spec(mc::DgpKind::categorical_u, "high", n), 7);
  EXPECT_NEAR(cu.u.head(n / 2).array().square().mean(), 2.0, 0.05);
  EXPECT_NEAR(cu.u.tail(n / 2).array().square().mean(), 1.0, 0.03);
  EXPECT_NEAR(cu.u.tail(n / 2).mean(), 0.0, 0.01);
  EXPECT_GT(cu.u.tail(n / 2).minCoeff(), -1.0 - 1e-12);

  const auto ch = mc::generate(mc::make_spec(mc::DgpKind::conditional_hetero, "high", n), 7);
  EXPECT_NEAR(ch.u.cwiseQuotient(ch.sample.x()).array().square().mean(), 1.0, 0.02);

  const auto k3 = mc::generate(mc::make_spec(mc::DgpKind::k3, "high", n), 7);
  EXPECT_NEAR((k3.beta.array() == 3.0).cast<double>().mean(), 0.4, 0.005);
  EXPECT_NEAR(k3.beta.mean(), 2.1, 0.01);
}

TEST(Generate, HeterogeneityShiftsAreSharedAcrossReplications) {
  auto spec = mc::make_spec(mc::DgpKind::hetero, "high", 400);
  spec.hetero_degree = 0.5;
  auto base = spec;
  base.kind = mc::DgpKind::baseline;
  Vector shifts[2];
  for (std::uint64_t rep = 0; rep < 2; ++rep) {
    const auto h = mc::generate(spec, 3, rep);
    const auto b = mc::generate(base, 3, rep);
    shifts[rep] = h.u - b.u;
    EXPECT_EQ(shifts[rep].tail(400 - 20).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(shifts[rep].head(20).cwiseAbs().minCoeff(), 0.0);
  }
  EXPECT_LT((shifts[0] - shifts[1]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Generate, DeterministicAndReplicationSpecific) {
  const auto spec = mc::make_spec(mc::DgpKind::baseline, "low", 50);
  const auto a = mc::generate(spec, 11, 4);
  const auto b = mc::generate(spec, 11, 4);
  const auto c = mc::generate(spec, 11, 5);
  EXPECT_EQ(a.sample.y(), b.sample.y());
  EXPECT_NE(a.sample.y(), c.sample.y());
  EXPECT_THROW(mc::generate(mc::make_spec(mc::DgpKind::baseline, "high", 9), 1), Error);
  EXPECT_THROW(mc::parametrization("medium"), Error);
}

TEST(Aggregate, BiasRmseSizeAndPower) {
  const auto spec = mc::make_spec(mc::DgpKind::baseline, "high", 100);
  std::vector<mc::ReplicationResult> results(4);
  const double est[] = {1.6, 1.4, 1.5, 2.0};
  for (int i = 0; i < 4; ++i) {
    results[i].names = {"p"};
    results[i].truth = {1.5};
    results[i].estimate = {est[i]};
    results[i].std_error = {0.1};
  }
  results[2].failure = "rank_deficient";
  mc::EstimatorConfig cfg;
  cfg.power_points = 3;
  cfg.power_halfwidth = 4.0;
  const auto report = mc::aggregate(spec, cfg, 9, results);
  EXPECT_EQ(report.failures, 1u);
  EXPECT_EQ(report.failure_reasons.at("rank_deficient"), 1u);
  const auto& p = report.parameter("p");
  EXPECT_EQ(p.valid, 3u);
  EXPECT_NEAR(p.bias, (0.1 - 0.1 + 0.5) / 3.0, 1e-15);
  EXPECT_NEAR(p.rmse, std::sqrt((0.01 + 0.01 + 0.25) / 3.0), 1e-15);
  EXPECT_NEAR(p.size, 1.0 / 3.0, 1e-15);  // only |2.0 - 1.5| / 0.1 exceeds 1.96
  ASSERT_EQ(report.power.size(), 3u);
  EXPECT_DOUBLE_EQ(report.power[1].theta_delta, 1.5);
  EXPECT_DOUBLE_EQ(report.power[1].rejection_rate, p.size);
  EXPECT_NEAR(report.power[0].theta_delta, 1.1, 1e-12);
}

TEST(RunStudy, ThreadCountDoesNotChangeResults) {
  const auto spec = mc::make_spec(mc::DgpKind::baseline, "high", 500);
  mc::EstimatorConfig one, three;
  one.threads = 1;
  three.threads = 3;
  const auto a = mc::run_study(spec, 6, one, 21);
  const auto b = mc::run_study(spec, 6, three, 21);
  EXPECT_EQ(mc::to_json(a).dump(), mc::to_json(b).dump());
  EXPECT_EQ(mc::to_csv(a), mc::to_csv(b));
}

TEST(RunStudy, SubsetMatchesSmallerRun) {
  const auto spec = mc::make_spec(mc::DgpKind::baseline, "high", 300);
  mc::EstimatorConfig cfg;
  cfg.stage = mc::Stage::moments;
  const auto big = mc::run_replications(spec, 5, cfg, 8);
  const auto small = mc::run_replications(spec, 3, cfg, 8);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(big[i].estimate, small[i].estimate);
    EXPECT_EQ(big[i].std_error, small[i].std_error);
  }
  const std::vector<mc::ReplicationResult> head(big.begin(), big.begin() + 3);
  EXPECT_EQ(mc::to_json(mc::aggregate(spec, cfg, 8, head)).dump(),
            mc::to_json(mc::aggregate(spec, cfg, 8, small)).dump());
}

TEST(Report, JsonRoundTripIsExact) {
  auto spec = mc::make_spec(mc::DgpKind::hetero, "low", 300);
  spec.hetero_degree = 0.3;
  mc::EstimatorConfig cfg;
  cfg.stage = mc::Stage::ols;
  const auto report = mc::run_study(spec, 4, cfg, 5);
  const std::string text = mc::to_json(report).dump(2);
  const auto back = mc::from_json(nlohmann::ordered_json::parse(text));
  EXPECT_EQ(mc::to_json(back).dump(2), text);
  EXPECT_EQ(back.parameters.size(), report.parameters.size());
  EXPECT_EQ(back.parameters[0].rmse, report.parameters[0].rmse);
  EXPECT_EQ(back.power.back().theta_delta, report.power.back().theta_delta);
}

TEST(Report, OlsStageParameterNames) {
  mc::EstimatorConfig cfg;
  cfg.stage = mc::Stage::ols;
  const auto report = mc::run_study(mc::make_spec(mc::DgpKind::baseline, "high", 200), 2, cfg, 1);
  ASSERT_EQ(report.parameters.size(), 4u);
  EXPECT_EQ(report.parameters[0].name, "ols.E_beta");
  EXPECT_EQ(report.parameters[2].name, "ols.gamma1");
  EXPECT_DOUBLE_EQ(report.parameters[1].truth, 0.25);
  EXPECT_THROW(mc::run_study(mc::make_spec(mc::DgpKind::baseline, "high", 200), 0, cfg, 1), Error);
}

}  // namespace
