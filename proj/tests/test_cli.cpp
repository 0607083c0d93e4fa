#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccrm/cli.hpp"
#include "ccrm/mcsim.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "ccrm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = ccrm::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ccrm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::string write_sample(const std::string& name, const ccrm::RegressionSample& s) const {
    std::ofstream out(path(name));
    out << "wage,edu,z1,z2\n";
    char buf[128];
    for (Eigen::Index i = 0; i < s.n(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", s.y()[i], s.x()[i], s.z()(i, 1), s.z()(i, 2));
      out << buf;
    }
    return path(name);
  }

  fs::path dir_;
};

TEST_F(CliTest, InvertMomentsReferenceTuples) {
  auto res = run({"invert-moments", "--k", "2", "--moments", "1.5,2.5,4.5"});
  ASSERT_EQ(res.code, 0) << res.err;
  auto doc = json::parse(res.out);
  EXPECT_NEAR(doc["pi"][0].get<double>(), 0.5, 1e-12);
  EXPECT_NEAR(doc["b"][1].get<double>(), 2.0, 1e-12);

  res = run({"invert-moments", "--k", "3", "--moments", "2.1,5.1,13.5,37.5,107.1"});
  ASSERT_EQ(res.code, 0) << res.err;
  doc = json::parse(res.out);
  const double pi[] = {0.3, 0.3, 0.4};
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(doc["pi"][k].get<double>(), pi[k], 1e-8);
    EXPECT_NEAR(doc["b"][k].get<double>(), k + 1.0, 1e-8);
  }
}

TEST_F(CliTest, InvertMomentsIdentificationFailure) {
  const auto res = run({"invert-moments", "--k", "2", "--moments", "2,4,8"});
  EXPECT_EQ(res.code, 2);
  EXPECT_NE(res.err.find("homogeneity"), std::string::npos);
  EXPECT_EQ(run({"invert-moments", "--k", "2", "--moments", "1,x,3"}).code, 1);
  EXPECT_EQ(run({"invert-moments", "--k", "2", "--moments", "1,2"}).code, 1);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"simulate", "--reps", "0"}).code, 1);
  EXPECT_EQ(run({"simulate", "--var", "medium"}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, SimulateIsByteIdenticalAcrossInvocations) {
  const std::vector<std::string> base{"simulate", "--dgp", "baseline", "--var", "high", "--n", "400",
                                      "--reps", "4", "--seed", "13", "--estimator", "moments"};
  auto first = base, second = base;
  first.insert(first.end(), {"--out", path("a.json")});
  second.insert(second.end(), {"--out", path("b.json")});
  ASSERT_EQ(run(first).code, 0);
  ASSERT_EQ(run(second).code, 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  EXPECT_EQ(slurp(path("a.json.power.csv")), slurp(path("b.json.power.csv")));
  const auto doc = json::parse(slurp(path("a.json")));
  EXPECT_EQ(doc["replications"].get<int>(), 4);
  EXPECT_EQ(doc["seed"].get<int>(), 13);

  auto csv = base;
  csv.insert(csv.end(), {"--format", "csv"});
  const auto res = run(csv);
  ASSERT_EQ(res.code, 0);
  EXPECT_EQ(res.out.rfind("dgp,parametrization,n,estimator,parameter", 0), 0u);
}

TEST_F(CliTest, EstimateOnSyntheticBaselineData) {
  const auto sim = ccrm::mcsim::generate(ccrm::mcsim::make_spec(ccrm::mcsim::DgpKind::baseline, "high", 10000), 2718);
  const auto csv = write_sample("dgp1.csv", sim.sample);
  const auto res = run({"estimate", "--input", csv, "--outcome", "wage", "--focal", "edu", "--covariates", "z1,z2",
                        "--k", "2", "--out", path("est.json")});
  ASSERT_EQ(res.code, 0) << res.err;
  const std::string text = slurp(path("est.json"));
  const auto doc = json::parse(text);
  // Bands of three Monte Carlo RMSEs around the truth at n = 10,000.
  EXPECT_NEAR(doc["theta"]["pi"][0].get<double>(), 0.5, 3 * 0.0301);
  EXPECT_NEAR(doc["theta"]["b"][0].get<double>(), 1.0, 3 * 0.0365);
  EXPECT_NEAR(doc["theta"]["b"][1].get<double>(), 2.0, 3 * 0.0362);
  EXPECT_EQ(doc["phi"][0]["name"], "edu");
  EXPECT_EQ(doc["phi"].size(), 4u);
  EXPECT_GT(doc["ratio"]["std_error"].get<double>(), 0.0);
  const double b1 = doc["theta"]["b"][0].get<double>(), b2 = doc["theta"]["b"][1].get<double>();
  EXPECT_DOUBLE_EQ(doc["ratio"]["value"].get<double>(), b2 / b1);
  EXPECT_GT(doc["kappa2"].get<double>(), 0.0);
  EXPECT_LT(doc["kappa2"].get<double>(), 1.0);
  EXPECT_FALSE(doc["flags"]["pi_not_identified"].get<bool>());
  // Re-serializing the parsed document reproduces the file.
  EXPECT_EQ(doc.dump(2) + "\n", text);

  const auto again = run({"estimate", "--input", csv, "--outcome", "wage", "--focal", "edu", "--covariates",
                          "z1,z2", "--format", "csv"});
  ASSERT_EQ(again.code, 0);
  EXPECT_NE(again.out.find("theta,pi1,"), std::string::npos);
  EXPECT_NE(again.out.find("ratio,b2/b1,"), std::string::npos);
}

TEST_F(CliTest, EstimateConstantRegressorIsInputError) {
  {
    std::ofstream out(path("flat.csv"));
    out << "y,x\n";
    for (int i = 0; i < 50; ++i) out << i * 0.1 << ",3\n";
  }
  const auto res = run({"estimate", "--input", path("flat.csv"), "--outcome", "y", "--focal", "x"});
  EXPECT_EQ(res.code, 1);
  EXPECT_NE(res.err.find("no_variation"), std::string::npos);
}

TEST_F(CliTest, EstimateHomogeneousSlope) {
  auto sim = ccrm::mcsim::generate(ccrm::mcsim::make_spec(ccrm::mcsim::DgpKind::baseline, "high", 5000), 31);
  // Same regressors and errors, slope fixed at 1.5.
  const ccrm::Vector y = 1.5 * sim.sample.x() + sim.sample.z() * (ccrm::Vector(3) << 0.25, 1.0, 1.0).finished() +
                         sim.u;
  const ccrm::RegressionSample homogeneous(y, sim.sample.x(), sim.sample.z());
  const auto csv = write_sample("flat_beta.csv", homogeneous);
  const auto res = run({"estimate", "--input", csv, "--outcome", "wage", "--focal", "edu", "--covariates", "z1,z2",
                        "--out", path("h.json")});
  EXPECT_EQ(res.code, 2) << res.err;
  const auto doc = json::parse(slurp(path("h.json")));
  EXPECT_TRUE(doc["flags"]["pi_not_identified"].get<bool>());
  EXPECT_EQ(doc["theta"]["pi"].size(), 1u);
  EXPECT_NEAR(doc["theta"]["b"][0].get<double>(), 1.5, 0.05);
  EXPECT_TRUE(doc["ratio"].is_null());
}

TEST_F(CliTest, EstimateInputErrors) {
  {
    std::ofstream out(path("bad.csv"));
    out << "y,x\n1,2\n3,oops\n";
  }
  auto res = run({"estimate", "--input", path("bad.csv"), "--outcome", "y", "--focal", "x"});
  EXPECT_EQ(res.code, 1);
  EXPECT_NE(res.err.find("line 3"), std::string::npos);
  res = run({"estimate", "--input", path("bad.csv"), "--outcome", "y", "--focal", "nope"});
  EXPECT_EQ(res.code, 1);
  res = run({"estimate", "--input", path("missing.csv"), "--outcome", "y", "--focal", "x"});
  EXPECT_EQ(res.code, 1);
  res = run({"estimate", "--input", path("bad.csv"), "--outcome", "y", "--focal", "x", "--k", "2", "--s-order", "9"});
  EXPECT_EQ(res.code, 1);
}

}  // namespace
