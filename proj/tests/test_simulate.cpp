#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fixtures.hpp"

using namespace mesurv;

namespace {

SimSpec weibull_spec(std::uint64_t seed = 1) {
  SimSpec s;
  s.family = FamilyKind::weibull;
  s.lambda = 0.1;
  s.gamma = 1.2;
  s.max_time = 5.0;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Simulate, AnalyticFiveYearSurvival) {
  EXPECT_NEAR(sim_survival(weibull_spec(), 5.0), std::exp(-0.1 * std::pow(5.0, 1.2)), 1e-15);
  EXPECT_NEAR(sim_survival(weibull_spec(), 5.0), 0.5017, 1e-4);
}

TEST(Simulate, EmpiricalFiveYearSurvival) {
  const auto draws = simulate_times(weibull_spec(278945), 100000);
  double alive = 0.0;
  for (const auto& d : draws) alive += d.event == 0;
  EXPECT_NEAR(alive / 1e5, 0.5017, 0.005);
}

TEST(Simulate, InverseCdfIdentity) {
  SimSpec s = weibull_spec();
  s.gamma = 1.0;
  s.lambda = 0.3;
  s.max_time = 100.0;
  const double lp = 0.4;
  const SimulatedTime t = invert_survival(s, std::exp(-0.3 * std::exp(lp)), lp);
  EXPECT_NEAR(t.time, 1.0, 1e-12);
  EXPECT_EQ(t.event, 1);
  for (double u : {0.1, 0.5, 0.9}) EXPECT_NEAR(sim_survival(s, invert_survival(s, u, lp).time, lp), u, 1e-12);
  s.family = FamilyKind::gompertz;
  s.gamma = 0.2;
  for (double u : {0.1, 0.5, 0.9}) EXPECT_NEAR(sim_survival(s, invert_survival(s, u, lp).time, lp), u, 1e-12);
}

TEST(Simulate, LogTwoOffsetHalvesMedian) {
  SimSpec s;
  s.family = FamilyKind::exponential;
  s.lambda = 0.2;
  s.max_time = 1e9;
  s.seed = 3;
  auto median = [&](double off) {
    const std::vector<double> lp(20001, off);
    auto d = simulate_times(s, lp);
    std::vector<double> t;
    for (const auto& x : d) t.push_back(x.time);
    std::nth_element(t.begin(), t.begin() + 10000, t.end());
    return t[10000];
  };
  // same uniforms, so the ratio is exact
  EXPECT_NEAR(median(std::log(2.0)) / median(0.0), 0.5, 1e-12);
  EXPECT_NEAR(median(0.0), std::log(2.0) / 0.2, 0.2);
}

TEST(Simulate, KolmogorovSmirnovAgainstAnalytic) {
  SimSpec s = weibull_spec(99);
  s.max_time = 1e9;
  const auto d = simulate_times(s, 100000);
  std::vector<double> t;
  for (const auto& x : d) t.push_back(x.time);
  std::sort(t.begin(), t.end());
  double ks = 0.0;
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double f = 1.0 - sim_survival(s, t[i]);
    ks = std::max({ks, std::abs(f - i / n), std::abs(f - (i + 1) / n)});
  }
  EXPECT_LT(ks, 1.628 / std::sqrt(n));
}

TEST(Simulate, CensoringAtMaximumTime) {
  const auto d = simulate_times(weibull_spec(5), 20000);
  for (const auto& x : d) {
    EXPECT_LE(x.time, 5.0);
    if (x.event == 0) EXPECT_EQ(x.time, 5.0);
    if (x.time < 5.0) EXPECT_EQ(x.event, 1);
  }
}

TEST(Simulate, GompertzNegativeShapeCuresAreCensored) {
  SimSpec s;
  s.family = FamilyKind::gompertz;
  s.lambda = 0.5;
  s.gamma = -1.0;
  s.max_time = 1e6;
  s.seed = 4;
  const auto d = simulate_times(s, 50000);
  double cured = 0.0;
  for (const auto& x : d) cured += x.event == 0;
  // long-run survival exp(lambda / gamma)
  EXPECT_NEAR(cured / 5e4, std::exp(-0.5), 0.01);
}

TEST(Simulate, InvalidParameters) {
  SimSpec s = weibull_spec();
  s.lambda = 0.0;
  EXPECT_THROW(simulate_times(s, 3), DomainError);
  s = weibull_spec();
  s.max_time = -1.0;
  EXPECT_THROW(simulate_times(s, 3), DomainError);
  s = weibull_spec();
  s.family = FamilyKind::rp;
  EXPECT_THROW(simulate_times(s, 3), ContractError);
}

TEST(SimulateClustered, DeterministicForSeed) {
  ClusterDesign cd;
  cd.n_clusters = 5;
  cd.n_per_cluster = 20;
  cd.fixed_effects = {{"trt", -0.5}};
  cd.re_sigma = Eigen::MatrixXd::Constant(1, 1, 0.25);
  cd.re_design = {"trt"};
  std::ostringstream a, b;
  write_csv(a, simulate_clustered(cd, weibull_spec(11)));
  write_csv(b, simulate_clustered(cd, weibull_spec(11)));
  EXPECT_EQ(a.str(), b.str());
  std::ostringstream c;
  write_csv(c, simulate_clustered(cd, weibull_spec(12)));
  EXPECT_NE(a.str(), c.str());
  const Dataset d = simulate_clustered(cd, weibull_spec(11));
  EXPECT_EQ(d.rows(), 100u);
  EXPECT_TRUE(d.has_column("clusterid"));
  EXPECT_TRUE(d.has_column("trt"));
}

TEST(SimulateClustered, ZeroVarianceSharesHazard) {
  ClusterDesign cd;
  cd.n_clusters = 40;
  cd.n_per_cluster = 500;
  cd.re_sigma = Eigen::MatrixXd::Zero(1, 1);
  cd.re_design = {"_cons"};
  const Dataset d = simulate_clustered(cd, weibull_spec(21));
  const auto& ev = d.column("event").values;
  // cluster event proportions vary only binomially
  const double p = 1.0 - sim_survival(weibull_spec(), 5.0);
  double chi = 0.0;
  for (std::size_t c = 0; c < 40; ++c) {
    double e = 0.0;
    for (std::size_t j = 0; j < 500; ++j) e += ev[c * 500 + j];
    chi += std::pow(e - 500 * p, 2) / (500 * p * (1 - p));
  }
  EXPECT_LT(chi, 66.77);  // 99.5th centile of chi-square(40)
  ClusterDesign bad = cd;
  bad.re_sigma = Eigen::MatrixXd::Constant(1, 1, -1.0);
  EXPECT_THROW(simulate_clustered(bad, weibull_spec()), DomainError);
}

TEST(SimulateClustered, TrialDesignEventCount) {
  ClusterDesign cd;
  cd.fixed_effects = {{"trt", -0.5}};
  cd.re_sigma = Eigen::MatrixXd::Constant(1, 1, 0.25);
  cd.re_design = {"trt"};
  const Dataset d = simulate_clustered(cd, weibull_spec(278945));
  const auto& ev = d.column("event").values;
  EXPECT_EQ(ev.size(), 3000u);
  EXPECT_NEAR(std::accumulate(ev.begin(), ev.end(), 0.0), 1239.0, 80.0);
}
