#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fixtures.hpp"

using namespace mesurv;

TEST(Covariance, ParameterCounts) {
  EXPECT_EQ(covariance_param_count(CovarianceKind::diagonal, 3), 3);
  EXPECT_EQ(covariance_param_count(CovarianceKind::exchangeable, 3), 2);
  EXPECT_EQ(covariance_param_count(CovarianceKind::identity, 3), 1);
  EXPECT_EQ(covariance_param_count(CovarianceKind::unstructured, 2), 3);
  EXPECT_EQ(covariance_param_count(CovarianceKind::unstructured, 4), 10);
}

TEST(Covariance, SimpleAssemblies) {
  EXPECT_EQ(assemble_sigma(CovarianceKind::identity, 3, std::vector<double>{0.0}), Eigen::MatrixXd::Identity(3, 3));
  const Eigen::MatrixXd d = assemble_sigma(CovarianceKind::diagonal, 2, std::vector<double>{0.0, std::log(2.0)});
  EXPECT_NEAR(d(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(d(1, 1), 4.0, 1e-14);
  EXPECT_EQ(d(0, 1), 0.0);
  const Eigen::MatrixXd e = assemble_sigma(CovarianceKind::exchangeable, 3, std::vector<double>{std::log(0.5), 0.0});
  EXPECT_NEAR(e(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(e(0, 2), 0.0, 1e-15);
  EXPECT_THROW(assemble_sigma(CovarianceKind::diagonal, 2, std::vector<double>{0.0}), ContractError);
}

TEST(Covariance, UnstructuredCorrelation) {
  const double r = 0.6;
  const Eigen::MatrixXd s =
      assemble_sigma(CovarianceKind::unstructured, 2, std::vector<double>{std::log(2.0), std::log(3.0), std::atanh(r)});
  EXPECT_NEAR(s(0, 0), 4.0, 1e-13);
  EXPECT_NEAR(s(1, 1), 9.0, 1e-13);
  EXPECT_NEAR(s(0, 1), r * 6.0, 1e-13);
}

TEST(Covariance, AlwaysPositiveDefinite) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd(0.0, 2.0);
  for (int rep = 0; rep < 200; ++rep) {
    for (auto kind : {CovarianceKind::diagonal, CovarianceKind::exchangeable, CovarianceKind::identity,
                      CovarianceKind::unstructured}) {
      const int q = 2 + rep % 3;
      std::vector<double> p(static_cast<std::size_t>(covariance_param_count(kind, q)));
      for (auto& v : p) v = nd(gen);
      const Eigen::MatrixXd s = assemble_sigma(kind, q, p);
      EXPECT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
      EXPECT_GT(es.eigenvalues().minCoeff(), 0.0) << to_string(kind) << " q=" << q;
    }
  }
}

TEST(Density, GaussianSmallCases) {
  EXPECT_NEAR(logdensity_gaussian(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)), -0.9189385332046727, 1e-15);
  EXPECT_NEAR(logdensity_gaussian(Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2)), -2 * 0.9189385332046727 - 1,
              1e-14);
  EXPECT_THROW(logdensity_gaussian(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(1, 1)), ContractError);
}

TEST(Density, GaussianMatchesExplicitInverse) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int q = 1 + rep % 4;
    Eigen::MatrixXd a(q, q);
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < q; ++j) a(i, j) = nd(gen);
    const Eigen::MatrixXd s = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(q, q);
    Eigen::VectorXd b(q);
    for (int i = 0; i < q; ++i) b[i] = nd(gen);
    const double oracle = -0.5 * q * std::log(2 * std::numbers::pi) - 0.5 * std::log(s.determinant()) -
                          0.5 * b.dot(s.inverse() * b);
    EXPECT_NEAR(logdensity_gaussian(b, s), oracle, 1e-10);
    REPrior prior(s, REDistribution{});
    EXPECT_NEAR(prior.logpdf(b), oracle, 1e-10);
  }
}

TEST(Density, StudentTLimitsAndSymmetry) {
  const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd b(2);
  b << 0.7, -1.3;
  EXPECT_NEAR(logdensity_t(b, i2, 1e6), logdensity_gaussian(b, i2), 1e-4);
  EXPECT_EQ(logdensity_t(b, i2, 4.0), logdensity_t((-b).eval(), i2, 4.0));
  EXPECT_THROW(logdensity_t(b, i2, 2.0), DomainError);
  REPrior prior(i2, REDistribution{REDistKind::student_t, 4.0});
  EXPECT_NEAR(prior.logpdf(b), logdensity_t(b, i2, 4.0), 1e-12);
}

TEST(Density, StudentTNormalizationAndVariance) {
  // q = 1, nu = 4, covariance 1: integrates to one and has unit variance
  const Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  auto pdf = [&](double x) { return std::exp(logdensity_t(Eigen::VectorXd::Constant(1, x), one, 4.0)); };
  const double mass = fixtures::trapezoid(pdf, -2000.0, 2000.0, 4000001);
  EXPECT_NEAR(mass, 1.0, 1e-6);
  const double var = fixtures::trapezoid([&](double x) { return x * x * pdf(x); }, -2000.0, 2000.0, 4000001);
  EXPECT_NEAR(var, 1.0, 2e-3);
  // at zero: Gamma(5/2) / (Gamma(2) sqrt(4 pi) sqrt(1/2))
  const double at0 = std::tgamma(2.5) / (std::tgamma(2.0) * std::sqrt(4.0 * std::numbers::pi) * std::sqrt(0.5));
  EXPECT_NEAR(pdf(0.0), at0, 1e-12);
}

TEST(Density, GaussianNormalizesInTwoDimensions) {
  Eigen::MatrixXd s(2, 2);
  s << 1.0, 0.4, 0.4, 0.5;
  const int n = 801;
  const double lo = -8.0, h = 16.0 / (n - 1);
  double mass = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      Eigen::VectorXd b(2);
      b << lo + i * h, lo + j * h;
      mass += std::exp(logdensity_gaussian(b, s));
    }
  EXPECT_NEAR(mass * h * h, 1.0, 1e-4);
}

TEST(Density, PriorDerivatives) {
  Eigen::MatrixXd s(2, 2);
  s << 1.0, 0.3, 0.3, 0.8;
  Eigen::VectorXd b(2);
  b << 0.4, -0.9;
  for (REDistribution dist : {REDistribution{}, REDistribution{REDistKind::student_t, 6.0}}) {
    REPrior p(s, dist);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd hs = Eigen::MatrixXd::Zero(2, 2);
    p.add_derivatives(b, g, hs);
    const double h = 1e-5;
    for (int i = 0; i < 2; ++i) {
      Eigen::VectorXd bp = b, bm = b;
      bp[i] += h;
      bm[i] -= h;
      EXPECT_NEAR(g[i], (p.logpdf(bp) - p.logpdf(bm)) / (2 * h), 1e-7);
      Eigen::VectorXd gp = Eigen::VectorXd::Zero(2), gm = Eigen::VectorXd::Zero(2);
      Eigen::MatrixXd dummy = Eigen::MatrixXd::Zero(2, 2);
      p.add_derivatives(bp, gp, dummy);
      p.add_derivatives(bm, gm, dummy);
      for (int j = 0; j < 2; ++j) EXPECT_NEAR(hs(j, i), (gp[j] - gm[j]) / (2 * h), 1e-6);
    }
  }
}

TEST(Reporting, SdIntervalIsExponentiated) {
  // sd 0.801154 with se(log sd) 0.341: exp(log sd -/+ 1.96 se)
  const double sd = 0.801154, se_log = 0.2732037 / 0.801154;
  const double z = z_critical(95.0);
  const double lo = std::exp(std::log(sd) - z * se_log), hi = std::exp(std::log(sd) + z * se_log);
  EXPECT_NEAR(lo, 0.4106, 5e-4);
  EXPECT_NEAR(hi, 1.5631, 5e-4);
  EXPECT_GT(hi - sd, sd - lo);
}
