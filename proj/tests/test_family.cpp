#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

#include "fixtures.hpp"

using namespace mesurv;

namespace {

Family weibull(double lambda, double gamma) {
  Family f;
  f.kind = FamilyKind::weibull;
  f.intercept = std::log(lambda);
  f.params = Eigen::VectorXd::Constant(1, std::log(gamma));
  return f;
}

Family gompertz(double lambda, double gamma) {
  Family f;
  f.kind = FamilyKind::gompertz;
  f.intercept = std::log(lambda);
  f.params = Eigen::VectorXd::Constant(1, gamma);
  return f;
}

Family exponential(double lambda) {
  Family f;
  f.kind = FamilyKind::exponential;
  f.intercept = std::log(lambda);
  return f;
}

const SplineBasis& basis3() {
  static const SplineBasis b(KnotVector{{-1.0, 0.5, 1.5, 3.0}});
  return b;
}

Family rp3() {
  Family f;
  f.kind = FamilyKind::rp;
  f.intercept = -2.0;
  f.params = Eigen::Vector3d(1.1, 0.02, -0.01);
  f.baseline = &basis3();
  return f;
}

}  // namespace

TEST(LinearPredictor, CatheterFixedPart) {
  const Dataset d = fixtures::catheter();
  ModelSpec s = fixtures::catheter_spec();
  const Model m = Model::prepare(s, d);
  Eigen::VectorXd th = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.layout->size()));
  th[0] = 0.0071588;
  th[1] = -1.467426;
  const PredictionPoint p = make_point(m, 10.0, {{"age", 45.0}, {"female", 1.0}});
  EXPECT_NEAR(detail::point_predictor(m, m.make_theta(th), p, 0.0).at(10.0), 45 * 0.0071588 - 1.467426, 1e-12);
  EXPECT_EQ(LinearPredictor{}.at(3.0), 0.0);
}

TEST(LinearPredictor, TvcTermVanishesAtOne) {
  const SplineBasis b(KnotVector{{0.0, 2.0}});
  LinearPredictor lp;
  lp.base = 0.3;
  lp.tvc.push_back(TvcTerm{1.0, &b, Eigen::VectorXd::Constant(1, 0.7)});
  EXPECT_EQ(lp.at(1.0), 0.3);
  EXPECT_NEAR(lp.at(std::exp(2.0)), 0.3 + 1.4, 1e-14);
  EXPECT_NEAR(lp.dlogt(5.0), 0.7, 1e-14);
}

TEST(Family, LogHazardForms) {
  const LinearPredictor zero;
  const Family e = exponential(1.0);
  for (double t : {0.1, 1.0, 7.0}) EXPECT_EQ(log_hazard(e, t, zero), 0.0);
  EXPECT_NEAR(log_hazard(weibull(0.1, 1.2), 5.0, zero), std::log(0.12) + 0.2 * std::log(5.0), 1e-14);
  EXPECT_NEAR(log_hazard(gompertz(0.2, 0.3), 2.0, zero), std::log(0.2) + 0.6, 1e-14);
  EXPECT_THROW(log_hazard(e, 0.0, zero), DomainError);
  EXPECT_THROW(cum_hazard(e, -1.0, zero), DomainError);
}

TEST(Family, CumulativeHazardClosedForms) {
  const LinearPredictor zero;
  EXPECT_NEAR(cum_hazard(exponential(1.0), 2.0, zero), 2.0, 1e-15);
  const double h = cum_hazard(weibull(0.1, 1.2), 5.0, zero);
  EXPECT_NEAR(h, 0.1 * std::pow(5.0, 1.2), 1e-14);
  EXPECT_NEAR(h, 0.68986, 5e-6);
  EXPECT_NEAR(std::exp(-h), 0.501644, 1e-6);
  EXPECT_NEAR(cum_hazard(gompertz(0.2, 0.3), 2.0, zero), 0.2 / 0.3 * std::expm1(0.6), 1e-14);
}

TEST(Family, GompertzZeroGammaIsExponential) {
  const LinearPredictor zero;
  for (double t : {0.3, 1.0, 4.0}) {
    EXPECT_EQ(log_hazard(gompertz(0.5, 0.0), t, zero), log_hazard(exponential(0.5), t, zero));
    EXPECT_NEAR(cum_hazard(gompertz(0.5, 0.0), t, zero), 0.5 * t, 1e-15);
    EXPECT_LT(std::abs(cum_hazard(gompertz(0.5, 1e-10), t, zero) - 0.5 * t), 1e-6);
  }
  // negative gamma accepted
  EXPECT_GT(cum_hazard(gompertz(0.5, -0.4), 2.0, zero), 0.0);
}

TEST(Family, NumericCumulativeHazard) {
  const LinearPredictor zero;
  for (double t : {0.5, 1.0, 5.0}) EXPECT_NEAR(numeric_cum_hazard(exponential(1.0), t, zero), t, 1e-10);
  EXPECT_NEAR(numeric_cum_hazard(weibull(0.1, 1.2), 5.0, zero), cum_hazard(weibull(0.1, 1.2), 5.0, zero), 1e-8);
  // rcs with coefficient 1 on log t: h(u) = e^c u, H = e^c t^2 / 2
  const SplineBasis b(KnotVector{{-1.0, 2.0}});
  Family f;
  f.kind = FamilyKind::rcs;
  f.intercept = 0.3;
  f.params = Eigen::VectorXd::Ones(1);
  f.baseline = &b;
  for (double t : {0.5, 2.0, 6.0}) EXPECT_NEAR(cum_hazard(f, t, zero), std::exp(0.3) * t * t / 2, 1e-8 * t * t);
}

TEST(Family, RpDfOneIsWeibull) {
  // log H = c + g log t  <=>  Weibull with log(lambda) = c, gamma = g
  const SplineBasis b(KnotVector{{-1.0, 3.0}});
  Family rp;
  rp.kind = FamilyKind::rp;
  rp.intercept = -1.7;
  rp.params = Eigen::VectorXd::Constant(1, 1.35);
  rp.baseline = &b;
  const Family w = weibull(std::exp(-1.7), 1.35);
  LinearPredictor lp;
  lp.base = 0.4;
  for (double t = 0.05; t < 30.0; t *= 1.37) {
    EXPECT_NEAR(cum_hazard(rp, t, lp), cum_hazard(w, t, lp), 1e-10 * std::max(1.0, cum_hazard(w, t, lp)));
    EXPECT_NEAR(log_hazard(rp, t, lp), log_hazard(w, t, lp), 1e-10);
  }
}

TEST(Family, RpNegativeSlopeIsInvalid) {
  Family f = rp3();
  f.params[0] = -1.0;
  EXPECT_EQ(log_hazard(f, 2.0, LinearPredictor{}), neg_inf);
}

TEST(Family, RpWithTvcKeepsClosedForm) {
  const SplineBasis tb(KnotVector{{-1.0, 3.0}});
  Family f = rp3();
  LinearPredictor lp;
  lp.tvc.push_back(TvcTerm{1.0, &tb, Eigen::VectorXd::Constant(1, 0.2)});
  const double t = 4.0;
  EXPECT_NEAR(cum_hazard(f, t, lp), std::exp(f.intercept + basis3().value(std::log(t)).dot(f.params) + 0.2 * std::log(t)),
              1e-12);
  // hazard still integrates to the cumulative hazard
  EXPECT_NEAR(numeric_cum_hazard(f, t, lp), cum_hazard(f, t, lp), 1e-6 * cum_hazard(f, t, lp));
}

TEST(Family, UserDefinedHazard) {
  auto user = std::make_shared<UserFamily>();
  user->param_names = {"log_gamma"};
  user->log_hazard = [](double t, double eta, std::span<const double> p) {
    const double g = std::exp(p[0]);
    return eta + p[0] + (g - 1.0) * std::log(t);
  };
  Family f;
  f.kind = FamilyKind::user;
  f.intercept = std::log(0.1);
  f.params = Eigen::VectorXd::Constant(1, std::log(1.2));
  f.user = user;
  EXPECT_NEAR(log_hazard(f, 5.0, LinearPredictor{}), log_hazard(weibull(0.1, 1.2), 5.0, LinearPredictor{}), 1e-14);
  EXPECT_NEAR(cum_hazard(f, 5.0, LinearPredictor{}), 0.1 * std::pow(5.0, 1.2), 1e-8);
}

// cumulative hazards are nondecreasing, consistent with the hazard, and S in (0, 1]
TEST(FamilyProperties, MonotoneAndConsistent) {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const SplineBasis rb(KnotVector{{-1.0, 0.5, 1.5, 3.0}});
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<Family> fams = {exponential(std::exp(u(gen))), weibull(std::exp(u(gen)), std::exp(0.5 * u(gen))),
                                gompertz(std::exp(u(gen)), 0.5 * u(gen))};
    Family r = rp3();
    r.intercept += u(gen);
    r.params[0] = 1.0 + 0.3 * u(gen);
    fams.push_back(r);
    Family rc;
    rc.kind = FamilyKind::rcs;
    rc.intercept = u(gen);
    rc.params = Eigen::Vector3d(0.3 * u(gen), 0.01 * u(gen), 0.01 * u(gen));
    rc.baseline = &rb;
    fams.push_back(rc);
    LinearPredictor lp;
    lp.base = u(gen);
    for (const auto& f : fams) {
      double prev = 0.0;
      for (double t = 0.05; t < 20.0; t *= 1.25) {
        const double h = cum_hazard(f, t, lp);
        EXPECT_GE(h, prev) << to_string(f.kind);
        prev = h;
        ASSERT_TRUE(std::isfinite(h)) << to_string(f.kind);
        const double s = std::exp(-h);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
        const double step = 1e-4 * t;
        const double dh = (cum_hazard(f, t + step, lp) - cum_hazard(f, t - step, lp)) / (2 * step);
        EXPECT_NEAR(dh, std::exp(log_hazard(f, t, lp)), 1e-5 * std::max(1e-3, dh)) << to_string(f.kind) << " t=" << t;
      }
      EXPECT_GT(std::exp(-cum_hazard(f, 1e-200, lp)), 1.0 - 1e-12) << to_string(f.kind);
    }
  }
}
