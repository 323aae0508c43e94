#pragma once

// Baseline hazard families and the time-dependent linear predictor.
//
// Every family is parameterized by an intercept (log lambda for the standard
// distributions, the spline constant for rp/rcs) plus ancillary baseline
// parameters:
//   exponential  log h = c + eta
//   weibull      log h = c + log g + (g-1) log t + eta        params {log g}
//   gompertz     log h = c + g t + eta                        params {g}
//   rcs          log h = c + s(log t) + eta                   params spline coefs
//   rp           log H = c + s(log t) + eta(t),  h = H/t * d log H / d log t
//   user         log h supplied by the host program

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mesurv/error.hpp"
#include "mesurv/quadrature.hpp"
#include "mesurv/spline.hpp"

namespace mesurv {

enum class FamilyKind { exponential, weibull, gompertz, rp, rcs, user };

inline std::string to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::exponential: return "exponential";
    case FamilyKind::weibull: return "weibull";
    case FamilyKind::gompertz: return "gompertz";
    case FamilyKind::rp: return "rp";
    case FamilyKind::rcs: return "rcs";
    case FamilyKind::user: return "user";
  }
  return "?";
}

inline FamilyKind family_from_string(const std::string& s) {
  if (s == "exponential") return FamilyKind::exponential;
  if (s == "weibull") return FamilyKind::weibull;
  if (s == "gompertz") return FamilyKind::gompertz;
  if (s == "rp") return FamilyKind::rp;
  if (s == "rcs") return FamilyKind::rcs;
  if (s == "user") return FamilyKind::user;
  throw ContractError("unknown distribution '" + s + "'");
}

// Host-supplied hazard. `eta` is the full linear predictor including the
// intercept; `params` are the family's ancillary parameters.
struct UserFamily {
  std::vector<std::string> param_names;
  std::function<double(double t, double eta, std::span<const double> params)> log_hazard;
  std::function<double(double t, double eta, std::span<const double> params)> cum_hazard;  // optional
};

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

// One time-dependent effect: covariate value times a spline of log time.
struct TvcTerm {
  double x = 0.0;
  const SplineBasis* basis = nullptr;
  Eigen::VectorXd delta;
};

// eta(t) = base + sum_r x_r * w_r(log t)' delta_r. `base` carries x'beta + z'b
// but not the family intercept.
struct LinearPredictor {
  double base = 0.0;
  std::vector<TvcTerm> tvc;

  bool time_varying() const {
    for (const auto& t : tvc)
      if (t.x != 0.0) return true;
    return false;
  }

  double at(double t) const {
    double v = base;
    if (tvc.empty()) return v;
    const double lt = std::log(t);
    for (const auto& term : tvc)
      if (term.x != 0.0) v += term.x * term.basis->value(lt).dot(term.delta);
    return v;
  }

  double dlogt(double t) const {
    double v = 0.0;
    if (tvc.empty()) return v;
    const double lt = std::log(t);
    for (const auto& term : tvc)
      if (term.x != 0.0) v += term.x * term.basis->deriv(lt).dot(term.delta);
    return v;
  }
};

struct Family {
  FamilyKind kind = FamilyKind::exponential;
  double intercept = 0.0;
  Eigen::VectorXd params;
  const SplineBasis* baseline = nullptr;  // rp and rcs
  std::shared_ptr<const UserFamily> user;
  const LegendreRule* rule = nullptr;  // numeric cumulative hazards; 30 nodes when null

  static int ancillary_count(FamilyKind k, int spline_df, const UserFamily* user) {
    switch (k) {
      case FamilyKind::exponential: return 0;
      case FamilyKind::weibull:
      case FamilyKind::gompertz: return 1;
      case FamilyKind::rp:
      case FamilyKind::rcs: return spline_df;
      case FamilyKind::user: return user ? static_cast<int>(user->param_names.size()) : 0;
    }
    return 0;
  }
};

inline double log_hazard(const Family& f, double t, const LinearPredictor& lp) {
  if (!(t > 0.0)) throw DomainError("hazard requires t > 0");
  const double eta = f.intercept + lp.at(t);
  switch (f.kind) {
    case FamilyKind::exponential: return eta;
    case FamilyKind::weibull: {
      const double lg = f.params[0];
      return eta + lg + (std::exp(lg) - 1.0) * std::log(t);
    }
    case FamilyKind::gompertz: return eta + f.params[0] * t;
    case FamilyKind::rcs: return eta + f.baseline->value(std::log(t)).dot(f.params);
    case FamilyKind::rp: {
      const double lt = std::log(t);
      const double slope = f.baseline->deriv(lt).dot(f.params) + lp.dlogt(t);
      if (!(slope > 0.0)) return neg_inf;
      return std::log(slope) - lt + eta + f.baseline->value(lt).dot(f.params);
    }
    case FamilyKind::user: return f.user->log_hazard(t, eta, {f.params.data(), static_cast<std::size_t>(f.params.size())});
  }
  return neg_inf;
}

// Integral of the hazard over (0, t]. Spline hazards are only piecewise smooth
// in log t, so the range is split at the knots. The first piece uses the change
// of variable u = a x^6: hazards behaving like u^c near 0 (Weibull, splines of
// log t) become x^(6c+5), smooth enough for Gauss-Legendre. Later pieces are
// integrated in v = log u.
inline constexpr int cum_hazard_power = 6;

inline double numeric_cum_hazard(const Family& f, double t, const LinearPredictor& lp) {
  if (!(t > 0.0)) throw DomainError("cumulative hazard requires t > 0");
  static const LegendreRule default_rule(30);
  const LegendreRule& rule = f.rule ? *f.rule : default_rule;
  const double lt = std::log(t);
  std::vector<double> cuts;
  auto add_knots = [&](const SplineBasis* b) {
    if (!b) return;
    for (double k : b->knots().knots)
      if (k < lt) cuts.push_back(k);
  };
  if (f.kind == FamilyKind::rp || f.kind == FamilyKind::rcs) add_knots(f.baseline);
  for (const auto& term : lp.tvc) add_knots(term.basis);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  cuts.push_back(lt);

  bool bad = false;
  auto hazard = [&](double u) {
    const double lh = log_hazard(f, u, lp);
    if (std::isnan(lh) || lh == std::numeric_limits<double>::infinity()) bad = true;
    return std::exp(lh);
  };
  constexpr int p = cum_hazard_power;
  const double a = std::exp(cuts.front());
  double total = 0.0;
  for (std::size_t k = 0; k < rule.x.size(); ++k) {
    const double x = rule.x[k];
    const double x5 = std::pow(x, p - 1);
    total += rule.w[k] * p * x5 * hazard(a * x5 * x);
  }
  total *= a;
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    const double lo = cuts[i - 1], width = cuts[i] - lo;
    double piece = 0.0;
    for (std::size_t k = 0; k < rule.x.size(); ++k) {
      const double u = std::exp(lo + width * rule.x[k]);
      piece += rule.w[k] * u * hazard(u);
    }
    total += width * piece;
  }
  return bad ? std::numeric_limits<double>::infinity() : total;
}

inline double cum_hazard(const Family& f, double t, const LinearPredictor& lp) {
  if (!(t > 0.0)) throw DomainError("cumulative hazard requires t > 0");
  if (f.kind == FamilyKind::rp) {
    const double lt = std::log(t);
    return std::exp(f.intercept + lp.at(t) + f.baseline->value(lt).dot(f.params));
  }
  if (lp.time_varying() || f.kind == FamilyKind::rcs) return numeric_cum_hazard(f, t, lp);
  const double eta = f.intercept + lp.base;
  switch (f.kind) {
    case FamilyKind::exponential: return std::exp(eta) * t;
    case FamilyKind::weibull: return std::exp(eta + std::exp(f.params[0]) * std::log(t));
    case FamilyKind::gompertz: {
      const double g = f.params[0];
      const double gt = g * t;
      // expm1(g t)/g, with its series near g = 0
      const double base = std::abs(gt) < 1e-8 ? t * (1.0 + 0.5 * gt) : std::expm1(gt) / g;
      return std::exp(eta) * base;
    }
    case FamilyKind::user:
      if (f.user->cum_hazard)
        return f.user->cum_hazard(t, eta, {f.params.data(), static_cast<std::size_t>(f.params.size())});
      return numeric_cum_hazard(f, t, lp);
    default: break;
  }
  return numeric_cum_hazard(f, t, lp);
}

}  // namespace mesurv
