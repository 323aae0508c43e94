#pragma once

// Post-estimation predictions at b = 0 or averaged over the fitted
// random-effect distribution, with delta-method intervals.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/estimation.hpp"
#include "mesurv/family.hpp"
#include "mesurv/model.hpp"
#include "mesurv/quadrature.hpp"

namespace mesurv {

enum class PredictKind { eta, hazard, survival, chazard, cif, rmst, timelost };

inline PredictKind predict_kind_from_string(const std::string& s) {
  if (s == "eta") return PredictKind::eta;
  if (s == "hazard") return PredictKind::hazard;
  if (s == "survival") return PredictKind::survival;
  if (s == "chazard") return PredictKind::chazard;
  if (s == "cif") return PredictKind::cif;
  if (s == "rmst") return PredictKind::rmst;
  if (s == "timelost") return PredictKind::timelost;
  throw ContractError("unknown prediction kind '" + s + "'");
}

inline std::string to_string(PredictKind k) {
  switch (k) {
    case PredictKind::eta: return "eta";
    case PredictKind::hazard: return "hazard";
    case PredictKind::survival: return "survival";
    case PredictKind::chazard: return "chazard";
    case PredictKind::cif: return "cif";
    case PredictKind::rmst: return "rmst";
    case PredictKind::timelost: return "timelost";
  }
  return "?";
}

struct PredictionRequest {
  PredictKind kind = PredictKind::survival;
  std::map<std::string, double> at;
  bool fixedonly = false;
  bool marginal = false;
  std::optional<std::string> timevar;  // default: each record's exit time
  std::vector<double> times;           // explicit grid; covariates then come from `at`
  bool ci = false;
  double level = 95.0;
  unsigned threads = 1;
};

struct PredictionRow {
  std::size_t rowid = 0;
  double time = 0.0;
  double estimate = 0.0;
  double lci = std::numeric_limits<double>::quiet_NaN();
  double uci = std::numeric_limits<double>::quiet_NaN();
};

// Covariate values for one prediction, laid out as the model's design.
struct PredictionPoint {
  double time = 0.0;
  Eigen::VectorXd x;
  Eigen::VectorXd tvc_x;
  std::vector<Eigen::VectorXd> z;  // per level
};

inline std::vector<std::string> model_covariates(const Model& m) {
  std::vector<std::string> out;
  auto add = [&](const std::string& v) {
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  };
  for (const auto& v : m.spec.fixed) add(v);
  for (const auto& t : m.spec.tvc) add(t.var);
  for (const auto& l : m.spec.levels)
    for (const auto& v : l.vars) add(v);
  return out;
}

inline PredictionPoint make_point(const Model& m, double t, const std::map<std::string, double>& cov) {
  auto get = [&](const std::string& v) {
    auto it = cov.find(v);
    if (it == cov.end()) throw ContractError("covariate '" + v + "' has no value; supply it with at()");
    return it->second;
  };
  PredictionPoint p;
  p.time = t;
  p.x.resize(static_cast<Eigen::Index>(m.spec.fixed.size()));
  for (std::size_t k = 0; k < m.spec.fixed.size(); ++k) p.x[static_cast<Eigen::Index>(k)] = get(m.spec.fixed[k]);
  p.tvc_x.resize(static_cast<Eigen::Index>(m.spec.tvc.size()));
  for (std::size_t k = 0; k < m.spec.tvc.size(); ++k) p.tvc_x[static_cast<Eigen::Index>(k)] = get(m.spec.tvc[k].var);
  for (const auto& l : m.spec.levels) {
    Eigen::VectorXd z(l.dim());
    Eigen::Index c = 0;
    for (const auto& v : l.vars) z[c++] = get(v);
    if (l.constant) z[c++] = 1.0;
    p.z.push_back(std::move(z));
  }
  return p;
}

namespace detail {

inline LinearPredictor point_predictor(const Model& m, const ThetaVector& theta, const PredictionPoint& p, double shift) {
  const auto& lay = *m.layout;
  LinearPredictor lp;
  lp.base = shift;
  if (lay.fixed.size) lp.base += p.x.dot(theta.slice(lay.fixed));
  std::size_t off = lay.tvc.offset;
  for (std::size_t r = 0; r < m.tvc_bases.size(); ++r) {
    const auto df = static_cast<std::size_t>(m.tvc_bases[r].df());
    TvcTerm t;
    t.x = p.tvc_x[static_cast<Eigen::Index>(r)];
    t.basis = &m.tvc_bases[r];
    t.delta = theta.values.segment(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(df));
    lp.tvc.push_back(std::move(t));
    off += df;
  }
  return lp;
}

inline double survival_at(const Family& fam, double t, const LinearPredictor& lp) {
  if (!(t > 0.0)) return 1.0;
  return std::exp(-cum_hazard(fam, t, lp));
}

inline double rmst_at(const Family& fam, double t, const LinearPredictor& lp) {
  static const LegendreRule rule(30);
  double s = 0.0;
  for (std::size_t k = 0; k < rule.x.size(); ++k) s += rule.w[k] * survival_at(fam, t * rule.x[k], lp);
  return t * s;
}

// Conditional quantity given the linear predictor.
inline double conditional_value(const Family& fam, PredictKind kind, double t, const LinearPredictor& lp) {
  switch (kind) {
    case PredictKind::eta: return lp.at(t);
    case PredictKind::hazard: return std::exp(log_hazard(fam, t, lp));
    case PredictKind::survival: return survival_at(fam, t, lp);
    case PredictKind::chazard: return cum_hazard(fam, t, lp);
    case PredictKind::cif: return 1.0 - survival_at(fam, t, lp);
    case PredictKind::rmst: return rmst_at(fam, t, lp);
    case PredictKind::timelost: return t - rmst_at(fam, t, lp);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

// Standard-scale rule over all random effects: Gauss-Hermite tensor for
// Gaussian effects, Monte-Carlo draws for t. Weights sum to one.
inline NodeSet marginal_standard_nodes(const Model& m) {
  const int q = m.re_dim_total();
  const auto& is = m.spec.integration;
  if (m.spec.re_dist.kind == REDistKind::student_t)
    return mc_draws(q, std::max(is.points, 2), m.spec.re_dist, is.seed);
  const int pts = is.method == IntMethod::mcarlo ? IntegrationSettings::default_points(IntMethod::ghermite) : is.points;
  return tensor_nodes(gauss_hermite(pts), q);
}

// Point prediction at parameter vector `values`. `standard` is required for
// marginal predictions.
inline double predict_value(const Model& m, const Eigen::VectorXd& values, const PredictionPoint& p, PredictKind kind,
                            bool marginal, const NodeSet* standard = nullptr) {
  if (kind != PredictKind::eta && !(p.time > 0.0)) throw DomainError("prediction time must be positive");
  const ThetaVector theta = m.make_theta(values);
  const Family fam = m.family(theta);
  if (!marginal || m.level_count() == 0) {
    const LinearPredictor lp = detail::point_predictor(m, theta, p, 0.0);
    return detail::conditional_value(fam, kind, p.time, lp);
  }
  if (kind == PredictKind::hazard)
    throw ContractError("marginal hazard is not available; use marginal survival or chazard instead");
  if (!standard) throw ContractError("marginal prediction needs integration nodes");
  if (kind == PredictKind::cif) return 1.0 - predict_value(m, values, p, PredictKind::survival, true, standard);
  if (kind == PredictKind::timelost) return p.time - predict_value(m, values, p, PredictKind::rmst, true, standard);
  // block-diagonal prior: stack the level factors
  const int q = m.re_dim_total();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
  Eigen::VectorXd z(q);
  int off = 0;
  for (std::size_t lv = 0; lv < m.level_count(); ++lv) {
    const int ql = m.re_dim(lv);
    Eigen::LLT<Eigen::MatrixXd> llt(m.sigma(theta, lv));
    if (llt.info() != Eigen::Success) throw Error("covariance matrix is not positive definite");
    l.block(off, off, ql, ql) = llt.matrixL();
    z.segment(off, ql) = p.z[lv];
    off += ql;
  }
  double sum = 0.0;
  for (Eigen::Index k = 0; k < standard->size(); ++k) {
    const Eigen::VectorXd b = l * standard->nodes.col(k);
    const LinearPredictor lp = detail::point_predictor(m, theta, p, z.dot(b));
    sum += std::exp(standard->log_weights[k]) * detail::conditional_value(fam, kind, p.time, lp);
  }
  return sum;
}

enum class CiScale { identity, log, cloglog };

inline CiScale ci_scale(PredictKind k) {
  switch (k) {
    case PredictKind::eta: return CiScale::identity;
    case PredictKind::survival:
    case PredictKind::cif: return CiScale::cloglog;
    default: return CiScale::log;
  }
}

// Delta-method interval for g(theta), computed on a transformed scale and
// mapped back. For cloglog, `g` is a survival probability when `complement`
// is false and a failure probability when it is true.
inline std::pair<double, double> delta_ci(const Eigen::VectorXd& theta, const Eigen::MatrixXd& vcov,
                                          const std::function<double(const Eigen::VectorXd&)>& g, double level,
                                          CiScale scale = CiScale::identity, bool complement = false) {
  if (vcov.rows() != theta.size() || !vcov.allFinite()) throw ContractError("confidence intervals need a variance matrix");
  const double zc = z_critical(level);
  auto fwd = [&](double v) {
    switch (scale) {
      case CiScale::identity: return v;
      case CiScale::log: return std::log(v);
      case CiScale::cloglog: return std::log(-std::log(complement ? 1.0 - v : v));
    }
    return v;
  };
  auto back = [&](double u) {
    switch (scale) {
      case CiScale::identity: return u;
      case CiScale::log: return std::exp(u);
      case CiScale::cloglog: {
        const double s = std::exp(-std::exp(u));
        return complement ? 1.0 - s : s;
      }
    }
    return u;
  };
  const double v0 = g(theta);
  const double u0 = fwd(v0);
  if (!std::isfinite(u0)) return {v0, v0};
  Eigen::VectorXd grad(theta.size());
  Eigen::VectorXd y = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double h = gradient_step(theta[i]);
    y[i] = theta[i] + h;
    const double up = fwd(g(y));
    y[i] = theta[i] - h;
    const double um = fwd(g(y));
    y[i] = theta[i];
    grad[i] = (up - um) / (2.0 * h);
  }
  const double se = std::sqrt(std::max(0.0, grad.dot(vcov * grad)));
  double a = back(u0 - zc * se), b = back(u0 + zc * se);
  // cloglog reverses the order for survival
  if (a > b) std::swap(a, b);
  return {a, b};
}

namespace detail {
inline std::map<std::string, double> row_covariates(const Dataset& d, std::size_t row) {
  std::map<std::string, double> out;
  for (const auto& c : d.columns())
    if (c.role == ColumnRole::numeric) out[c.name] = c.values[row];
  return out;
}
}  // namespace detail

inline std::vector<PredictionRow> predict(const FittedModel& fit, const Dataset& data, const PredictionRequest& req) {
  const Model& m = fit.model;
  if (req.fixedonly && req.marginal) throw ContractError("fixedonly and marginal cannot be combined");
  if (req.marginal && req.kind == PredictKind::hazard)
    throw ContractError("marginal hazard is not available; use marginal survival or chazard instead");
  const auto needed = model_covariates(m);
  for (const auto& [name, v] : req.at) {
    const bool known = std::find(needed.begin(), needed.end(), name) != needed.end() || data.has_column(name);
    if (!known) throw ContractError("unknown covariate '" + name + "' in at()");
  }

  std::vector<PredictionPoint> points;
  if (!req.times.empty()) {
    std::map<std::string, double> cov;
    for (const auto& [k, v] : req.at) cov[k] = v;
    for (double t : req.times) points.push_back(make_point(m, t, cov));
  } else {
    if (data.rows() == 0) throw ContractError("prediction needs data rows or a time grid");
    std::vector<double> tcol;
    if (req.timevar) {
      tcol = data.column(*req.timevar).values;
    } else if (data.declared()) {
      for (const auto& r : data.records()) tcol.push_back(r.exit_time);
    } else {
      throw ContractError("no prediction times: declare the survival outcome or give timevar");
    }
    for (std::size_t i = 0; i < data.rows(); ++i) {
      auto cov = detail::row_covariates(data, i);
      for (const auto& [k, v] : req.at) cov[k] = v;
      points.push_back(make_point(m, tcol[i], cov));
    }
  }
  for (const auto& p : points)
    if (!(p.time > 0.0) && req.kind != PredictKind::eta) throw DomainError("prediction times must be positive");

  const bool marginal = req.marginal && m.level_count() > 0;
  NodeSet standard;
  if (marginal) standard = marginal_standard_nodes(m);
  if (req.ci && !fit.vcov_ok) throw ContractError("confidence intervals need a variance matrix; the fit has none");

  std::vector<PredictionRow> out(points.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = points[i];
      auto g = [&](const Eigen::VectorXd& th) { return predict_value(m, th, p, req.kind, marginal, &standard); };
      PredictionRow& r = out[i];
      r.rowid = i + 1;
      r.time = p.time;
      r.estimate = g(fit.theta.values);
      if (req.ci) {
        const auto [lo, hi] = delta_ci(fit.theta.values, fit.vcov, g, req.level, ci_scale(req.kind), req.kind == PredictKind::cif);
        r.lci = lo;
        r.uci = hi;
      }
    }
  };
  const unsigned nt = std::max(1u, std::min<unsigned>(req.threads, static_cast<unsigned>(points.size())));
  if (nt <= 1) {
    work(0, points.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (points.size() + nt - 1) / nt;
    for (unsigned t = 0; t < nt; ++t) {
      const std::size_t b = t * chunk, e = std::min(points.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

}  // namespace mesurv
