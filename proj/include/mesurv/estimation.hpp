#pragma once

// Two-stage maximum likelihood: a fixed-effects fit for starting values, then
// the full model with standard deviations 1 and correlations 0.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <algorithm>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/likelihood.hpp"
#include "mesurv/model.hpp"
#include "mesurv/optimize.hpp"

namespace mesurv {

struct FitOptions {
  bool zeros = false;
  int max_iter = 300;
  double gtol = 1e-6;
  double ltol = 1e-8;
  unsigned threads = 0;
  std::ostream* log = nullptr;
  std::optional<Eigen::VectorXd> from;  // explicit starting values for the full model
};

struct Convergence {
  int iterations = 0;
  double gradient_max = 0.0;
  bool converged = false;
  std::string status;
};

struct FittedModel {
  Model model;
  ThetaVector theta;
  Eigen::MatrixXd vcov;
  bool vcov_ok = false;
  double loglik = 0.0;
  Convergence convergence;
  std::size_t n_obs = 0, n_events = 0, n_clusters = 0;
  double time_at_risk = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

// Nelson-Aalen at each record's exit time, honouring delayed entry.
inline std::vector<double> nelson_aalen(const Design& g) {
  const auto n = static_cast<std::size_t>(g.n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return g.exit[static_cast<Eigen::Index>(a)] < g.exit[static_cast<Eigen::Index>(b)]; });
  std::vector<double> out(n, 0.0);
  double cum = 0.0;
  std::size_t k = 0;
  while (k < n) {
    const double t = g.exit[static_cast<Eigen::Index>(order[k])];
    std::size_t e = k;
    double deaths = 0.0;
    while (e < n && g.exit[static_cast<Eigen::Index>(order[e])] == t) deaths += g.event[static_cast<Eigen::Index>(order[e++])];
    double at_risk = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      if (g.entry[ii] < t && g.exit[ii] >= t) at_risk += 1.0;
    }
    if (at_risk > 0.0) cum += deaths / at_risk;
    for (std::size_t i = k; i < e; ++i) out[order[i]] = cum;
    k = e;
  }
  return out;
}

inline Model without_random_effects(const Model& m) {
  ModelSpec s = m.spec;
  s.levels.clear();
  return Model::restore(s, m.baseline, m.tvc_bases);
}

// Crude but valid initial values for the fixed-effects stage.
inline Eigen::VectorXd crude_start(const LikelihoodContext& ctx) {
  const Model& m = ctx.model();
  const Design& g = ctx.design();
  const auto& lay = *m.layout;
  Eigen::VectorXd th = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lay.size()));
  double events = g.event.sum(), exposure = (g.exit - g.entry).sum();
  const double log_rate = std::log(std::max(events, 0.5) / exposure);
  const auto ci = static_cast<Eigen::Index>(lay.intercept.offset);
  th[ci] = log_rate;
  if (m.spec.family != FamilyKind::rp) return th;

  // regress log Nelson-Aalen on the baseline basis over event records
  const auto na = nelson_aalen(g);
  const int df = m.baseline_df();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(g.n); ++i)
    if (g.event[i] != 0.0 && na[static_cast<std::size_t>(i)] > 0.0) rows.push_back(i);
  const auto bo = static_cast<Eigen::Index>(lay.baseline.offset);
  auto weibull_like = [&]() {
    // log H = log t + log rate, expressed in the (possibly orthogonal) basis
    Eigen::MatrixXd a(2, df + 1);
    const double t1 = std::exp(m.baseline->knots().boundary_low()), t2 = std::exp(m.baseline->knots().boundary_high());
    for (int r = 0; r < 2; ++r) {
      const double lt = std::log(r ? t2 : t1);
      a(r, 0) = 1.0;
      a.row(r).tail(df) = m.baseline->value(lt).transpose();
    }
    Eigen::Vector2d rhs(std::log(t1) + log_rate, std::log(t2) + log_rate);
    const Eigen::VectorXd sol = a.completeOrthogonalDecomposition().solve(rhs);
    th[ci] = sol[0];
    th.segment(bo, df) = sol.tail(df);
  };
  if (static_cast<int>(rows.size()) <= df + 1) {
    weibull_like();
    return th;
  }
  Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), df + 1);
  Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto rr = static_cast<Eigen::Index>(r);
    a(rr, 0) = 1.0;
    a.row(rr).tail(df) = m.baseline->value(std::log(g.exit[rows[r]])).transpose();
    y[rr] = std::log(na[static_cast<std::size_t>(rows[r])]);
  }
  const Eigen::VectorXd sol = a.colPivHouseholderQr().solve(y);
  th[ci] = sol[0];
  th.segment(bo, df) = sol.tail(df);
  std::vector<SubjectTerm> terms;
  if (!ctx.subject_terms(m.make_theta(th), terms)) weibull_like();
  return th;
}

inline double quantile_z(double level) {
  if (!(level > 0.0 && level < 100.0)) throw RangeError("level must be between 0 and 100");
  static const boost::math::normal_distribution<double> nd;
  return boost::math::quantile(nd, 0.5 + level / 200.0);
}

}  // namespace detail

inline double z_critical(double level) { return detail::quantile_z(level); }

// Full-model starting values. Runs the fixed-effects stage unless `zeros`.
inline ThetaVector starting_values(const LikelihoodContext& ctx, const FitOptions& opt, Convergence* stage1 = nullptr,
                                   double* stage1_loglik = nullptr) {
  const Model& m = ctx.model();
  const auto& lay = *m.layout;
  Eigen::VectorXd th = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lay.size()));
  if (opt.zeros) return m.make_theta(th);

  const Model fixed = detail::without_random_effects(m);
  LikelihoodContext fctx(fixed, ctx.data(), LikelihoodOptions{opt.threads});
  const Eigen::VectorXd start = detail::crude_start(fctx);
  Objective f = [&](const Eigen::VectorXd& x) { return fctx.total_log_likelihood(fixed.make_theta(x)); };
  OptimOptions oo;
  oo.max_iter = opt.max_iter;
  oo.gtol = opt.gtol;
  oo.ltol = opt.ltol;
  oo.log = opt.log;
  const OptimResult r = maximize(f, start, oo);
  if (!std::isfinite(r.value))
    throw ConvergenceError("fixed-effects model for starting values could not be evaluated; try zeros");
  if (!r.converged && r.iterations >= opt.max_iter)
    throw ConvergenceError("fixed-effects model for starting values did not converge; try zeros");
  if (stage1) {
    stage1->iterations = r.iterations;
    stage1->converged = r.converged;
    stage1->status = r.status;
    stage1->gradient_max = r.gradient.size() ? r.gradient.cwiseAbs().maxCoeff() : 0.0;
  }
  if (stage1_loglik) *stage1_loglik = r.value;
  // fixed layout is the full layout minus the trailing covariance slices
  th.head(r.x.size()) = r.x;
  return m.make_theta(th);
}

// Maximizes the full model from `start`.
inline FittedModel maximize_model(const LikelihoodContext& ctx, ThetaVector start, const FitOptions& opt) {
  const Model& m = ctx.model();
  FittedModel fit;
  fit.model = m;
  Objective f = [&](const Eigen::VectorXd& x) { return ctx.total_log_likelihood(m.make_theta(x)); };
  Eigen::VectorXd x = start.values;
  if (!std::isfinite(f(x))) {
    bool ok = false;
    for (int attempt = 0; attempt < 5 && !ok; ++attempt) {
      for (const auto& s : m.layout->covariance)
        for (std::size_t k = 0; k < s.size; ++k)
          if (m.layout->names[s.offset + k].find("log_sd") != std::string::npos) x[static_cast<Eigen::Index>(s.offset + k)] += 0.5;
      ok = std::isfinite(f(x));
    }
    if (!ok) throw ConvergenceError("log likelihood is not finite at the starting values");
  }
  OptimOptions oo;
  oo.max_iter = opt.max_iter;
  oo.gtol = opt.gtol;
  oo.ltol = opt.ltol;
  oo.log = opt.log;
  const OptimResult r = maximize(f, x, oo);
  fit.theta = m.make_theta(r.x);
  fit.loglik = r.value;
  fit.convergence.iterations = r.iterations;
  fit.convergence.converged = r.converged;
  fit.convergence.status = r.status;
  fit.convergence.gradient_max = r.gradient.size() ? r.gradient.cwiseAbs().maxCoeff() : 0.0;

  const Eigen::MatrixXd h = numeric_hessian(f, r.x, r.value);
  Eigen::LLT<Eigen::MatrixXd> llt(-h);
  if (llt.info() == Eigen::Success && h.allFinite()) {
    fit.vcov = llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
    fit.vcov_ok = true;
  } else {
    fit.vcov = Eigen::MatrixXd::Constant(h.rows(), h.cols(), std::numeric_limits<double>::quiet_NaN());
    fit.vcov_ok = false;
    fit.warnings.push_back("Hessian is not negative definite; standard errors are missing");
  }
  const auto& s = ctx.data().summary();
  fit.n_obs = s.records;
  fit.n_events = s.events;
  fit.time_at_risk = s.time_at_risk;
  fit.n_clusters = m.level_count() ? ctx.data().levels()[0].size() : s.records;
  LikelihoodDiagnostics diag;
  ctx.total_log_likelihood(fit.theta, &diag);
  if (diag.adapt_fallbacks)
    fit.warnings.push_back(std::to_string(diag.adapt_fallbacks) + " cluster(s) fell back to non-adaptive quadrature at the estimates");
  return fit;
}

inline FittedModel fit_model(const Model& model, const Dataset& data, const FitOptions& opt = {}) {
  LikelihoodContext ctx(model, data, LikelihoodOptions{opt.threads});
  const bool has_re = model.level_count() > 0;
  if (opt.log && has_re && !opt.zeros && !opt.from) *opt.log << "\nFitting fixed effects model:\n";
  ThetaVector start = model.make_theta(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.layout->size())));
  if (opt.from)
    start = model.make_theta(*opt.from);
  else if (has_re)
    start = starting_values(ctx, opt);
  else if (!opt.zeros)
    start = model.make_theta(detail::crude_start(ctx));  // single stage
  if (opt.log) *opt.log << (has_re ? "\nFitting full model:\n\n" : "\n");
  FittedModel fit = maximize_model(ctx, std::move(start), opt);
  fit.warnings.insert(fit.warnings.begin(), model.warnings.begin(), model.warnings.end());
  return fit;
}

// ---------------------------------------------------------------------------
// Reporting

enum class RowKind { coefficient, loading, ancillary, sd, corr, hidden };

struct CoefRow {
  std::string section;  // "_t" or the level name
  std::string name;
  RowKind kind = RowKind::coefficient;
  double estimate = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();
  double z = std::numeric_limits<double>::quiet_NaN();
  double p = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
};

struct CoefTable {
  double level = 95.0;
  double loglik = 0.0;
  std::size_t n_obs = 0;
  std::vector<CoefRow> rows;
  bool splines_hidden = false;

  const CoefRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw ContractError("no row named '" + name + "'");
  }
};

namespace detail {
inline double delta_se(const FittedModel& fit, const std::function<double(const Eigen::VectorXd&)>& g) {
  if (!fit.vcov_ok) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::VectorXd& x = fit.theta.values;
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = gradient_step(x[i]);
    y[i] = x[i] + h;
    const double fp = g(y);
    y[i] = x[i] - h;
    const double fm = g(y);
    y[i] = x[i];
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return std::sqrt(std::max(0.0, grad.dot(fit.vcov * grad)));
}

inline double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }
}  // namespace detail

inline CoefTable report(const FittedModel& fit, double level = 95.0) {
  const double zc = z_critical(level);
  const Model& m = fit.model;
  const auto& lay = *m.layout;
  CoefTable t;
  t.level = level;
  t.loglik = fit.loglik;
  t.n_obs = fit.n_obs;
  auto wald = [&](const std::string& section, std::size_t idx, RowKind kind) {
    CoefRow r;
    r.section = section;
    r.name = lay.names[idx];
    r.kind = kind;
    const auto i = static_cast<Eigen::Index>(idx);
    r.estimate = fit.theta.values[i];
    if (fit.vcov_ok) {
      r.se = std::sqrt(fit.vcov(i, i));
      r.z = r.estimate / r.se;
      r.p = detail::two_sided_p(r.z);
      r.lo = r.estimate - zc * r.se;
      r.hi = r.estimate + zc * r.se;
    }
    return r;
  };
  for (std::size_t k = 0; k < lay.fixed.size; ++k) t.rows.push_back(wald("_t", lay.fixed.offset + k, RowKind::coefficient));
  for (std::size_t k = 0; k < lay.tvc.size; ++k) t.rows.push_back(wald("_t", lay.tvc.offset + k, RowKind::coefficient));
  for (std::size_t l = 0; l < m.level_count(); ++l) {
    const auto labels = m.re_labels(l);
    const auto& lev = m.spec.levels[l];
    std::size_t k = 0;
    for (const auto& v : lev.vars) {
      CoefRow r;
      r.section = "_t";
      r.name = v + "#" + labels[k++] + "[" + lev.level + "]";
      r.kind = RowKind::loading;
      r.estimate = 1.0;
      t.rows.push_back(r);
    }
    if (lev.constant) {
      CoefRow r;
      r.section = "_t";
      r.name = labels[k] + "[" + lev.level + "]";
      r.kind = RowKind::loading;
      r.estimate = 1.0;
      t.rows.push_back(r);
    }
  }
  t.rows.push_back(wald("_t", lay.intercept.offset, RowKind::coefficient));
  const bool spline = m.spec.family == FamilyKind::rp || m.spec.family == FamilyKind::rcs;
  for (std::size_t k = 0; k < lay.baseline.size; ++k)
    t.rows.push_back(wald("_t", lay.baseline.offset + k, spline ? RowKind::hidden : RowKind::ancillary));
  t.splines_hidden = spline;

  for (std::size_t l = 0; l < m.level_count(); ++l) {
    const auto labels = m.re_labels(l);
    const auto& lev = m.spec.levels[l];
    const int q = lev.dim();
    auto sigma_at = [&, l](const Eigen::VectorXd& x) { return m.sigma(m.make_theta(x), l); };
    const Eigen::MatrixXd s = sigma_at(fit.theta.values);
    auto add_sd = [&](const std::string& name, int i) {
      CoefRow r;
      r.section = lev.level;
      r.name = name;
      r.kind = RowKind::sd;
      auto g = [&, i](const Eigen::VectorXd& x) { return 0.5 * std::log(sigma_at(x)(i, i)); };
      const double lsd = 0.5 * std::log(s(i, i));
      const double se = detail::delta_se(fit, g);
      r.estimate = std::exp(lsd);
      r.se = r.estimate * se;
      r.lo = std::exp(lsd - zc * se);
      r.hi = std::exp(lsd + zc * se);
      t.rows.push_back(r);
    };
    auto add_corr = [&](const std::string& name, int i, int j) {
      CoefRow r;
      r.section = lev.level;
      r.name = name;
      r.kind = RowKind::corr;
      auto corr = [&, i, j](const Eigen::VectorXd& x) {
        const Eigen::MatrixXd sx = sigma_at(x);
        return sx(i, j) / std::sqrt(sx(i, i) * sx(j, j));
      };
      auto g = [&](const Eigen::VectorXd& x) { return std::atanh(std::clamp(corr(x), -1.0 + 1e-15, 1.0 - 1e-15)); };
      const double c = corr(fit.theta.values);
      const double se = detail::delta_se(fit, g);
      const double a = std::atanh(std::clamp(c, -1.0 + 1e-15, 1.0 - 1e-15));
      r.estimate = c;
      r.se = (1.0 - c * c) * se;
      r.lo = std::tanh(a - zc * se);
      r.hi = std::tanh(a + zc * se);
      t.rows.push_back(r);
    };
    std::string all;
    for (const auto& lb : labels) all += (all.empty() ? "" : " ") + lb;
    switch (lev.covariance) {
      case CovarianceKind::identity: add_sd("sd(" + all + ")", 0); break;
      case CovarianceKind::diagonal:
        for (int i = 0; i < q; ++i) add_sd("sd(" + labels[static_cast<std::size_t>(i)] + ")", i);
        break;
      case CovarianceKind::exchangeable:
        add_sd("sd(" + all + ")", 0);
        add_corr("corr(" + all + ")", 1, 0);
        break;
      case CovarianceKind::unstructured:
        for (int i = 0; i < q; ++i) add_sd("sd(" + labels[static_cast<std::size_t>(i)] + ")", i);
        for (int i = 0; i < q; ++i)
          for (int j = i + 1; j < q; ++j)
            add_corr("corr(" + labels[static_cast<std::size_t>(i)] + "," + labels[static_cast<std::size_t>(j)] + ")", i, j);
        break;
    }
  }
  return t;
}

inline void print_table(std::ostream& os, const CoefTable& t, const FittedModel& fit) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-48sNumber of obs     = %10zu\n", "Mixed effects survival model", t.n_obs);
  os << buf;
  std::snprintf(buf, sizeof buf, "Log likelihood = %.8g\n", t.loglik);
  os << buf;
  const std::string rule(78, '-');
  const std::string mid = std::string(13, '-') + "+" + std::string(64, '-');
  os << rule << '\n';
  char lvl[32];
  std::snprintf(lvl, sizeof lvl, "[%g%% Conf. Interval]", t.level);
  std::snprintf(buf, sizeof buf, "%12s | %10s %10s %8s %8s   %s\n", "", "Coef.", "Std. Err.", "z", "P>|z|", lvl);
  os << buf << mid << '\n';
  auto name12 = [](std::string s) {
    if (s.size() > 12) s = s.substr(0, 9) + "~" + s.substr(s.size() - 2);
    return s;
  };
  auto num = [](double v, int w) {
    char b[32];
    if (std::isnan(v)) {
      std::snprintf(b, sizeof b, "%*s", w, ".");
      return std::string(b);
    }
    for (int prec = 7; prec > 1; --prec) {
      std::snprintf(b, sizeof b, "%*.*g", w, prec, v);
      if (static_cast<int>(std::strlen(b)) <= w) break;
    }
    return std::string(b);
  };
  std::string section;
  for (const auto& r : t.rows) {
    if (r.kind == RowKind::hidden) continue;
    if (r.section != section) {
      if (!section.empty()) os << mid << '\n';
      section = r.section;
      std::snprintf(buf, sizeof buf, "%-12s |\n", (section + ":").c_str());
      os << buf;
    }
    if (r.kind == RowKind::sd || r.kind == RowKind::corr) {
      std::snprintf(buf, sizeof buf, "%12s | %s %s %8s %8s   %s %s\n", name12(r.name).c_str(), num(r.estimate, 10).c_str(),
                    num(r.se, 10).c_str(), "", "", num(r.lo, 10).c_str(), num(r.hi, 10).c_str());
    } else {
      char zb[16], pb[16];
      if (std::isnan(r.z)) {
        std::snprintf(zb, sizeof zb, "%8s", ".");
        std::snprintf(pb, sizeof pb, "%8s", ".");
      } else {
        std::snprintf(zb, sizeof zb, "%8.2f", r.z);
        std::snprintf(pb, sizeof pb, "%8.3f", r.p);
      }
      std::snprintf(buf, sizeof buf, "%12s | %s %s %s %s   %s %s\n", name12(r.name).c_str(), num(r.estimate, 10).c_str(),
                    num(r.se, 10).c_str(), zb, pb, num(r.lo, 10).c_str(), num(r.hi, 10).c_str());
    }
    os << buf;
  }
  os << rule << '\n';
  if (t.splines_hidden) os << "    Warning: Baseline spline coefficients not shown\n";
  for (const auto& w : fit.warnings) os << "    Warning: " << w << '\n';
  if (!fit.convergence.converged) os << "    Warning: convergence not achieved (" << fit.convergence.status << ")\n";
}

}  // namespace mesurv
