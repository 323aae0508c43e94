#pragma once

// Marginal log-likelihood of a multilevel survival model.
//
// Every built-in family is proportional in the random effects, so the log
// density of record j given its random effects depends on them only through
// the scalar u_j = sum_l z_jl' b_l:
//   log f_j(u) = d_j * (log h_j + u) - H_j * exp(u)
// where h_j and H_j are hazard and cumulative hazard at u = 0. With an
// expected rate r_j the event term becomes d_j * log(r_j + h_j exp(u)). This
// gives exact derivatives for the Newton steps of the adaptive quadrature.
// User families are evaluated through their callbacks instead.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/family.hpp"
#include "mesurv/model.hpp"
#include "mesurv/quadrature.hpp"
#include "mesurv/random_effects.hpp"

namespace mesurv {

namespace detail {
inline double log_sum_exp(const std::vector<double>& v) {
  double m = neg_inf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}
}  // namespace detail

struct SubjectTerm {
  double event = 0.0;
  double log_h = 0.0;   // log hazard at u = 0 (excess hazard under relative survival)
  double cum_h = 0.0;   // cumulative (excess) hazard at exit, u = 0
  double cum_h0 = 0.0;  // cumulative hazard at entry, u = 0
  double rate = 0.0;    // expected mortality rate at exit
  std::function<double(double)> general;        // user families: log f(u)
  std::function<double(double)> general_entry;  // user families: log S(entry | u)

  double log_density(double u) const {
    if (general) return general(u);
    double ev = 0.0;
    if (event != 0.0) {
      if (rate > 0.0) {
        const double lh = log_h + u;
        ev = lh > std::log(rate) ? lh + std::log1p(rate * std::exp(-lh)) : std::log(rate) + std::log1p(std::exp(lh) / rate);
      } else {
        ev = log_h + u;
      }
    }
    if (cum_h == 0.0) return ev;
    return ev - cum_h * std::exp(u);
  }

  // First and second derivatives of log_density in u.
  void derivatives(double u, double& d1, double& d2) const {
    if (general) {
      const double h = 1e-4;
      const double f0 = general(u), fp = general(u + h), fm = general(u - h);
      d1 = (fp - fm) / (2.0 * h);
      d2 = (fp - 2.0 * f0 + fm) / (h * h);
      return;
    }
    const double ch = cum_h * std::exp(u);
    d1 = -ch;
    d2 = -ch;
    if (event != 0.0) {
      if (rate > 0.0) {
        const double ex = std::exp(log_h + u);
        const double share = ex / (rate + ex);
        d1 += share;
        d2 += share * (1.0 - share);
      } else {
        d1 += 1.0;
      }
    }
  }

  double log_entry_survival(double u) const {
    if (general_entry) return general_entry(u);
    if (cum_h0 == 0.0) return 0.0;
    return -cum_h0 * std::exp(u);
  }
};

struct LikelihoodDiagnostics {
  std::size_t adapt_fallbacks = 0;
  std::vector<std::string> messages;
};

struct LikelihoodOptions {
  unsigned threads = 0;  // 0: hardware concurrency
};

class LikelihoodContext {
 public:
  LikelihoodContext(const Model& model, const Dataset& data, LikelihoodOptions opts = {})
      : model_(std::make_shared<const Model>(model)), opts_(opts) {
    if (model.level_count() > 0) {
      std::vector<std::string> vars;
      for (const auto& l : model.spec.levels) vars.push_back(l.level);
      data_ = build_hierarchy(data, vars);
    } else {
      data_ = data;
    }
    design_ = Design::build(*model_, data_);
    index_records();
    build_standard_nodes();
  }

  const Model& model() const noexcept { return *model_; }
  const Dataset& data() const noexcept { return data_; }
  const Design& design() const noexcept { return design_; }
  std::size_t cluster_count() const { return model_->level_count() ? data_.levels()[0].size() : design_.n; }
  const std::vector<std::size_t>& records_in(std::size_t level, std::size_t cluster) const {
    return records_under_[level][cluster];
  }
  const NodeSet& standard_nodes(std::size_t level) const { return standard_[level]; }
  unsigned threads() const {
    if (opts_.threads) return opts_.threads;
    return std::max(1u, std::thread::hardware_concurrency());
  }
  void set_threads(unsigned t) { opts_.threads = t; }

  // Per-record terms at u = 0. Returns false if the parameters put any
  // record's hazard outside the valid region.
  bool subject_terms(const ThetaVector& theta, std::vector<SubjectTerm>& out) const {
    const Model& m = *model_;
    const Design& g = design_;
    out.assign(g.n, {});
    const Family fam = m.family(theta);
    bool ok = true;
    for (std::size_t j = 0; j < g.n; ++j) {
      const auto i = static_cast<Eigen::Index>(j);
      auto& s = out[j];
      s.event = g.event[i];
      s.rate = g.has_rate ? g.rate[i] : 0.0;
      LinearPredictor lp = linear_predictor(m, g, theta, i);
      const double t = g.exit[i], t0 = g.entry[i];
      if (fam.kind == FamilyKind::user) {
        make_general(fam, lp, t, t0, s);
        continue;
      }
      if (s.event != 0.0 || fam.kind == FamilyKind::rp) {
        s.log_h = log_hazard(fam, t, lp);
        if (!(s.log_h > neg_inf) || std::isnan(s.log_h)) ok = false;
      }
      s.cum_h = cum_hazard(fam, t, lp);
      if (t0 > 0.0) s.cum_h0 = cum_hazard(fam, t0, lp);
      if (!std::isfinite(s.cum_h) || !std::isfinite(s.cum_h0)) ok = false;
    }
    return ok;
  }

  std::vector<REPrior> priors(const ThetaVector& theta) const {
    std::vector<REPrior> out;
    for (std::size_t l = 0; l < model_->level_count(); ++l) out.emplace_back(model_->sigma(theta, l), model_->spec.re_dist);
    return out;
  }

  // Non-adaptive integral rule over b for one level.
  NodeSet prior_rule(std::size_t level, const REPrior& prior) const {
    const NodeSet& s = standard_[level];
    if (model_->spec.integration.method != IntMethod::mcarlo)
      return to_integral_rule(s, prior.chol(), Eigen::VectorXd::Zero(s.dim()));
    NodeSet r;
    r.nodes = prior.chol() * s.nodes;
    r.log_weights.resize(s.size());
    for (Eigen::Index k = 0; k < s.size(); ++k) r.log_weights[k] = s.log_weights[k] - prior.logpdf(r.nodes.col(k));
    return r;
  }

  struct Evaluation {
    std::vector<SubjectTerm> terms;
    std::vector<REPrior> priors;
    std::vector<NodeSet> rules;
    bool valid = true;
  };

  Evaluation evaluation(const ThetaVector& theta) const {
    Evaluation e;
    e.valid = subject_terms(theta, e.terms);
    if (!e.valid) return e;
    e.priors = priors(theta);
    for (std::size_t l = 0; l < e.priors.size(); ++l) e.rules.push_back(prior_rule(l, e.priors[l]));
    return e;
  }

  // log L_i for top-level cluster `c` (or record c when there are no levels).
  double cluster_log_likelihood(const Evaluation& e, std::size_t c, LikelihoodDiagnostics* diag = nullptr) const {
    if (!e.valid) return neg_inf;
    const Model& m = *model_;
    if (m.level_count() == 0) {
      const auto& s = e.terms[c];
      return s.log_density(0.0) - s.log_entry_survival(0.0);
    }
    std::vector<double> u(design_.n, 0.0);
    const auto& recs = records_under_[0][c];
    const NodeSet* rule = &e.rules[0];
    NodeSet adapted;
    if (m.spec.integration.method == IntMethod::mvaghermite) {
      AdaptResult ar = adapt_top(e, c, u);
      if (!ar.adapted && diag) {
        ++diag->adapt_fallbacks;
        diag->messages.push_back("cluster " + data_.levels()[0][c].id + ": " + ar.warning);
      }
      adapted = std::move(ar.nodes);
      rule = &adapted;
    }
    const double num = integrate(e, 0, c, u, *rule, false);
    if (!(num > neg_inf)) {
      if (diag) diag->messages.push_back("cluster " + data_.levels()[0][c].id + ": likelihood underflow at all nodes");
      return neg_inf;
    }
    bool any_entry = false;
    for (auto j : recs)
      if (design_.entry[static_cast<Eigen::Index>(j)] > 0.0) any_entry = true;
    if (!any_entry) return num;
    return num - integrate(e, 0, c, u, *rule, true);
  }

  double total_log_likelihood(const ThetaVector& theta, LikelihoodDiagnostics* diag = nullptr) const {
    const Evaluation e = evaluation(theta);
    if (!e.valid) return neg_inf;
    const std::size_t nc = cluster_count();
    std::vector<double> parts(nc, 0.0);
    const unsigned nt = std::min<unsigned>(threads(), static_cast<unsigned>(std::max<std::size_t>(1, nc / 4)));
    std::mutex mu;
    auto work = [&](std::size_t begin, std::size_t end) {
      LikelihoodDiagnostics local;
      for (std::size_t c = begin; c < end; ++c) parts[c] = cluster_log_likelihood(e, c, diag ? &local : nullptr);
      if (diag) {
        std::lock_guard<std::mutex> lock(mu);
        diag->adapt_fallbacks += local.adapt_fallbacks;
        diag->messages.insert(diag->messages.end(), local.messages.begin(), local.messages.end());
      }
    };
    if (nt <= 1) {
      work(0, nc);
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (nc + nt - 1) / nt;
      for (unsigned t = 0; t < nt; ++t) {
        const std::size_t b = t * chunk, en = std::min(nc, b + chunk);
        if (b < en) pool.emplace_back(work, b, en);
      }
      for (auto& th : pool) th.join();
    }
    // fixed reduction order
    double total = 0.0;
    for (double p : parts) {
      if (!(p > neg_inf)) return neg_inf;
      total += p;
    }
    return std::isfinite(total) ? total : neg_inf;
  }

 private:
  void index_records() {
    const Model& m = *model_;
    const std::size_t L = m.level_count();
    records_under_.assign(L, {});
    if (L == 0) return;
    const auto& levels = data_.levels();
    for (std::size_t l = L; l-- > 0;) {
      records_under_[l].resize(levels[l].size());
      for (std::size_t c = 0; c < levels[l].size(); ++c) {
        auto& out = records_under_[l][c];
        if (l == L - 1) {
          out = levels[l][c].children;
        } else {
          for (auto child : levels[l][c].children)
            out.insert(out.end(), records_under_[l + 1][child].begin(), records_under_[l + 1][child].end());
        }
      }
    }
  }

  void build_standard_nodes() {
    const Model& m = *model_;
    const auto& is = m.spec.integration;
    for (std::size_t l = 0; l < m.level_count(); ++l) {
      const int q = m.re_dim(l);
      if (is.method == IntMethod::mcarlo)
        standard_.push_back(mc_draws(q, is.points, m.spec.re_dist, is.seed + l));
      else
        standard_.push_back(tensor_nodes(gauss_hermite(is.points), q));
    }
  }

  static void make_general(const Family& fam, const LinearPredictor& lp, double t, double t0, SubjectTerm& s) {
    const double event = s.event, rate = s.rate;
    s.general = [fam, lp, t, event, rate](double u) {
      LinearPredictor shifted = lp;
      shifted.base += u;
      double ev = 0.0;
      if (event != 0.0) {
        const double lh = log_hazard(fam, t, shifted);
        ev = rate > 0.0 ? std::log(rate + std::exp(lh)) : lh;
      }
      return ev - cum_hazard(fam, t, shifted);
    };
    if (t0 > 0.0) {
      s.general_entry = [fam, lp, t0](double u) {
        LinearPredictor shifted = lp;
        shifted.base += u;
        return -cum_hazard(fam, t0, shifted);
      };
    }
  }

  // log of the integral over level-l random effects of cluster c, with the
  // higher-level contributions already in u.
  double integrate(const Evaluation& e, std::size_t l, std::size_t c, std::vector<double>& u, const NodeSet& rule,
                   bool entry) const {
    const auto& recs = records_under_[l][c];
    const auto& z = design_.z[l];
    const std::size_t L = model_->level_count();
    std::vector<double> saved(recs.size());
    for (std::size_t k = 0; k < recs.size(); ++k) saved[k] = u[recs[k]];
    std::vector<double> acc(static_cast<std::size_t>(rule.size()));
    for (Eigen::Index k = 0; k < rule.size(); ++k) {
      const Eigen::VectorXd b = rule.nodes.col(k);
      for (std::size_t r = 0; r < recs.size(); ++r) u[recs[r]] = saved[r] + z.row(static_cast<Eigen::Index>(recs[r])).dot(b);
      const double inner = inner_value(e, l, c, u, entry);
      acc[static_cast<std::size_t>(k)] = rule.log_weights[k] + e.priors[l].logpdf(b) + inner;
    }
    for (std::size_t k = 0; k < recs.size(); ++k) u[recs[k]] = saved[k];
    (void)L;
    return detail::log_sum_exp(acc);
  }

  // Sum over the cluster's children given the current offsets.
  double inner_value(const Evaluation& e, std::size_t l, std::size_t c, std::vector<double>& u, bool entry) const {
    const std::size_t L = model_->level_count();
    double v = 0.0;
    if (l + 1 == L) {
      for (auto j : records_under_[l][c]) v += entry ? e.terms[j].log_entry_survival(u[j]) : e.terms[j].log_density(u[j]);
      return v;
    }
    for (auto child : data_.levels()[l][c].children) v += integrate(e, l + 1, child, u, e.rules[l + 1], entry);
    return v;
  }

  AdaptResult adapt_top(const Evaluation& e, std::size_t c, std::vector<double>& u) const {
    const Model& m = *model_;
    const auto& recs = records_under_[0][c];
    const auto& z = design_.z[0];
    const REPrior& prior = e.priors[0];
    const auto q = prior.dim();
    LogIntegrand f;
    if (m.level_count() == 1) {
      f = [&](const Eigen::VectorXd& b) {
        LogIntegrandEval r;
        r.value = prior.logpdf(b);
        r.grad = Eigen::VectorXd::Zero(q);
        r.hess = Eigen::MatrixXd::Zero(q, q);
        for (auto j : recs) {
          const auto row = z.row(static_cast<Eigen::Index>(j));
          const double uj = row.dot(b);
          r.value += e.terms[j].log_density(uj);
          double d1 = 0.0, d2 = 0.0;
          e.terms[j].derivatives(uj, d1, d2);
          r.grad += d1 * row.transpose();
          r.hess += d2 * row.transpose() * row;
        }
        prior.add_derivatives(b, r.grad, r.hess);
        return r;
      };
    } else {
      auto data_part = [&](const Eigen::VectorXd& b) {
        std::vector<double> saved;
        for (auto j : recs) saved.push_back(u[j]);
        for (std::size_t r = 0; r < recs.size(); ++r) u[recs[r]] = saved[r] + z.row(static_cast<Eigen::Index>(recs[r])).dot(b);
        const double v = inner_value(e, 0, c, u, false);
        for (std::size_t r = 0; r < recs.size(); ++r) u[recs[r]] = saved[r];
        return v;
      };
      f = [&, data_part](const Eigen::VectorXd& b) {
        LogIntegrandEval r;
        const double h = 1e-3;
        const double f0 = data_part(b);
        r.value = f0 + prior.logpdf(b);
        r.grad = Eigen::VectorXd::Zero(q);
        r.hess = Eigen::MatrixXd::Zero(q, q);
        std::vector<double> fp(static_cast<std::size_t>(q)), fm(static_cast<std::size_t>(q));
        for (Eigen::Index i = 0; i < q; ++i) {
          Eigen::VectorXd bp = b, bm = b;
          bp[i] += h;
          bm[i] -= h;
          fp[static_cast<std::size_t>(i)] = data_part(bp);
          fm[static_cast<std::size_t>(i)] = data_part(bm);
          r.grad[i] = (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) / (2.0 * h);
          r.hess(i, i) = (fp[static_cast<std::size_t>(i)] - 2.0 * f0 + fm[static_cast<std::size_t>(i)]) / (h * h);
        }
        for (Eigen::Index i = 0; i < q; ++i)
          for (Eigen::Index k = 0; k < i; ++k) {
            Eigen::VectorXd pp = b, pm = b, mp = b, mm = b;
            pp[i] += h; pp[k] += h;
            pm[i] += h; pm[k] -= h;
            mp[i] -= h; mp[k] += h;
            mm[i] -= h; mm[k] -= h;
            r.hess(i, k) = r.hess(k, i) = (data_part(pp) - data_part(pm) - data_part(mp) + data_part(mm)) / (4.0 * h * h);
          }
        if (!std::isfinite(r.value)) r.value = neg_inf;
        prior.add_derivatives(b, r.grad, r.hess);
        return r;
      };
    }
    return adapt_cluster(standard_[0], f, prior.chol(), m.spec.integration);
  }

  std::shared_ptr<const Model> model_;
  LikelihoodOptions opts_;
  Dataset data_;
  Design design_;
  std::vector<std::vector<std::vector<std::size_t>>> records_under_;
  std::vector<NodeSet> standard_;
};

// Log density of record i at the concatenated random effects b (all levels),
// computed directly from the family rather than through the cached terms.
inline double subject_log_density(const LikelihoodContext& ctx, const ThetaVector& theta, std::size_t i,
                                  const Eigen::VectorXd& b) {
  const Model& m = ctx.model();
  const Design& g = ctx.design();
  const auto row = static_cast<Eigen::Index>(i);
  if (b.size() != m.re_dim_total()) throw ContractError("random-effect vector has wrong dimension");
  double shift = 0.0;
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < m.level_count(); ++l) {
    const auto q = m.re_dim(l);
    shift += g.z[l].row(row).dot(b.segment(off, q));
    off += q;
  }
  const Family fam = m.family(theta);
  const LinearPredictor lp = linear_predictor(m, g, theta, row, shift);
  const double t = g.exit[row];
  double ev = 0.0;
  if (g.event[row] != 0.0) {
    const double lh = log_hazard(fam, t, lp);
    const double rate = g.has_rate ? g.rate[row] : 0.0;
    if (rate > 0.0) {
      const double total = rate + std::exp(lh);
      if (!(total > 0.0)) return neg_inf;
      ev = std::log(total);
    } else {
      ev = lh;
    }
  }
  return ev - cum_hazard(fam, t, lp);
}

}  // namespace mesurv
