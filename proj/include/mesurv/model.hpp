#pragma once

// Model specification, the packed parameter layout, and the per-record design
// (covariates and spline bases evaluated at each record's times).

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/family.hpp"
#include "mesurv/quadrature.hpp"
#include "mesurv/random_effects.hpp"
#include "mesurv/spline.hpp"

namespace mesurv {

struct TvcSpec {
  std::string var;
  int df = 1;
  std::vector<double> knots;  // interior knots on the time scale; overrides df when set
};

struct RELevelSpec {
  std::string level;              // cluster identifier column
  std::vector<std::string> vars;  // random coefficients
  bool constant = true;           // random intercept
  CovarianceKind covariance = CovarianceKind::diagonal;

  int dim() const { return static_cast<int>(vars.size()) + (constant ? 1 : 0); }
};

struct ModelSpec {
  FamilyKind family = FamilyKind::rp;
  int df = 3;
  std::vector<double> knots;  // baseline interior knots on the time scale
  std::vector<std::string> fixed;
  std::vector<TvcSpec> tvc;
  std::vector<RELevelSpec> levels;  // highest level first
  REDistribution re_dist;
  IntegrationSettings integration;
  bool orthogonalize = true;
  bool orthogonalize_tvc = true;
  std::shared_ptr<const UserFamily> user;
};

struct Slice {
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t end() const { return offset + size; }
};

struct ThetaLayout {
  std::vector<std::string> names;
  Slice fixed, tvc, intercept, baseline;
  std::vector<Slice> covariance;  // one per level

  std::size_t size() const { return names.size(); }
};

// Packed free parameters with the layout they were built for.
struct ThetaVector {
  Eigen::VectorXd values;
  std::shared_ptr<const ThetaLayout> layout;

  Eigen::Ref<const Eigen::VectorXd> slice(const Slice& s) const {
    return values.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.size));
  }
};

// A specification bound to data-derived quantities: knots, orthogonalization
// transforms and the parameter layout. Copyable; bases are owned here.
class Model {
 public:
  ModelSpec spec;
  std::optional<SplineBasis> baseline;
  std::vector<SplineBasis> tvc_bases;
  std::shared_ptr<const ThetaLayout> layout;
  std::vector<std::string> warnings;

  // Fits knots and orthogonalization from the declared dataset.
  static Model prepare(const ModelSpec& spec, const Dataset& data) {
    if (!data.declared()) throw ContractError("dataset has no declared survival outcome");
    Model m;
    m.spec = spec;
    m.spec.re_dist.validate();
    if (spec.family == FamilyKind::user && (!spec.user || !spec.user->log_hazard))
      throw ContractError("user family needs a log-hazard callback");
    for (const auto& t : spec.tvc)
      if (std::find(spec.fixed.begin(), spec.fixed.end(), t.var) == spec.fixed.end())
        throw ContractError("time-dependent effect '" + t.var + "' also needs a main effect");
    for (const auto& v : spec.fixed) data.covariate_index(v);
    for (const auto& l : spec.levels) {
      if (l.dim() < 1) throw ContractError("random-effect equation for '" + l.level + "' has no terms");
      for (const auto& v : l.vars) data.covariate_index(v);
      if (l.covariance == CovarianceKind::exchangeable && l.dim() < 2)
        throw ContractError("exchangeable covariance needs at least two random effects");
    }
    if (spec.re_dist.kind == REDistKind::student_t && spec.integration.method != IntMethod::mcarlo)
      throw ContractError("t-distributed random effects require intmethod mcarlo");

    std::vector<double> event_lt, all_lt;
    for (const auto& r : data.records()) {
      all_lt.push_back(std::log(r.exit_time));
      if (r.event) event_lt.push_back(std::log(r.exit_time));
    }
    if (spec.family == FamilyKind::rp || spec.family == FamilyKind::rcs) {
      if (spec.df < 1 || spec.df > 10) throw RangeError("df must be between 1 and 10");
      KnotVector k = spec.knots.empty() ? place_default_knots(event_lt, spec.df, &m.warnings)
                                        : knots_from_times(event_lt, spec.knots);
      m.baseline = SplineBasis::fit(std::move(k), all_lt, spec.orthogonalize);
    }
    for (const auto& t : spec.tvc) {
      if (t.knots.empty() && (t.df < 1 || t.df > 10)) throw RangeError("dftvc must be between 1 and 10");
      KnotVector k = t.knots.empty() ? place_default_knots(event_lt, t.df, &m.warnings) : knots_from_times(event_lt, t.knots);
      m.tvc_bases.push_back(SplineBasis::fit(std::move(k), all_lt, spec.orthogonalize_tvc));
    }
    m.build_layout();
    return m;
  }

  // Rebuild from stored bases (model files).
  static Model restore(const ModelSpec& spec, std::optional<SplineBasis> baseline, std::vector<SplineBasis> tvc_bases) {
    Model m;
    m.spec = spec;
    m.baseline = std::move(baseline);
    m.tvc_bases = std::move(tvc_bases);
    m.build_layout();
    return m;
  }

  int baseline_df() const { return baseline ? baseline->df() : 0; }
  int ancillary_count() const { return Family::ancillary_count(spec.family, baseline_df(), spec.user.get()); }
  std::size_t level_count() const { return spec.levels.size(); }
  int re_dim(std::size_t level) const { return spec.levels[level].dim(); }
  int re_dim_total() const {
    int q = 0;
    for (const auto& l : spec.levels) q += l.dim();
    return q;
  }

  // Random-effect labels M1, M2, ... numbered across levels.
  std::vector<std::string> re_labels(std::size_t level) const {
    int first = 1;
    for (std::size_t l = 0; l < level; ++l) first += re_dim(l);
    std::vector<std::string> out;
    for (int k = 0; k < re_dim(level); ++k) out.push_back("M" + std::to_string(first + k));
    return out;
  }

  std::string tvc_name(std::size_t r, int k) const {
    const auto& var = spec.tvc[r].var;
    if (tvc_bases[r].df() == 1) return var + "#rcs()";
    return var + "#rcs()_" + std::to_string(k + 1);
  }

  ThetaVector make_theta(Eigen::VectorXd values) const {
    if (static_cast<std::size_t>(values.size()) != layout->size()) throw ContractError("parameter vector has wrong length");
    return ThetaVector{std::move(values), layout};
  }

  Family family(const ThetaVector& theta) const {
    Family f;
    f.kind = spec.family;
    f.intercept = theta.values[static_cast<Eigen::Index>(layout->intercept.offset)];
    f.params = theta.slice(layout->baseline);
    f.baseline = baseline ? &*baseline : nullptr;
    f.user = spec.user;
    return f;
  }

  Eigen::MatrixXd sigma(const ThetaVector& theta, std::size_t level) const {
    const auto& s = layout->covariance[level];
    const auto p = theta.slice(s);
    std::vector<double> v(p.begin(), p.end());
    return assemble_sigma(spec.levels[level].covariance, re_dim(level), v);
  }

 private:
  void build_layout() {
    auto lay = std::make_shared<ThetaLayout>();
    auto add = [&](Slice& s, const std::vector<std::string>& names) {
      s.offset = lay->names.size();
      s.size = names.size();
      lay->names.insert(lay->names.end(), names.begin(), names.end());
    };
    add(lay->fixed, spec.fixed);
    std::vector<std::string> tv;
    for (std::size_t r = 0; r < spec.tvc.size(); ++r)
      for (int k = 0; k < tvc_bases[r].df(); ++k) tv.push_back(tvc_name(r, k));
    add(lay->tvc, tv);
    add(lay->intercept, {"_cons"});
    std::vector<std::string> anc;
    switch (spec.family) {
      case FamilyKind::weibull: anc = {"log(gamma)"}; break;
      case FamilyKind::gompertz: anc = {"gamma"}; break;
      case FamilyKind::rp:
      case FamilyKind::rcs:
        for (int k = 0; k < baseline_df(); ++k) anc.push_back("_rcs" + std::to_string(k + 1));
        break;
      case FamilyKind::user:
        if (spec.user) anc = spec.user->param_names;
        break;
      default: break;
    }
    add(lay->baseline, anc);
    for (std::size_t l = 0; l < spec.levels.size(); ++l) {
      const auto labels = re_labels(l);
      const auto& lev = spec.levels[l];
      std::vector<std::string> names;
      switch (lev.covariance) {
        case CovarianceKind::identity: names = {lev.level + ":log_sd"}; break;
        case CovarianceKind::diagonal:
          for (const auto& m : labels) names.push_back(lev.level + ":log_sd(" + m + ")");
          break;
        case CovarianceKind::exchangeable: names = {lev.level + ":log_sd", lev.level + ":corr_param"}; break;
        case CovarianceKind::unstructured:
          for (const auto& m : labels) names.push_back(lev.level + ":log_sd(" + m + ")");
          for (int i = 1; i < lev.dim(); ++i)
            for (int j = 0; j < i; ++j) names.push_back(lev.level + ":atanh_pcorr(" + labels[j] + "," + labels[i] + ")");
          break;
      }
      Slice s;
      add(s, names);
      lay->covariance.push_back(s);
    }
    layout = std::move(lay);
  }
};

// Per-record quantities that do not depend on the parameters.
struct Design {
  std::size_t n = 0;
  Eigen::VectorXd exit, entry, event, rate;
  Eigen::MatrixXd x;                  // fixed covariates
  Eigen::MatrixXd tvc_x;              // tvc covariate values
  std::vector<Eigen::MatrixXd> z;     // per level: n x q_l
  bool has_rate = false;
  bool has_entry = false;

  static Design build(const Model& m, const Dataset& d) {
    Design g;
    const auto& recs = d.records();
    g.n = recs.size();
    const auto n = static_cast<Eigen::Index>(g.n);
    g.exit.resize(n);
    g.entry.resize(n);
    g.event.resize(n);
    g.rate.setZero(n);
    g.has_rate = d.has_expected_rate();
    g.has_entry = d.has_delayed_entry();
    std::vector<std::size_t> fx, tx;
    for (const auto& v : m.spec.fixed) fx.push_back(d.covariate_index(v));
    for (const auto& t : m.spec.tvc) tx.push_back(d.covariate_index(t.var));
    g.x.resize(n, static_cast<Eigen::Index>(fx.size()));
    g.tvc_x.resize(n, static_cast<Eigen::Index>(tx.size()));
    for (std::size_t l = 0; l < m.level_count(); ++l) g.z.emplace_back(n, m.re_dim(l));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = recs[static_cast<std::size_t>(i)];
      g.exit[i] = r.exit_time;
      g.entry[i] = r.entry_time;
      g.event[i] = r.event;
      if (g.has_rate) g.rate[i] = *r.expected_rate;
      for (std::size_t k = 0; k < fx.size(); ++k) g.x(i, static_cast<Eigen::Index>(k)) = r.covariates[fx[k]];
      for (std::size_t k = 0; k < tx.size(); ++k) g.tvc_x(i, static_cast<Eigen::Index>(k)) = r.covariates[tx[k]];
      for (std::size_t l = 0; l < m.level_count(); ++l) {
        const auto& lev = m.spec.levels[l];
        Eigen::Index c = 0;
        for (const auto& v : lev.vars) g.z[l](i, c++) = r.covariates[d.covariate_index(v)];
        if (lev.constant) g.z[l](i, c++) = 1.0;
      }
    }
    return g;
  }
};

// Linear predictor of record i with random-effect contribution `re_shift`.
inline LinearPredictor linear_predictor(const Model& m, const Design& g, const ThetaVector& theta, Eigen::Index i,
                                        double re_shift = 0.0) {
  LinearPredictor lp;
  const auto& lay = *m.layout;
  lp.base = re_shift;
  if (lay.fixed.size) lp.base += g.x.row(i).dot(theta.slice(lay.fixed));
  std::size_t off = lay.tvc.offset;
  for (std::size_t r = 0; r < m.tvc_bases.size(); ++r) {
    const auto df = static_cast<std::size_t>(m.tvc_bases[r].df());
    TvcTerm t;
    t.x = g.tvc_x(i, static_cast<Eigen::Index>(r));
    t.basis = &m.tvc_bases[r];
    t.delta = theta.values.segment(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(df));
    lp.tvc.push_back(std::move(t));
    off += df;
  }
  return lp;
}

}  // namespace mesurv
