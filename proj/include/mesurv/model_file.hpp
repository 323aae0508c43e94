#pragma once

// Self-contained JSON model files: specification, spline bases, estimates and
// variance matrix. Doubles are written in shortest round-trip form so a
// reloaded model predicts bit-for-bit like the in-memory one.

#include <nlohmann/json.hpp>

#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mesurv/error.hpp"
#include "mesurv/estimation.hpp"
#include "mesurv/model.hpp"

namespace mesurv {

inline constexpr int model_file_version = 1;

struct OutcomeColumns {
  std::string time = "time";
  std::string event = "event";
  std::optional<std::string> entry;
  std::optional<std::string> rate;
};

struct ModelFile {
  FittedModel fit;
  OutcomeColumns outcome;
};

namespace detail {
using nlohmann::json;

inline json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json(const SplineBasis& b) {
  json j;
  j["knots"] = b.knots().knots;
  j["orthogonal"] = b.orthogonalized();
  if (b.orthogonalized()) {
    j["center"] = to_json(b.center());
    const Eigen::MatrixXd& r = b.transform();
    std::vector<double> rows;
    for (Eigen::Index i = 0; i < r.rows(); ++i)
      for (Eigen::Index k = 0; k < r.cols(); ++k) rows.push_back(r(i, k));
    j["transform"] = rows;
  }
  return j;
}

inline SplineBasis basis_from(const json& j) {
  KnotVector k{j.at("knots").get<std::vector<double>>()};
  k.validate();
  if (!j.at("orthogonal").get<bool>()) return SplineBasis(std::move(k));
  const int df = k.df();
  const auto rows = j.at("transform").get<std::vector<double>>();
  if (static_cast<int>(rows.size()) != df * df) throw SchemaError("model file: spline transform has wrong size");
  Eigen::MatrixXd r(df, df);
  for (int i = 0; i < df; ++i)
    for (int c = 0; c < df; ++c) r(i, c) = rows[static_cast<std::size_t>(i * df + c)];
  return SplineBasis(std::move(k), vector_from(j.at("center")), std::move(r));
}

inline std::string method_name(IntMethod m) {
  switch (m) {
    case IntMethod::mvaghermite: return "mvaghermite";
    case IntMethod::ghermite: return "ghermite";
    case IntMethod::mcarlo: return "mcarlo";
  }
  return "?";
}
}  // namespace detail

inline IntMethod int_method_from_string(const std::string& s) {
  if (s == "mvaghermite") return IntMethod::mvaghermite;
  if (s == "ghermite") return IntMethod::ghermite;
  if (s == "mcarlo") return IntMethod::mcarlo;
  throw ContractError("unknown integration method '" + s + "'");
}

inline void save_model(std::ostream& out, const ModelFile& mf) {
  using nlohmann::json;
  const FittedModel& f = mf.fit;
  const Model& m = f.model;
  const ModelSpec& s = m.spec;
  if (s.family == FamilyKind::user) throw ContractError("models with user-defined hazards cannot be saved");
  json j;
  j["version"] = model_file_version;
  j["outcome"] = {{"time", mf.outcome.time}, {"event", mf.outcome.event}};
  if (mf.outcome.entry) j["outcome"]["entry"] = *mf.outcome.entry;
  if (mf.outcome.rate) j["outcome"]["rate"] = *mf.outcome.rate;

  json spec;
  spec["family"] = to_string(s.family);
  spec["df"] = s.df;
  spec["knots"] = s.knots;
  spec["fixed"] = s.fixed;
  spec["tvc"] = json::array();
  for (const auto& t : s.tvc) spec["tvc"].push_back({{"var", t.var}, {"df", t.df}, {"knots", t.knots}});
  spec["levels"] = json::array();
  for (const auto& l : s.levels)
    spec["levels"].push_back(
        {{"level", l.level}, {"vars", l.vars}, {"constant", l.constant}, {"covariance", to_string(l.covariance)}});
  spec["re_distribution"] = {{"kind", s.re_dist.kind == REDistKind::gaussian ? "gaussian" : "t"}, {"dof", s.re_dist.dof}};
  spec["integration"] = {{"method", detail::method_name(s.integration.method)},
                         {"points", s.integration.points},
                         {"adapt_iterations", s.integration.adapt_iterations},
                         {"adapt_tolerance", s.integration.adapt_tolerance},
                         {"seed", s.integration.seed}};
  spec["orthogonalize"] = s.orthogonalize;
  spec["orthogonalize_tvc"] = s.orthogonalize_tvc;
  j["spec"] = spec;

  if (m.baseline) j["baseline"] = detail::to_json(*m.baseline);
  j["tvc_bases"] = json::array();
  for (const auto& b : m.tvc_bases) j["tvc_bases"].push_back(detail::to_json(b));

  j["parameters"] = {{"names", m.layout->names}, {"values", detail::to_json(f.theta.values)}};
  if (f.vcov_ok) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < f.vcov.rows(); ++i)
      for (Eigen::Index k = 0; k < f.vcov.cols(); ++k) v.push_back(f.vcov(i, k));
    j["vcov"] = v;
  } else {
    j["vcov"] = nullptr;
  }
  j["loglik"] = f.loglik;
  j["convergence"] = {{"iterations", f.convergence.iterations},
                      {"gradient_max", f.convergence.gradient_max},
                      {"converged", f.convergence.converged},
                      {"status", f.convergence.status}};
  j["summary"] = {{"n_obs", f.n_obs}, {"n_events", f.n_events}, {"n_clusters", f.n_clusters}, {"time_at_risk", f.time_at_risk}};
  j["warnings"] = f.warnings;
  out << j.dump(2) << '\n';
}

inline ModelFile load_model(std::istream& in) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version > model_file_version)
      throw SchemaError("model file version " + std::to_string(version) + " is newer than supported version " +
                        std::to_string(model_file_version));
    ModelFile mf;
    const auto& o = j.at("outcome");
    mf.outcome.time = o.at("time").get<std::string>();
    mf.outcome.event = o.at("event").get<std::string>();
    if (o.contains("entry")) mf.outcome.entry = o.at("entry").get<std::string>();
    if (o.contains("rate")) mf.outcome.rate = o.at("rate").get<std::string>();

    const auto& sj = j.at("spec");
    ModelSpec s;
    s.family = family_from_string(sj.at("family").get<std::string>());
    if (s.family == FamilyKind::user) throw SchemaError("model file uses a user-defined hazard");
    s.df = sj.at("df").get<int>();
    s.knots = sj.at("knots").get<std::vector<double>>();
    s.fixed = sj.at("fixed").get<std::vector<std::string>>();
    for (const auto& t : sj.at("tvc"))
      s.tvc.push_back(TvcSpec{t.at("var").get<std::string>(), t.at("df").get<int>(), t.at("knots").get<std::vector<double>>()});
    for (const auto& l : sj.at("levels"))
      s.levels.push_back(RELevelSpec{l.at("level").get<std::string>(), l.at("vars").get<std::vector<std::string>>(),
                                     l.at("constant").get<bool>(), covariance_from_string(l.at("covariance").get<std::string>())});
    const auto& rd = sj.at("re_distribution");
    s.re_dist.kind = rd.at("kind").get<std::string>() == "t" ? REDistKind::student_t : REDistKind::gaussian;
    s.re_dist.dof = rd.at("dof").get<double>();
    const auto& ij = sj.at("integration");
    s.integration.method = int_method_from_string(ij.at("method").get<std::string>());
    s.integration.points = ij.at("points").get<int>();
    s.integration.adapt_iterations = ij.at("adapt_iterations").get<int>();
    s.integration.adapt_tolerance = ij.at("adapt_tolerance").get<double>();
    s.integration.seed = ij.at("seed").get<std::uint64_t>();
    s.orthogonalize = sj.at("orthogonalize").get<bool>();
    s.orthogonalize_tvc = sj.at("orthogonalize_tvc").get<bool>();

    std::optional<SplineBasis> baseline;
    if (j.contains("baseline")) baseline = detail::basis_from(j.at("baseline"));
    std::vector<SplineBasis> tvc;
    for (const auto& b : j.at("tvc_bases")) tvc.push_back(detail::basis_from(b));
    if (tvc.size() != s.tvc.size()) throw SchemaError("model file: tvc bases do not match the specification");
    if ((s.family == FamilyKind::rp || s.family == FamilyKind::rcs) && !baseline)
      throw SchemaError("model file: spline family without a baseline basis");

    FittedModel& f = mf.fit;
    f.model = Model::restore(s, std::move(baseline), std::move(tvc));
    const auto names = j.at("parameters").at("names").get<std::vector<std::string>>();
    if (names != f.model.layout->names) throw SchemaError("model file: parameter names do not match the specification");
    f.theta = f.model.make_theta(detail::vector_from(j.at("parameters").at("values")));
    const auto p = static_cast<Eigen::Index>(names.size());
    if (j.at("vcov").is_null()) {
      f.vcov = Eigen::MatrixXd::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
      f.vcov_ok = false;
    } else {
      const auto v = j.at("vcov").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(v.size()) != p * p) throw SchemaError("model file: vcov has wrong size");
      f.vcov.resize(p, p);
      for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index k = 0; k < p; ++k) f.vcov(i, k) = v[static_cast<std::size_t>(i * p + k)];
      f.vcov_ok = true;
    }
    f.loglik = j.at("loglik").get<double>();
    const auto& c = j.at("convergence");
    f.convergence.iterations = c.at("iterations").get<int>();
    f.convergence.gradient_max = c.at("gradient_max").get<double>();
    f.convergence.converged = c.at("converged").get<bool>();
    f.convergence.status = c.at("status").get<std::string>();
    const auto& sm = j.at("summary");
    f.n_obs = sm.at("n_obs").get<std::size_t>();
    f.n_events = sm.at("n_events").get<std::size_t>();
    f.n_clusters = sm.at("n_clusters").get<std::size_t>();
    f.time_at_risk = sm.at("time_at_risk").get<double>();
    f.warnings = j.at("warnings").get<std::vector<std::string>>();
    return mf;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model file is malformed: ") + e.what());
  }
}

}  // namespace mesurv
