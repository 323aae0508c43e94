#pragma once

// fit / predict / simulate subcommands. run_cli returns the process exit code:
// 0 success, 2 usage or contract error, 3 non-convergence.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/estimation.hpp"
#include "mesurv/model.hpp"
#include "mesurv/model_file.hpp"
#include "mesurv/prediction.hpp"
#include "mesurv/simulate.hpp"

namespace mesurv::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 2;
inline constexpr int exit_nonconvergence = 3;

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',' || ch == ' ' || ch == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline double to_number(const std::string& s, const std::string& what) {
  auto v = mesurv::detail::parse_double(s);
  if (!v) throw ContractError("invalid number '" + s + "' for " + what);
  return *v;
}

// "var=value,var=value"
inline std::map<std::string, double> parse_assignments(const std::string& s, const std::string& what) {
  std::map<std::string, double> out;
  for (const auto& item : split_list(s)) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ContractError("expected var=value in " + what + ", got '" + item + "'");
    out[item.substr(0, eq)] = to_number(item.substr(eq + 1), what);
  }
  return out;
}

// "level: vars [noconstant]"
inline RELevelSpec parse_re(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ContractError("random-effect equation must look like 'level: vars', got '" + s + "'");
  RELevelSpec r;
  r.level = std::string(mesurv::detail::trim(s.substr(0, colon)));
  if (r.level.empty()) throw ContractError("random-effect equation has no level name");
  for (const auto& v : split_list(s.substr(colon + 1))) {
    if (v == "noconstant" || v == "nocons")
      r.constant = false;
    else
      r.vars.push_back(v);
  }
  if (r.dim() == 0) throw ContractError("random-effect equation for '" + r.level + "' has no terms");
  return r;
}

inline std::vector<double> parse_numbers(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& v : split_list(s)) out.push_back(to_number(v, what));
  return out;
}

// start:stop:step, inclusive of stop up to rounding
inline std::vector<double> parse_grid(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string p;
  while (std::getline(ss, p, ':')) parts.push_back(p);
  if (parts.size() != 3) throw ContractError("--times must be start:stop:step");
  const double a = to_number(parts[0], "--times"), b = to_number(parts[1], "--times"), h = to_number(parts[2], "--times");
  if (!(h > 0.0) || !(b >= a)) throw ContractError("--times needs step > 0 and stop >= start");
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((b - a) / h + 1e-9));
  for (long k = 0; k <= n; ++k) out.push_back(a + static_cast<double>(k) * h);
  return out;
}

inline Dataset read_csv_file(const std::string& path, const ColumnSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open '" + path + "'");
  return load_csv(in, schema);
}

inline unsigned resolve_threads(unsigned t) { return t ? t : std::max(1u, std::thread::hardware_concurrency()); }

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct FitArgs {
  std::string data, time, event, entry, bhazard, fixed, distribution = "rp", knots, tvc, knotstvc, intmethod = "mvaghermite",
                                                    redist = "gaussian", out;
  std::vector<std::string> re, covariance;
  int df = 3, dftvc = 1, intpoints = 0, iterate = 300;
  double tdf = 0.0, level = 95.0;
  bool zeros = false, no_orthog = false;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct PredictArgs {
  std::string model, kind, at, timevar, times, data, out;
  bool fixedonly = false, marginal = false, ci = false;
  double level = 95.0;
  unsigned threads = 0;
};

struct SimulateArgs {
  std::size_t clusters = 30, per_cluster = 100;
  std::string dist = "weibull", beta, re_var, out;
  double lambda = 0.1, gamma = 1.0, re_sd = 0.0, maxt = 5.0;
  std::uint64_t seed = 0;
};

inline int cmd_fit(const FitArgs& a, std::ostream& out) {
  ModelSpec spec;
  spec.family = family_from_string(a.distribution);
  if (spec.family == FamilyKind::user) throw ContractError("user families are only available through the library");
  spec.df = a.df;
  if (!a.knots.empty()) spec.knots = detail::parse_numbers(a.knots, "--knots");
  spec.fixed = detail::split_list(a.fixed);
  for (const auto& v : detail::split_list(a.tvc)) {
    TvcSpec t;
    t.var = v;
    t.df = a.dftvc;
    if (!a.knotstvc.empty()) t.knots = detail::parse_numbers(a.knotstvc, "--knotstvc");
    spec.tvc.push_back(t);
  }
  for (const auto& r : a.re) spec.levels.push_back(detail::parse_re(r));
  if (!a.covariance.empty()) {
    if (a.covariance.size() != 1 && a.covariance.size() != spec.levels.size())
      throw ContractError("give one --covariance for all levels or one per --re");
    for (std::size_t l = 0; l < spec.levels.size(); ++l)
      spec.levels[l].covariance = covariance_from_string(a.covariance.size() == 1 ? a.covariance[0] : a.covariance[l]);
  }
  spec.integration.method = int_method_from_string(a.intmethod);
  spec.integration.points = a.intpoints ? a.intpoints : IntegrationSettings::default_points(spec.integration.method);
  spec.integration.seed = a.seed;
  if (a.redist == "t") {
    spec.re_dist.kind = REDistKind::student_t;
    spec.re_dist.dof = a.tdf;
  } else if (a.redist != "gaussian") {
    throw ContractError("unknown random-effect distribution '" + a.redist + "'");
  }
  spec.orthogonalize = !a.no_orthog;
  if (!(a.level > 0.0 && a.level < 100.0)) throw RangeError("level must be between 0 and 100");

  ColumnSchema schema;
  auto num = [&](const std::string& c) { schema[c] = ColumnRole::numeric; };
  num(a.time);
  num(a.event);
  if (!a.entry.empty()) num(a.entry);
  if (!a.bhazard.empty()) num(a.bhazard);
  for (const auto& v : spec.fixed) num(v);
  for (const auto& l : spec.levels)
    for (const auto& v : l.vars) num(v);
  for (const auto& l : spec.levels) {
    if (schema.count(l.level)) throw ContractError("level '" + l.level + "' is also used as a covariate");
    schema[l.level] = ColumnRole::identifier;
  }
  Dataset raw = detail::read_csv_file(a.data, schema);
  std::optional<std::string> entry, rate;
  if (!a.entry.empty()) entry = a.entry;
  if (!a.bhazard.empty()) rate = a.bhazard;
  Dataset d = declare_survival(raw, a.time, a.event, entry, rate);
  // spline df beyond the allowed range is a usage error even for other families
  if ((spec.family == FamilyKind::rp || spec.family == FamilyKind::rcs) && (spec.df < 1 || spec.df > 10))
    throw RangeError("df must be between 1 and 10");
  const Model model = Model::prepare(spec, d);

  FitOptions fo;
  fo.zeros = a.zeros;
  fo.max_iter = a.iterate;
  fo.threads = detail::resolve_threads(a.threads);
  fo.log = &out;
  const FittedModel fit = fit_model(model, d, fo);
  out << '\n';
  print_table(out, report(fit, a.level), fit);
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw ContractError("cannot write '" + a.out + "'");
    ModelFile mf{fit, OutcomeColumns{a.time, a.event, entry, rate}};
    save_model(f, mf);
  }
  return fit.convergence.converged ? exit_ok : exit_nonconvergence;
}

inline int cmd_predict(const PredictArgs& a, std::ostream& out) {
  std::ifstream mfin(a.model);
  if (!mfin) throw ContractError("cannot open model file '" + a.model + "'");
  const ModelFile mf = load_model(mfin);
  PredictionRequest req;
  req.kind = predict_kind_from_string(a.kind);
  if (!a.at.empty()) req.at = detail::parse_assignments(a.at, "--at");
  req.fixedonly = a.fixedonly;
  req.marginal = a.marginal;
  req.ci = a.ci;
  req.level = a.level;
  req.threads = detail::resolve_threads(a.threads);
  if (!a.times.empty()) req.times = detail::parse_grid(a.times);

  Dataset d;
  if (!a.data.empty()) {
    ColumnSchema schema;
    for (const auto& v : model_covariates(mf.fit.model)) schema[v] = ColumnRole::numeric;
    req.timevar = a.timevar.empty() ? mf.outcome.time : a.timevar;
    if (req.times.empty()) schema[*req.timevar] = ColumnRole::numeric;
    for (const auto& [k, v] : req.at) schema.erase(k);  // overridden columns need not exist
    d = detail::read_csv_file(a.data, schema);
  } else if (req.times.empty()) {
    throw ContractError("predict needs --data or --times");
  }
  const auto rows = predict(mf.fit, d, req);

  std::ostream* os = &out;
  std::ofstream f;
  if (!a.out.empty()) {
    f.open(a.out);
    if (!f) throw ContractError("cannot write '" + a.out + "'");
    os = &f;
  }
  const bool grid = !req.times.empty();
  *os << "rowid" << (grid ? ",time" : "") << ",estimate" << (req.ci ? ",lci,uci" : "") << '\n';
  for (const auto& r : rows) {
    *os << r.rowid;
    if (grid) *os << ',' << detail::g17(r.time);
    *os << ',' << detail::g17(r.estimate);
    if (req.ci) *os << ',' << detail::g17(r.lci) << ',' << detail::g17(r.uci);
    *os << '\n';
  }
  return exit_ok;
}

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  SimSpec s;
  s.family = family_from_string(a.dist);
  s.lambda = a.lambda;
  s.gamma = a.gamma;
  s.max_time = a.maxt;
  s.seed = a.seed;
  s.validate();
  if (!(a.re_sd >= 0.0)) throw DomainError("--re-sd must be non-negative");
  ClusterDesign cd;
  cd.n_clusters = a.clusters;
  cd.n_per_cluster = a.per_cluster;
  if (!a.beta.empty()) cd.fixed_effects = detail::parse_assignments(a.beta, "--beta");
  if (a.re_sd > 0.0) {
    std::string var = a.re_var;
    if (var.empty()) var = cd.fixed_effects.empty() ? "_cons" : cd.fixed_effects.begin()->first;
    cd.re_design = {var};
    cd.re_sigma = Eigen::MatrixXd::Constant(1, 1, a.re_sd * a.re_sd);
  } else {
    cd.re_sigma.resize(0, 0);
  }
  const Dataset d = simulate_clustered(cd, s);
  std::ostream* os = &out;
  std::ofstream f;
  if (!a.out.empty()) {
    f.open(a.out);
    if (!f) throw ContractError("cannot write '" + a.out + "'");
    os = &f;
  }
  write_csv(*os, d);
  return exit_ok;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Mixed-effects parametric survival models"};
  app.require_subcommand(1);
  FitArgs fa;
  PredictArgs pa;
  SimulateArgs sa;

  auto* fit = app.add_subcommand("fit", "fit a model and print the coefficient table");
  fit->add_option("--data", fa.data, "CSV file")->required();
  fit->add_option("--time", fa.time, "exit time column")->required();
  fit->add_option("--event", fa.event, "event indicator column")->required();
  fit->add_option("--entry", fa.entry, "entry time column (delayed entry)");
  fit->add_option("--bhazard", fa.bhazard, "expected mortality rate column (relative survival)");
  fit->add_option("--fixed", fa.fixed, "fixed-effect covariates, comma separated");
  fit->add_option("--re", fa.re, "random-effect equation \"level: vars [noconstant]\", highest level first");
  fit->add_option("--distribution", fa.distribution, "exponential|weibull|gompertz|rp|rcs");
  fit->add_option("--df", fa.df, "baseline spline degrees of freedom");
  fit->add_option("--knots", fa.knots, "baseline interior knots (time scale)");
  fit->add_option("--tvc", fa.tvc, "covariates with time-dependent effects");
  fit->add_option("--dftvc", fa.dftvc, "degrees of freedom for time-dependent effects");
  fit->add_option("--knotstvc", fa.knotstvc, "interior knots for time-dependent effects");
  fit->add_option("--covariance", fa.covariance, "diagonal|exchangeable|identity|unstructured");
  fit->add_option("--intmethod", fa.intmethod, "mvaghermite|ghermite|mcarlo");
  fit->add_option("--intpoints", fa.intpoints, "integration points");
  fit->add_option("--redist", fa.redist, "gaussian|t");
  fit->add_option("--tdf", fa.tdf, "degrees of freedom of t random effects");
  fit->add_option("--level", fa.level, "confidence level");
  fit->add_option("--iterate", fa.iterate, "maximum iterations");
  fit->add_flag("--zeros", fa.zeros, "start the full model from zeros");
  fit->add_flag("--noorthog", fa.no_orthog, "do not orthogonalize the baseline splines");
  fit->add_option("--seed", fa.seed, "seed for Monte-Carlo integration");
  fit->add_option("--threads", fa.threads, "worker threads (0: all cores)");
  fit->add_option("--out", fa.out, "model file to write");

  auto* pr = app.add_subcommand("predict", "predictions from a model file");
  pr->add_option("--model", pa.model, "model file")->required();
  pr->add_option("--kind", pa.kind, "eta|hazard|survival|chazard|cif|rmst|timelost")->required();
  pr->add_option("--at", pa.at, "covariate overrides \"var=value,...\"");
  auto* fo = pr->add_flag("--fixedonly", pa.fixedonly, "random effects set to zero");
  pr->add_flag("--marginal", pa.marginal, "average over the random-effect distribution")->excludes(fo);
  pr->add_flag("--ci", pa.ci, "delta-method confidence intervals");
  pr->add_option("--timevar", pa.timevar, "column holding prediction times");
  pr->add_option("--times", pa.times, "time grid start:stop:step");
  pr->add_option("--data", pa.data, "CSV of covariate rows");
  pr->add_option("--level", pa.level, "confidence level");
  pr->add_option("--threads", pa.threads, "worker threads (0: all cores)");
  pr->add_option("--out", pa.out, "output CSV (default: standard output)");

  auto* sim = app.add_subcommand("simulate", "simulate clustered survival data");
  sim->add_option("--clusters", sa.clusters, "number of clusters");
  sim->add_option("--per-cluster", sa.per_cluster, "rows per cluster");
  sim->add_option("--dist", sa.dist, "exponential|weibull|gompertz");
  sim->add_option("--lambda", sa.lambda, "scale");
  sim->add_option("--gamma", sa.gamma, "shape");
  sim->add_option("--beta", sa.beta, "binary covariates and log hazard ratios \"var=value,...\"");
  sim->add_option("--re-sd", sa.re_sd, "standard deviation of the cluster random effect");
  sim->add_option("--re-var", sa.re_var, "covariate the random effect multiplies (_cons for an intercept)");
  sim->add_option("--maxt", sa.maxt, "administrative censoring time");
  sim->add_option("--seed", sa.seed, "random seed");
  sim->add_option("--out", sa.out, "output CSV (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    if (auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    err << "error: " << msg << '\n';
    return exit_usage;
  }
  try {
    if (fit->parsed()) return cmd_fit(fa, out);
    if (pr->parsed()) return cmd_predict(pa, out);
    return cmd_simulate(sa, out);
  } catch (const ConvergenceError& e) {
    err << "error: " << e.what() << '\n';
    return exit_nonconvergence;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    if (auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    err << "error: " << msg << '\n';
    return exit_usage;
  }
}

}  // namespace mesurv::cli
