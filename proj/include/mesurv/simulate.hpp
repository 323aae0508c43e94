#pragma once

// Inverse-CDF survival times from standard distributions and clustered data
// with cluster-level random effects.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mesurv/data.hpp"
#include "mesurv/error.hpp"
#include "mesurv/family.hpp"
#include "mesurv/random.hpp"

namespace mesurv {

struct SimSpec {
  FamilyKind family = FamilyKind::weibull;
  double lambda = 0.1;
  double gamma = 1.0;
  double max_time = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (family != FamilyKind::exponential && family != FamilyKind::weibull && family != FamilyKind::gompertz)
      throw ContractError("simulation supports exponential, weibull and gompertz");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw DomainError("lambda must be positive");
    if (!(max_time > 0.0) || !std::isfinite(max_time)) throw DomainError("maximum time must be positive");
    if (family == FamilyKind::weibull && !(gamma > 0.0)) throw DomainError("weibull gamma must be positive");
    if (!std::isfinite(gamma)) throw DomainError("gamma must be finite");
  }
};

struct SimulatedTime {
  double time = 0.0;
  int event = 0;
};

// Time for one uniform draw u with linear predictor offset `lp`.
inline SimulatedTime invert_survival(const SimSpec& s, double u, double lp) {
  const double rate = s.lambda * std::exp(lp);
  const double e = -std::log(u);
  double t = std::numeric_limits<double>::infinity();
  switch (s.family) {
    case FamilyKind::exponential: t = e / rate; break;
    case FamilyKind::weibull: t = std::pow(e / rate, 1.0 / s.gamma); break;
    case FamilyKind::gompertz: {
      if (s.gamma == 0.0) {
        t = e / rate;
        break;
      }
      const double arg = 1.0 + s.gamma * e / rate;
      if (arg > 0.0) t = std::log(arg) / s.gamma;
      break;
    }
    default: throw ContractError("simulation supports exponential, weibull and gompertz");
  }
  if (!(t <= s.max_time)) return {s.max_time, 0};
  return {t, 1};
}

// One draw per offset, in order, from stream 0 of the spec's seed.
inline std::vector<SimulatedTime> simulate_times(const SimSpec& s, std::span<const double> offsets) {
  s.validate();
  CounterRng rng(s.seed, 0);
  std::vector<SimulatedTime> out;
  out.reserve(offsets.size());
  for (double lp : offsets) out.push_back(invert_survival(s, rng.uniform(), lp));
  return out;
}

inline std::vector<SimulatedTime> simulate_times(const SimSpec& s, std::size_t n) {
  const std::vector<double> zero(n, 0.0);
  return simulate_times(s, zero);
}

struct ClusterDesign {
  std::size_t n_clusters = 30;
  std::size_t n_per_cluster = 100;
  std::map<std::string, double> fixed_effects;  // covariates drawn Bernoulli(0.5)
  Eigen::MatrixXd re_sigma;                     // q x q
  std::vector<std::string> re_design;           // "_cons" or a covariate name, one per random effect
};

// Each cluster uses its own random stream so clusters can be regenerated
// independently. Columns: clusterid, covariates, time, event.
inline Dataset simulate_clustered(const ClusterDesign& d, const SimSpec& s) {
  s.validate();
  const auto q = static_cast<Eigen::Index>(d.re_design.size());
  if (d.re_sigma.rows() != q || d.re_sigma.cols() != q) throw ContractError("random-effect covariance has wrong size");
  for (const auto& v : d.re_design)
    if (v != "_cons" && !d.fixed_effects.count(v)) throw ContractError("random effect on '" + v + "' needs a covariate of that name");
  Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(q, q);
  if (q > 0) {
    // semidefinite allowed: zero variances give identical clusters
    Eigen::LDLT<Eigen::MatrixXd> ldlt(d.re_sigma);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() < -1e-12).any())
      throw DomainError("random-effect covariance must be positive semidefinite");
    const Eigen::VectorXd dd = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd lm = ldlt.matrixL();
    chol = ldlt.transpositionsP().transpose() * lm * dd.asDiagonal();
  }
  std::vector<Column> cols;
  Column cid{"clusterid", ColumnRole::identifier, {}, {}};
  std::vector<Column> xs;
  for (const auto& [name, beta] : d.fixed_effects) xs.push_back(Column{name, ColumnRole::numeric, {}, {}});
  Column time{"time", ColumnRole::numeric, {}, {}}, event{"event", ColumnRole::numeric, {}, {}};
  for (std::size_t c = 0; c < d.n_clusters; ++c) {
    CounterRng rng(s.seed, c + 1);
    Eigen::VectorXd zdraw(q);
    for (Eigen::Index k = 0; k < q; ++k) zdraw[k] = rng.normal();
    const Eigen::VectorXd b = chol * zdraw;
    for (std::size_t j = 0; j < d.n_per_cluster; ++j) {
      double lp = 0.0;
      std::map<std::string, double> row;
      std::size_t k = 0;
      for (const auto& [name, beta] : d.fixed_effects) {
        const double x = rng.uniform() < 0.5 ? 1.0 : 0.0;
        row[name] = x;
        xs[k].values.push_back(x);
        xs[k++].text.push_back(detail::format17(x));
        lp += beta * x;
      }
      for (Eigen::Index r = 0; r < q; ++r) {
        const auto& v = d.re_design[static_cast<std::size_t>(r)];
        lp += b[r] * (v == "_cons" ? 1.0 : row[v]);
      }
      const SimulatedTime st = invert_survival(s, rng.uniform(), lp);
      cid.text.push_back(std::to_string(c + 1));
      time.values.push_back(st.time);
      time.text.push_back(detail::format17(st.time));
      event.values.push_back(st.event);
      event.text.push_back(std::to_string(st.event));
    }
  }
  cols.push_back(std::move(cid));
  for (auto& x : xs) cols.push_back(std::move(x));
  cols.push_back(std::move(time));
  cols.push_back(std::move(event));
  return Dataset::from_columns(std::move(cols));
}

// Weibull-family survival S(t) = exp(-lambda e^lp t^gamma) and friends.
inline double sim_survival(const SimSpec& s, double t, double lp = 0.0) {
  const double rate = s.lambda * std::exp(lp);
  switch (s.family) {
    case FamilyKind::exponential: return std::exp(-rate * t);
    case FamilyKind::weibull: return std::exp(-rate * std::pow(t, s.gamma));
    case FamilyKind::gompertz:
      return std::exp(-rate * (s.gamma == 0.0 ? t : std::expm1(s.gamma * t) / s.gamma));
    default: break;
  }
  throw ContractError("simulation supports exponential, weibull and gompertz");
}

}  // namespace mesurv
