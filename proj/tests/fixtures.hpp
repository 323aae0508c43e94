#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mesurv/mesurv.hpp"

namespace fixtures {

inline std::string data_path(const std::string& name) { return std::string(MESURV_DATA_DIR) + "/" + name; }

inline mesurv::ColumnSchema catheter_schema() {
  using mesurv::ColumnRole;
  return {{"patient", ColumnRole::identifier},
          {"time", ColumnRole::numeric},
          {"infect", ColumnRole::numeric},
          {"age", ColumnRole::numeric},
          {"female", ColumnRole::numeric}};
}

inline mesurv::Dataset catheter() {
  std::ifstream in(data_path("catheter.csv"));
  return mesurv::declare_survival(mesurv::load_csv(in, catheter_schema()), "time", "infect");
}

inline mesurv::ModelSpec catheter_spec(bool tvc = false) {
  mesurv::ModelSpec s;
  s.family = mesurv::FamilyKind::rp;
  s.df = 3;
  s.fixed = {"age", "female"};
  if (tvc) s.tvc.push_back(mesurv::TvcSpec{"female", 1, {}});
  s.levels.push_back(mesurv::RELevelSpec{"patient", {}, true, mesurv::CovarianceKind::diagonal});
  return s;
}

inline mesurv::Dataset from_text(const std::string& csv, const mesurv::ColumnSchema& schema) {
  std::istringstream in(csv);
  return mesurv::load_csv(in, schema);
}

// Three clusters of exponential survival data with a binary covariate.
struct ToyRow {
  int cluster;
  double time, event, x, entry, rate;
};

inline std::vector<ToyRow> toy_rows(bool with_entry = false, bool with_rate = false) {
  const double times[] = {0.5, 1.2, 2.0, 0.3, 0.9, 1.7, 2.5, 0.8, 1.1, 3.0};
  const int events[] = {1, 1, 0, 1, 1, 1, 0, 1, 0, 1};
  const int xs[] = {0, 1, 1, 0, 1, 0, 1, 0, 0, 1};
  const int cid[] = {1, 1, 1, 2, 2, 2, 2, 3, 3, 3};
  std::vector<ToyRow> out;
  for (int i = 0; i < 10; ++i)
    out.push_back({cid[i], times[i], double(events[i]), double(xs[i]), with_entry ? 0.1 * (i % 3) : 0.0,
                   with_rate ? 0.05 : 0.0});
  return out;
}

inline mesurv::ColumnSchema toy_schema() {
  using mesurv::ColumnRole;
  return {{"cid", ColumnRole::identifier}, {"time", ColumnRole::numeric}, {"event", ColumnRole::numeric},
          {"x", ColumnRole::numeric},      {"t0", ColumnRole::numeric},   {"rate", ColumnRole::numeric}};
}

inline std::string toy_csv(const std::vector<ToyRow>& rows) {
  std::ostringstream csv;
  csv.precision(17);
  csv << "cid,time,event,x,t0,rate\n";
  for (const auto& r : rows)
    csv << r.cluster << ',' << r.time << ',' << r.event << ',' << r.x << ',' << r.entry << ',' << r.rate << '\n';
  return csv.str();
}

inline mesurv::Dataset toy(bool with_entry = false, bool with_rate = false) {
  return from_text(toy_csv(toy_rows(with_entry, with_rate)), toy_schema());
}

inline mesurv::Dataset declared(const mesurv::Dataset& d, bool entry = false, bool rate = false) {
  return mesurv::declare_survival(d, "time", "event", entry ? std::optional<std::string>("t0") : std::nullopt,
                                  rate ? std::optional<std::string>("rate") : std::nullopt);
}

inline mesurv::ModelSpec toy_spec(mesurv::FamilyKind family = mesurv::FamilyKind::exponential) {
  mesurv::ModelSpec s;
  s.family = family;
  s.fixed = {"x"};
  s.levels.push_back(mesurv::RELevelSpec{"cid", {}, true, mesurv::CovarianceKind::diagonal});
  return s;
}

// Trapezoid rule on [lo, hi] with n points.
template <class F>
double trapezoid(F f, double lo, double hi, int n) {
  const double h = (hi - lo) / (n - 1);
  double s = 0.5 * (f(lo) + f(hi));
  for (int i = 1; i < n - 1; ++i) s += f(lo + i * h);
  return s * h;
}


// Brute-force marginal log-likelihood of an exponential frailty model,
// integrating each cluster over b on [-8 sd, 8 sd] by the trapezoid rule.
inline double brute_force_loglik(const std::vector<ToyRow>& rows, double beta, double cons, double sd, int n = 20001) {
  std::vector<int> ids;
  for (const auto& r : rows)
    if (std::find(ids.begin(), ids.end(), r.cluster) == ids.end()) ids.push_back(r.cluster);
  double total = 0.0;
  for (int id : ids) {
    auto num = [&](double b) {
      double l = -0.5 * (b / sd) * (b / sd) - std::log(sd * std::sqrt(2.0 * std::numbers::pi));
      for (const auto& r : rows) {
        if (r.cluster != id) continue;
        const double h = std::exp(cons + beta * r.x + b);
        l += (r.event != 0.0 ? std::log(h + r.rate) : 0.0) - h * r.time;
      }
      return std::exp(l);
    };
    auto den = [&](double b) {
      double l = -0.5 * (b / sd) * (b / sd) - std::log(sd * std::sqrt(2.0 * std::numbers::pi));
      for (const auto& r : rows)
        if (r.cluster == id) l -= std::exp(cons + beta * r.x + b) * r.entry;
      return std::exp(l);
    };
    total += std::log(trapezoid(num, -8.0 * sd, 8.0 * sd, n)) - std::log(trapezoid(den, -8.0 * sd, 8.0 * sd, n));
  }
  return total;
}

}  // namespace fixtures
