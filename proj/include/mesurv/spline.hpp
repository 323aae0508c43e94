#pragma once

// Restricted cubic splines of log time.
//
// Basis convention: v_1(x) = x and, for each interior knot k_j,
//   v_j(x) = (x-k_j)^3_+ - lambda_j (x-k_min)^3_+ - (1-lambda_j)(x-k_max)^3_+
// with lambda_j = (k_max-k_j)/(k_max-k_min). The curve is linear outside
// [k_min, k_max] and C2 everywhere.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mesurv/error.hpp"

namespace mesurv {

struct KnotVector {
  // All knots on the log-time scale: boundary_low, interior..., boundary_high.
  std::vector<double> knots;

  double boundary_low() const { return knots.front(); }
  double boundary_high() const { return knots.back(); }
  std::span<const double> interior() const { return {knots.data() + 1, knots.size() - 2}; }
  int df() const { return static_cast<int>(knots.size()) - 1; }

  void validate() const {
    if (knots.size() < 2) throw ContractError("knot vector needs two boundary knots");
    for (std::size_t i = 1; i < knots.size(); ++i)
      if (!(knots[i] > knots[i - 1])) throw ContractError("knots must be strictly ascending");
  }
};

// Boundary knots at the extremes of the uncensored log times, df-1 interior
// knots at the nearest-rank centiles 100k/df. Tied knot values are collapsed,
// which lowers the degrees of freedom; a note is appended to `warnings`.
inline KnotVector place_default_knots(std::span<const double> event_log_times, int df,
                                      std::vector<std::string>* warnings = nullptr) {
  if (df < 1 || df > 10) throw RangeError("df must be between 1 and 10");
  if (event_log_times.empty()) throw ContractError("knot placement needs at least one uncensored time");
  std::vector<double> s(event_log_times.begin(), event_log_times.end());
  std::sort(s.begin(), s.end());
  const auto n = static_cast<long>(s.size());
  KnotVector k;
  k.knots.push_back(s.front());
  for (long j = 1; j < df; ++j) {
    const long rank = (j * n + df - 1) / df;  // ceil(j n / df), 1-based
    k.knots.push_back(s[static_cast<std::size_t>(std::max(rank, 1L) - 1)]);
  }
  k.knots.push_back(s.back());
  const auto before = k.knots.size();
  k.knots.erase(std::unique(k.knots.begin(), k.knots.end()), k.knots.end());
  if (k.knots.size() < 2) throw ContractError("uncensored times are all equal; cannot place boundary knots");
  if (k.knots.size() != before && warnings)
    warnings->push_back("tied knot locations collapsed; df reduced from " + std::to_string(df) + " to " +
                        std::to_string(k.df()));
  return k;
}

// User-supplied interior knots on the time scale; boundaries from the data.
inline KnotVector knots_from_times(std::span<const double> event_log_times, std::span<const double> interior_times) {
  if (event_log_times.empty()) throw ContractError("knot placement needs at least one uncensored time");
  const auto [lo, hi] = std::minmax_element(event_log_times.begin(), event_log_times.end());
  KnotVector k;
  k.knots.push_back(*lo);
  std::vector<double> in;
  for (double t : interior_times) {
    if (!(t > 0.0)) throw RangeError("knot locations must be positive times");
    in.push_back(std::log(t));
  }
  std::sort(in.begin(), in.end());
  for (double x : in) {
    if (!(x > *lo && x < *hi)) throw RangeError("interior knots must lie strictly inside the range of uncensored times");
    k.knots.push_back(x);
  }
  k.knots.push_back(*hi);
  k.validate();
  return k;
}

namespace detail {
inline double pos3(double u) { return u > 0.0 ? u * u * u : 0.0; }
inline double pos2(double u) { return u > 0.0 ? u * u : 0.0; }
inline double pos1(double u) { return u > 0.0 ? u : 0.0; }
}  // namespace detail

inline Eigen::VectorXd rcs_eval(double x, const KnotVector& k) {
  const int df = k.df();
  Eigen::VectorXd v(df);
  v[0] = x;
  const double lo = k.boundary_low(), hi = k.boundary_high();
  for (int j = 1; j < df; ++j) {
    const double kj = k.knots[static_cast<std::size_t>(j)];
    const double lam = (hi - kj) / (hi - lo);
    v[j] = detail::pos3(x - kj) - lam * detail::pos3(x - lo) - (1.0 - lam) * detail::pos3(x - hi);
  }
  return v;
}

inline Eigen::VectorXd rcs_deriv(double x, const KnotVector& k) {
  const int df = k.df();
  Eigen::VectorXd v(df);
  v[0] = 1.0;
  const double lo = k.boundary_low(), hi = k.boundary_high();
  for (int j = 1; j < df; ++j) {
    const double kj = k.knots[static_cast<std::size_t>(j)];
    const double lam = (hi - kj) / (hi - lo);
    v[j] = 3.0 * (detail::pos2(x - kj) - lam * detail::pos2(x - lo) - (1.0 - lam) * detail::pos2(x - hi));
  }
  return v;
}

inline Eigen::VectorXd rcs_deriv2(double x, const KnotVector& k) {
  const int df = k.df();
  Eigen::VectorXd v(df);
  v[0] = 0.0;
  const double lo = k.boundary_low(), hi = k.boundary_high();
  for (int j = 1; j < df; ++j) {
    const double kj = k.knots[static_cast<std::size_t>(j)];
    const double lam = (hi - kj) / (hi - lo);
    v[j] = 6.0 * (detail::pos1(x - kj) - lam * detail::pos1(x - lo) - (1.0 - lam) * detail::pos1(x - hi));
  }
  return v;
}

// A knot vector plus an optional affine orthogonalization fitted on a sample:
//   w(x) = R^{-T} (v(x) - center)
// where R is the upper Cholesky factor of the sample covariance of v. Over the
// fitting sample the columns of w have zero mean and identity covariance.
class SplineBasis {
 public:
  SplineBasis() = default;

  SplineBasis(KnotVector knots, Eigen::VectorXd center, Eigen::MatrixXd r)
      : knots_(std::move(knots)), orthogonal_(true), center_(std::move(center)), r_(std::move(r)) {}

  explicit SplineBasis(KnotVector knots) : knots_(std::move(knots)) {}

  static SplineBasis fit(KnotVector knots, std::span<const double> sample_x, bool orthogonalize) {
    knots.validate();
    if (!orthogonalize) return SplineBasis(std::move(knots));
    const auto n = static_cast<Eigen::Index>(sample_x.size());
    const int df = knots.df();
    if (n < 2) throw ContractError("orthogonalization needs at least two observations");
    Eigen::MatrixXd v(n, df);
    for (Eigen::Index i = 0; i < n; ++i) v.row(i) = rcs_eval(sample_x[static_cast<std::size_t>(i)], knots).transpose();
    Eigen::VectorXd center = v.colwise().mean().transpose();
    v.rowwise() -= center.transpose();
    const Eigen::MatrixXd cov = (v.transpose() * v) / static_cast<double>(n - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw ContractError("spline basis is rank deficient over the sample");
    return SplineBasis(std::move(knots), std::move(center), llt.matrixU());
  }

  const KnotVector& knots() const noexcept { return knots_; }
  int df() const { return knots_.df(); }
  bool orthogonalized() const noexcept { return orthogonal_; }
  const Eigen::VectorXd& center() const noexcept { return center_; }
  const Eigen::MatrixXd& transform() const noexcept { return r_; }

  Eigen::VectorXd value(double x) const {
    Eigen::VectorXd v = rcs_eval(x, knots_);
    if (!orthogonal_) return v;
    v -= center_;
    return r_.transpose().triangularView<Eigen::Lower>().solve(v);
  }

  Eigen::VectorXd deriv(double x) const {
    Eigen::VectorXd v = rcs_deriv(x, knots_);
    if (!orthogonal_) return v;
    return r_.transpose().triangularView<Eigen::Lower>().solve(v);
  }

 private:
  KnotVector knots_;
  bool orthogonal_ = false;
  Eigen::VectorXd center_;
  Eigen::MatrixXd r_;
};

}  // namespace mesurv
