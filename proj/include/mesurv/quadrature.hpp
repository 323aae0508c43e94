#pragma once

// Quadrature rules for the random-effect integrals and for integrals over time.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mesurv/error.hpp"
#include "mesurv/random.hpp"

namespace mesurv {

enum class IntMethod { mvaghermite, ghermite, mcarlo };

enum class REDistKind { gaussian, student_t };

struct REDistribution {
  REDistKind kind = REDistKind::gaussian;
  double dof = 0.0;  // student_t only; must exceed 2

  void validate() const {
    if (kind == REDistKind::student_t && !(dof > 2.0))
      throw DomainError("t-distributed random effects need degrees of freedom > 2");
  }
};

struct IntegrationSettings {
  IntMethod method = IntMethod::mvaghermite;
  int points = 7;
  int adapt_iterations = 1001;
  double adapt_tolerance = 1e-8;
  bool mean_variance = true;  // refine mode/curvature to posterior mean/variance
  std::uint64_t seed = 0;

  static int default_points(IntMethod m) { return m == IntMethod::mcarlo ? 150 : 7; }
};

/// Points in columns; weights kept on the log scale. A rule either targets an
/// expectation under a reference measure (standard normal, uniform draws) or,
/// once mapped to random-effect space, a plain integral over b.
struct NodeSet {
  Eigen::MatrixXd nodes;  // dimension x points
  Eigen::VectorXd log_weights;

  Eigen::Index dim() const { return nodes.rows(); }
  Eigen::Index size() const { return nodes.cols(); }
};

namespace detail {
inline constexpr double log_sqrt_2pi = 0.91893853320467274178;

// Golub-Welsch on a symmetric tridiagonal Jacobi matrix with zero diagonal.
inline NodeSet golub_welsch(int n, const std::function<double(int)>& offdiag, double mu0) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) j(k, k - 1) = j(k - 1, k) = offdiag(k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  NodeSet out;
  out.nodes.resize(1, n);
  out.log_weights.resize(n);
  for (int i = 0; i < n; ++i) {
    out.nodes(0, i) = es.eigenvalues()[i];
    const double v0 = es.eigenvectors()(0, i);
    out.log_weights[i] = std::log(mu0 * v0 * v0);
  }
  // exact symmetry about 0
  for (int i = 0; i < n / 2; ++i) {
    const double x = 0.5 * (out.nodes(0, n - 1 - i) - out.nodes(0, i));
    const double lw = 0.5 * (out.log_weights[i] + out.log_weights[n - 1 - i]);
    out.nodes(0, i) = -x;
    out.nodes(0, n - 1 - i) = x;
    out.log_weights[i] = out.log_weights[n - 1 - i] = lw;
  }
  if (n % 2 == 1) out.nodes(0, n / 2) = 0.0;
  return out;
}
}  // namespace detail

namespace detail {
// Orthonormal Hermite recurrence at x: p_n(x), p_{n-1}(x) and log sum_{k<n} p_k^2,
// rescaled as it goes so large nodes do not overflow.
struct HermiteEval {
  double pn, pn1, log_christoffel;
};

inline HermiteEval hermite_eval(int n, double x) {
  double prev = 0.0, cur = 1.0, sum = 0.0, log_scale = 0.0;
  for (int k = 0; k < n; ++k) {
    sum += cur * cur;
    const double next = (x * cur - std::sqrt(static_cast<double>(k)) * prev) / std::sqrt(k + 1.0);
    prev = cur;
    cur = next;
    if (std::abs(cur) > 1e150) {
      prev *= 1e-150;
      cur *= 1e-150;
      sum *= 1e-300;
      log_scale += 150.0 * std::log(10.0);
    }
  }
  return {cur, prev, std::log(sum) + 2.0 * log_scale};
}
}  // namespace detail

/// Rule for E[f(Z)], Z ~ N(0,1), exact for polynomials of degree <= 2n-1.
inline NodeSet gauss_hermite(int n) {
  if (n < 1 || n > 200) throw RangeError("Gauss-Hermite points must be between 1 and 200");
  NodeSet r = detail::golub_welsch(n, [](int k) { return std::sqrt(static_cast<double>(k)); }, 1.0);
  // Newton polish of the eigenvalues, then Christoffel weights 1 / sum p_k(x)^2
  for (int i = n / 2; i < n; ++i) {
    double x = r.nodes(0, i);
    if (x != 0.0)
      for (int it = 0; it < 3; ++it) {
        const auto e = detail::hermite_eval(n, x);
        x -= e.pn / (std::sqrt(static_cast<double>(n)) * e.pn1);
      }
    const double lw = -detail::hermite_eval(n, x).log_christoffel;
    r.nodes(0, i) = x;
    r.nodes(0, n - 1 - i) = -x;
    r.log_weights[i] = r.log_weights[n - 1 - i] = lw;
  }
  return r;
}

inline NodeSet tensor_nodes(const NodeSet& base, int q) {
  if (q < 1) throw RangeError("dimension must be positive");
  const auto n = base.size();
  const double total = std::pow(static_cast<double>(n), q);
  if (total > 1e7)
    throw ResourceError("tensor grid of " + std::to_string(static_cast<long long>(total)) +
                        " points is too large; use intmethod mcarlo");
  const auto m = static_cast<Eigen::Index>(total);
  NodeSet out;
  out.nodes.resize(q, m);
  out.log_weights.setZero(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    Eigen::Index rem = k;
    for (int d = q - 1; d >= 0; --d) {
      const Eigen::Index i = rem % n;
      rem /= n;
      out.nodes(d, k) = base.nodes(0, i);
      out.log_weights[k] += base.log_weights[i];
    }
  }
  return out;
}

/// Standard Legendre rule mapped to [a,b].
inline NodeSet gauss_legendre(int n, double a, double b) {
  if (n < 1) throw RangeError("Gauss-Legendre points must be positive");
  if (!(a < b)) throw RangeError("Gauss-Legendre interval must satisfy a < b");
  NodeSet r = detail::golub_welsch(
      n, [](int k) { return k / std::sqrt(4.0 * k * k - 1.0); }, 2.0);
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  r.nodes = (r.nodes.array() * half + mid).matrix();
  r.log_weights.array() += std::log(half);
  return r;
}

/// Lightweight cached [0,1] Legendre rule for repeated integrals over (0, t].
struct LegendreRule {
  std::vector<double> x;  // on (0,1)
  std::vector<double> w;

  explicit LegendreRule(int n = 30) {
    const NodeSet s = gauss_legendre(n, 0.0, 1.0);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      x.push_back(s.nodes(0, i));
      w.push_back(std::exp(s.log_weights[i]));
    }
  }
};

namespace detail {
inline int nth_prime(int k) {
  static const int primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
  return primes[k];
}

inline double radical_inverse(std::uint64_t i, int base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= base;
    r += f * static_cast<double>(i % static_cast<std::uint64_t>(base));
    i /= static_cast<std::uint64_t>(base);
  }
  return r;
}
}  // namespace detail

/// Halton point i (1-based) in base `base`.
inline double halton(std::uint64_t i, int base) { return detail::radical_inverse(i, base); }

/// Monte-Carlo draws with equal weights 1/n, on the standard scale (identity
/// covariance). Gaussian: Halton sequences in the first q prime bases after
/// skipping 20 points, mapped through the normal quantile. Student t:
/// antithetic pseudo-random pairs (x, -x), scaled to unit covariance.
inline NodeSet mc_draws(int q, int n, const REDistribution& dist, std::uint64_t seed) {
  if (n < 2) throw RangeError("Monte-Carlo integration needs at least 2 points");
  if (q < 1) throw RangeError("dimension must be positive");
  if (q > 20) throw RangeError("Halton draws support at most 20 dimensions");
  dist.validate();
  NodeSet out;
  out.nodes.resize(q, n);
  out.log_weights = Eigen::VectorXd::Constant(n, -std::log(static_cast<double>(n)));
  static const boost::math::normal_distribution<double> std_normal;
  if (dist.kind == REDistKind::gaussian) {
    for (int k = 0; k < n; ++k)
      for (int d = 0; d < q; ++d)
        out.nodes(d, k) = boost::math::quantile(std_normal, halton(static_cast<std::uint64_t>(k) + 21, detail::nth_prime(d)));
    return out;
  }
  CounterRng rng(seed, 0x7d15);
  const double scale = std::sqrt((dist.dof - 2.0) / dist.dof);
  for (int k = 0; k < n; k += 2) {
    Eigen::VectorXd z(q);
    for (int d = 0; d < q; ++d) z[d] = rng.normal();
    const double w = rng.chi_squared(dist.dof);
    z *= scale * std::sqrt(dist.dof / w);
    out.nodes.col(k) = z;
    if (k + 1 < n) out.nodes.col(k + 1) = -z;
  }
  return out;
}

/// Maps a standard-normal rule to b = shift + L z, returning weights for a
/// plain integral over b: log w + log|L| - log phi(z).
inline NodeSet to_integral_rule(const NodeSet& standard, const Eigen::MatrixXd& chol_lower, const Eigen::VectorXd& shift) {
  NodeSet out;
  const auto q = standard.dim();
  out.nodes = chol_lower * standard.nodes;
  out.nodes.colwise() += shift;
  const double log_det = chol_lower.diagonal().array().abs().log().sum();
  out.log_weights.resize(standard.size());
  for (Eigen::Index k = 0; k < standard.size(); ++k) {
    const double log_phi = -0.5 * standard.nodes.col(k).squaredNorm() - static_cast<double>(q) * detail::log_sqrt_2pi;
    out.log_weights[k] = standard.log_weights[k] + log_det - log_phi;
  }
  return out;
}

/// Log integrand with first and second derivatives at a point.
struct LogIntegrandEval {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

using LogIntegrand = std::function<LogIntegrandEval(const Eigen::VectorXd&)>;

struct AdaptResult {
  NodeSet nodes;  // integral rule over b
  bool adapted = false;
  Eigen::VectorXd mode;
  Eigen::MatrixXd chol;  // L with L L^T = (-Hessian)^{-1} at the mode
  int iterations = 0;
  std::string warning;
};

/// Mean-variance adaptation: Newton iterations locate the mode b of the full
/// log integrand (data plus prior) and its curvature H, then the standard
/// nodes are placed at b + L z with L L^T = (-H)^{-1}. If Newton fails the
/// rule falls back to the prior scaling `fallback_chol` with a warning.
inline AdaptResult adapt_cluster(const NodeSet& standard, const LogIntegrand& integrand,
                                 const Eigen::MatrixXd& fallback_chol, const IntegrationSettings& settings,
                                 const Eigen::VectorXd* start = nullptr) {
  const auto q = standard.dim();
  AdaptResult res;
  Eigen::VectorXd b = start ? *start : Eigen::VectorXd::Zero(q);
  auto fail = [&](const std::string& why) {
    res.adapted = false;
    res.warning = "adaptive quadrature did not converge (" + why + "); using non-adaptive nodes";
    res.nodes = to_integral_rule(standard, fallback_chol, Eigen::VectorXd::Zero(q));
    return res;
  };
  LogIntegrandEval cur = integrand(b);
  if (!std::isfinite(cur.value)) return fail("integrand not finite at start");
  bool converged = false;
  int it = 0;
  for (; it < settings.adapt_iterations; ++it) {
    Eigen::LLT<Eigen::MatrixXd> llt(-cur.hess);
    Eigen::VectorXd step;
    if (llt.info() == Eigen::Success) {
      step = llt.solve(cur.grad);
    } else {
      // not concave here: gradient ascent with a unit-ish scale
      step = cur.grad / std::max(1.0, cur.hess.cwiseAbs().maxCoeff());
    }
    double scale = 1.0;
    LogIntegrandEval next;
    Eigen::VectorXd trial;
    int halvings = 0;
    for (;; ++halvings) {
      trial = b + scale * step;
      next = integrand(trial);
      if (std::isfinite(next.value) && next.value >= cur.value - 1e-12 * std::abs(cur.value)) break;
      if (halvings >= 40) return fail("line search failed");
      scale *= 0.5;
    }
    const double change = (trial - b).cwiseAbs().maxCoeff();
    b = trial;
    cur = std::move(next);
    if (change < settings.adapt_tolerance) {
      converged = true;
      ++it;
      break;
    }
  }
  res.iterations = it;
  if (!converged) return fail("iteration limit reached");
  Eigen::LLT<Eigen::MatrixXd> llt(-cur.hess);
  if (llt.info() != Eigen::Success) return fail("curvature not negative definite at the mode");
  // (-H) = M M^T  =>  (-H)^{-1} = M^{-T} M^{-1}, so L = M^{-T}
  const Eigen::MatrixXd m = llt.matrixL();
  Eigen::MatrixXd l = m.transpose().triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(q, q));
  res.mode = b;
  if (settings.mean_variance) {
    // Refine to the posterior mean and variance computed with the rule
    // itself, starting from the mode and curvature.
    Eigen::VectorXd mu = b;
    for (int k = 0; k < settings.adapt_iterations; ++k) {
      const NodeSet r = to_integral_rule(standard, l, mu);
      Eigen::VectorXd lw(r.size());
      for (Eigen::Index i = 0; i < r.size(); ++i) lw[i] = r.log_weights[i] + integrand(r.nodes.col(i)).value;
      const double top = lw.maxCoeff();
      if (!std::isfinite(top)) break;
      const Eigen::VectorXd w = (lw.array() - top).exp().matrix();
      const double total = w.sum();
      const Eigen::VectorXd mean = r.nodes * w / total;
      const Eigen::MatrixXd centred = r.nodes.colwise() - mean;
      const Eigen::MatrixXd var = centred * w.asDiagonal() * centred.transpose() / total;
      Eigen::LLT<Eigen::MatrixXd> vl(var);
      if (vl.info() != Eigen::Success) break;
      const Eigen::MatrixXd lnew = vl.matrixL();
      const double change = std::max((mean - mu).cwiseAbs().maxCoeff(), (lnew - l).cwiseAbs().maxCoeff());
      mu = mean;
      l = lnew;
      if (change < settings.adapt_tolerance) break;
    }
    b = mu;
  }
  res.nodes = to_integral_rule(standard, l, b);
  res.adapted = true;
  res.chol = std::move(l);
  return res;
}

}  // namespace mesurv
