#pragma once

// Derivative-free-input maximization: central-difference gradients, BFGS
// curvature seeded from a finite-difference Hessian, and a halving line search.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>

namespace mesurv {

using Objective = std::function<double(const Eigen::VectorXd&)>;

inline double gradient_step(double x) { return std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(std::abs(x), 1.0); }
inline double hessian_step(double x) {
  return std::pow(std::numeric_limits<double>::epsilon(), 0.25) * std::max(std::abs(x), 1.0);
}

// Fourth-order central differences; one-sided next to an infeasible region.
// The two-point stencil leaves a bias of order f''' h^2 that shows up for
// covariates on a large scale (age in years).
inline Eigen::VectorXd numeric_gradient(const Objective& f, const Eigen::VectorXd& x, double fx) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = gradient_step(x[i]);
    auto at = [&](double d) {
      y[i] = x[i] + d;
      const double v = f(y);
      y[i] = x[i];
      return v;
    };
    const double fp = at(h), fm = at(-h);
    const bool okp = std::isfinite(fp), okm = std::isfinite(fm);
    if (okp && okm) {
      const double fp2 = at(2.0 * h), fm2 = at(-2.0 * h);
      if (std::isfinite(fp2) && std::isfinite(fm2))
        g[i] = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h);
      else
        g[i] = (fp - fm) / (2.0 * h);
    } else if (okp) {
      g[i] = (fp - fx) / h;
    } else if (okm) {
      g[i] = (fx - fm) / h;
    } else {
      g[i] = 0.0;
    }
  }
  return g;
}

inline Eigen::MatrixXd numeric_hessian(const Objective& f, const Eigen::VectorXd& x, double fx) {
  const auto p = x.size();
  Eigen::MatrixXd h(p, p);
  Eigen::VectorXd step(p);
  for (Eigen::Index i = 0; i < p; ++i) step[i] = hessian_step(x[i]);
  Eigen::VectorXd fp(p), fm(p);
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < p; ++i) {
    y[i] = x[i] + step[i];
    fp[i] = f(y);
    y[i] = x[i] - step[i];
    fm[i] = f(y);
    y[i] = x[i];
    h(i, i) = (fp[i] - 2.0 * fx + fm[i]) / (step[i] * step[i]);
  }
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < i; ++j) {
      y = x;
      y[i] += step[i];
      y[j] += step[j];
      const double fpp = f(y);
      y[j] = x[j] - step[j];
      const double fpm = f(y);
      y[i] = x[i] - step[i];
      const double fmm = f(y);
      y[j] = x[j] + step[j];
      const double fmp = f(y);
      h(i, j) = h(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * step[i] * step[j]);
    }
  return h;
}

struct OptimOptions {
  int max_iter = 300;
  double gtol = 1e-6;   // max |gradient|
  double ltol = 1e-8;   // relative change in objective
  double nrtol = 1e-9;  // g' H^-1 g, scale free
  std::ostream* log = nullptr;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  std::string status;
};

inline void log_iteration(std::ostream* log, int k, double value, bool not_concave) {
  if (!log) return;
  char buf[96];
  std::snprintf(buf, sizeof buf, "Iteration %d:%*slog likelihood = %.8g%s\n", k, k < 10 ? 3 : 2, "", value,
                not_concave ? "  (not concave)" : "");
  *log << buf;
}

inline OptimResult maximize(const Objective& f, Eigen::VectorXd x, const OptimOptions& opt = {}) {
  OptimResult res;
  double fx = f(x);
  if (!std::isfinite(fx)) {
    res.x = x;
    res.status = "objective not finite at the starting values";
    return res;
  }
  const auto p = x.size();
  Eigen::VectorXd g = numeric_gradient(f, x, fx);
  log_iteration(opt.log, 0, fx, false);

  // inverse curvature of -f
  auto seed_curvature = [&](bool& concave) {
    const Eigen::MatrixXd h = numeric_hessian(f, x, fx);
    Eigen::LLT<Eigen::MatrixXd> llt(-h);
    concave = llt.info() == Eigen::Success && h.allFinite();
    if (concave) return Eigen::MatrixXd(llt.solve(Eigen::MatrixXd::Identity(p, p)));
    const double scale = 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff());
    return Eigen::MatrixXd(Eigen::MatrixXd::Identity(p, p) * scale);
  };
  bool concave = true;
  Eigen::MatrixXd hinv = seed_curvature(concave);

  for (int k = 1; k <= opt.max_iter; ++k) {
    Eigen::VectorXd d = hinv * g;
    bool steepest = !concave;
    if (!(g.dot(d) > 0.0)) {
      hinv = Eigen::MatrixXd::Identity(p, p) / std::max(1.0, g.cwiseAbs().maxCoeff());
      d = hinv * g;
      steepest = true;
    }
    // cap the step so one bad direction cannot leap far away
    const double dmax = d.cwiseAbs().maxCoeff();
    if (dmax > 5.0) d *= 5.0 / dmax;

    double alpha = 1.0, fnew = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd xnew, gnew;
    bool accepted = false;
    const double noise = 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(fx));
    for (int h = 0; h < 60; ++h) {
      xnew = x + alpha * d;
      fnew = f(xnew);
      if (std::isfinite(fnew) && fnew >= fx + 1e-4 * alpha * g.dot(d)) {
        accepted = true;
        break;
      }
      // near the optimum the gain can fall below rounding; judge a full
      // step by the gradient instead
      if (h == 0 && std::isfinite(fnew) && fnew >= fx - noise) {
        gnew = numeric_gradient(f, xnew, fnew);
        if (gnew.cwiseAbs().maxCoeff() < g.cwiseAbs().maxCoeff()) {
          accepted = true;
          break;
        }
        gnew.resize(0);
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      if (!steepest) {
        // retry from a fresh curvature estimate before giving up
        hinv = seed_curvature(concave);
        concave = false;
        --k;
        if (k < 0) break;
        continue;
      }
      res.status = "line search failed";
      break;
    }
    if (gnew.size() == 0) gnew = numeric_gradient(f, xnew, fnew);
    const Eigen::VectorXd s = xnew - x;
    const Eigen::VectorXd y = g - gnew;  // gradient change of -f
    const double sy = s.dot(y);
    const double rel = std::abs(fnew - fx) / (std::abs(fx) + 1e-10);
    x = xnew;
    fx = fnew;
    g = gnew;
    res.iterations = k;
    log_iteration(opt.log, k, fx, steepest);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double r = 1.0 / sy;
      const Eigen::MatrixXd i = Eigen::MatrixXd::Identity(p, p);
      hinv = (i - r * s * y.transpose()) * hinv * (i - r * y * s.transpose()) + r * s * s.transpose();
    }
    concave = true;
    if (g.cwiseAbs().maxCoeff() < opt.gtol && rel < opt.ltol) {
      res.converged = true;
      break;
    }
    if (g.cwiseAbs().maxCoeff() < opt.gtol * 1e-2) {
      res.converged = true;
      break;
    }
    if (rel < opt.ltol) {
      bool curved = false;
      hinv = seed_curvature(curved);
      if (curved && g.dot(hinv * g) < opt.nrtol) {
        res.converged = true;
        break;
      }
      // stalled: the objective no longer moves but the gradient is not small
      concave = curved;
    }
  }
  res.x = x;
  res.value = fx;
  res.gradient = g;
  if (res.converged)
    res.status = "converged";
  else if (res.status.empty())
    res.status = "iteration limit reached";
  return res;
}

}  // namespace mesurv
