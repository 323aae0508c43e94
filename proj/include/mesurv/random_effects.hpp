#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mesurv/error.hpp"
#include "mesurv/quadrature.hpp"

namespace mesurv {

enum class CovarianceKind { diagonal, exchangeable, identity, unstructured };

inline std::string to_string(CovarianceKind k) {
  switch (k) {
    case CovarianceKind::diagonal: return "diagonal";
    case CovarianceKind::exchangeable: return "exchangeable";
    case CovarianceKind::identity: return "identity";
    case CovarianceKind::unstructured: return "unstructured";
  }
  return "?";
}

inline CovarianceKind covariance_from_string(const std::string& s) {
  if (s == "diagonal") return CovarianceKind::diagonal;
  if (s == "exchangeable") return CovarianceKind::exchangeable;
  if (s == "identity") return CovarianceKind::identity;
  if (s == "unstructured") return CovarianceKind::unstructured;
  throw ContractError("unknown covariance structure '" + s + "'");
}

inline int covariance_param_count(CovarianceKind kind, int q) {
  switch (kind) {
    case CovarianceKind::diagonal: return q;
    case CovarianceKind::exchangeable: return 2;
    case CovarianceKind::identity: return 1;
    case CovarianceKind::unstructured: return q * (q + 1) / 2;
  }
  return 0;
}

// Parameterization on the unconstrained scale:
//   identity      [log sd]
//   diagonal      [log sd_1 .. log sd_q]
//   exchangeable  [log sd, a]     rho = (e^{2a}-1)/(e^{2a}+q-1), in (-1/(q-1), 1)
//   unstructured  [log sd_1 .. log sd_q, atanh of canonical partial correlations]
// The partial correlations fill a lower-triangular correlation factor C row by
// row, so R = C C^T is a valid correlation matrix for any real input.
struct CovarianceStructure {
  CovarianceKind kind = CovarianceKind::diagonal;
  int q = 1;
  std::vector<double> free_params;

  int param_count() const { return covariance_param_count(kind, q); }
};

inline double exchangeable_rho(double a, int q) {
  const double e = std::exp(2.0 * a);
  return (e - 1.0) / (e + static_cast<double>(q) - 1.0);
}

inline Eigen::MatrixXd correlation_from_partials(std::span<const double> atanh_partials, int q) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(q, q);
  c(0, 0) = 1.0;
  std::size_t k = 0;
  for (int i = 1; i < q; ++i) {
    double used = 0.0;
    for (int j = 0; j < i; ++j) {
      const double z = std::tanh(atanh_partials[k++]);
      c(i, j) = z * std::sqrt(std::max(0.0, 1.0 - used));
      used += c(i, j) * c(i, j);
    }
    c(i, i) = std::sqrt(std::max(0.0, 1.0 - used));
  }
  return c * c.transpose();
}

inline Eigen::MatrixXd assemble_sigma(CovarianceKind kind, int q, std::span<const double> p) {
  if (q < 1) throw ContractError("random-effect dimension must be positive");
  if (static_cast<int>(p.size()) != covariance_param_count(kind, q))
    throw ContractError("wrong number of covariance parameters");
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(q, q);
  switch (kind) {
    case CovarianceKind::identity:
      s.diagonal().setConstant(std::exp(2.0 * p[0]));
      break;
    case CovarianceKind::diagonal:
      for (int i = 0; i < q; ++i) s(i, i) = std::exp(2.0 * p[static_cast<std::size_t>(i)]);
      break;
    case CovarianceKind::exchangeable: {
      if (q < 2) throw ContractError("exchangeable covariance needs at least two random effects");
      const double v = std::exp(2.0 * p[0]);
      const double rho = exchangeable_rho(p[1], q);
      s.setConstant(v * rho);
      s.diagonal().setConstant(v);
      break;
    }
    case CovarianceKind::unstructured: {
      Eigen::VectorXd sd(q);
      for (int i = 0; i < q; ++i) sd[i] = std::exp(p[static_cast<std::size_t>(i)]);
      const Eigen::MatrixXd r = correlation_from_partials(p.subspan(static_cast<std::size_t>(q)), q);
      s = sd.asDiagonal() * r * sd.asDiagonal();
      break;
    }
  }
  return s;
}

inline Eigen::MatrixXd assemble_sigma(const CovarianceStructure& cs) { return assemble_sigma(cs.kind, cs.q, cs.free_params); }

inline double logdensity_gaussian(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma) {
  if (b.size() != sigma.rows()) throw ContractError("dimension mismatch in random-effect density");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw Error("covariance matrix is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::VectorXd z = l.triangularView<Eigen::Lower>().solve(b);
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  return -0.5 * static_cast<double>(b.size()) * std::log(2.0 * std::numbers::pi) - 0.5 * log_det - 0.5 * z.squaredNorm();
}

// Multivariate t whose covariance (not scale) is sigma.
inline double logdensity_t(const Eigen::VectorXd& b, const Eigen::MatrixXd& sigma, double nu) {
  if (!(nu > 2.0)) throw DomainError("t density needs degrees of freedom > 2");
  if (b.size() != sigma.rows()) throw ContractError("dimension mismatch in random-effect density");
  const double q = static_cast<double>(b.size());
  const Eigen::MatrixXd scale = sigma * ((nu - 2.0) / nu);
  Eigen::LLT<Eigen::MatrixXd> llt(scale);
  if (llt.info() != Eigen::Success) throw Error("covariance matrix is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  const double m = l.triangularView<Eigen::Lower>().solve(b).squaredNorm();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  return std::lgamma(0.5 * (nu + q)) - std::lgamma(0.5 * nu) - 0.5 * q * std::log(nu * std::numbers::pi) - 0.5 * log_det -
         0.5 * (nu + q) * std::log1p(m / nu);
}

// Prior for one level's random effects with cached factorizations and
// derivatives of the log density, used by the quadrature adaptation.
class REPrior {
 public:
  REPrior() = default;
  REPrior(Eigen::MatrixXd sigma, REDistribution dist) : sigma_(std::move(sigma)), dist_(dist) {
    const auto q = sigma_.rows();
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_);
    if (llt.info() != Eigen::Success) throw Error("covariance matrix is not positive definite");
    chol_ = llt.matrixL();
    log_det_ = 2.0 * chol_.diagonal().array().log().sum();
    inv_ = llt.solve(Eigen::MatrixXd::Identity(q, q));
    if (dist_.kind == REDistKind::student_t) {
      dist_.validate();
      const double nu = dist_.dof;
      const double c = (nu - 2.0) / nu;
      scale_inv_ = inv_ / c;
      const double qd = static_cast<double>(q);
      t_const_ = std::lgamma(0.5 * (nu + qd)) - std::lgamma(0.5 * nu) - 0.5 * qd * std::log(nu * std::numbers::pi) -
                 0.5 * (log_det_ + qd * std::log(c));
    }
  }

  Eigen::Index dim() const { return sigma_.rows(); }
  const Eigen::MatrixXd& sigma() const noexcept { return sigma_; }
  const Eigen::MatrixXd& chol() const noexcept { return chol_; }
  const REDistribution& dist() const noexcept { return dist_; }

  double logpdf(const Eigen::VectorXd& b) const {
    if (dist_.kind == REDistKind::gaussian) {
      const double qd = static_cast<double>(b.size());
      return -0.5 * qd * std::log(2.0 * std::numbers::pi) - 0.5 * log_det_ - 0.5 * b.dot(inv_ * b);
    }
    const double nu = dist_.dof, qd = static_cast<double>(b.size());
    return t_const_ - 0.5 * (nu + qd) * std::log1p(b.dot(scale_inv_ * b) / nu);
  }

  // Adds the gradient and Hessian of logpdf at b.
  void add_derivatives(const Eigen::VectorXd& b, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) const {
    if (dist_.kind == REDistKind::gaussian) {
      grad.noalias() -= inv_ * b;
      hess -= inv_;
      return;
    }
    const double nu = dist_.dof, qd = static_cast<double>(b.size());
    const Eigen::VectorXd sb = scale_inv_ * b;
    const double denom = nu + b.dot(sb);
    grad.noalias() -= (nu + qd) / denom * sb;
    hess -= (nu + qd) * (scale_inv_ / denom - 2.0 * sb * sb.transpose() / (denom * denom));
  }

 private:
  Eigen::MatrixXd sigma_, chol_, inv_, scale_inv_;
  double log_det_ = 0.0;
  double t_const_ = 0.0;
  REDistribution dist_;
};

}  // namespace mesurv
