#include "ccbm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ccbm/errors.hpp"

namespace ccbm {

void ModelConfig::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw ContractViolation("gamma must be a finite positive number");
  }
  if (k < 1) throw ContractViolation("k must be at least 1");
  if (!(gradient_tolerance > 0.0)) throw ContractViolation("gradient tolerance must be positive");
  if (max_newton_iterations < 1) throw ContractViolation("max_newton_iterations must be >= 1");
}

AnnotationMatrix::AnnotationMatrix(const Eigen::MatrixXd& concept_values,
                                   std::vector<std::string> row_ids)
    : row_ids_(std::move(row_ids)) {
  if (!row_ids_.empty() && static_cast<Eigen::Index>(row_ids_.size()) != concept_values.rows()) {
    throw ContractViolation("row_ids length does not match annotation rows");
  }
  for (Eigen::Index i = 0; i < concept_values.size(); ++i) {
    const double v = concept_values.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractViolation("annotation value outside [0,1]");
    }
  }
  values_.resize(concept_values.rows(), concept_values.cols() + 1);
  values_.leftCols(concept_values.cols()) = concept_values;
  values_.col(concept_values.cols()).setOnes();
}

AnnotationMatrix AnnotationMatrix::from_columns(std::span<const std::vector<double>> columns,
                                                std::size_t rows) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j].size() != rows) throw ContractViolation("annotation column has wrong length");
    for (std::size_t i = 0; i < rows; ++i) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = columns[j][i];
    }
  }
  return AnnotationMatrix(m);
}

Eigen::MatrixXd AnnotationMatrix::design(const ModelConfig& cfg) const {
  if (cfg.include_intercept) return values_;
  return values_.leftCols(values_.cols() - 1);
}

AnnotationMatrix AnnotationMatrix::select_rows(std::span<const std::size_t> rows) const {
  AnnotationMatrix out;
  out.values_.resize(static_cast<Eigen::Index>(rows.size()), values_.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= static_cast<std::size_t>(values_.rows())) {
      throw ContractViolation("row index out of range");
    }
    out.values_.row(static_cast<Eigen::Index>(r)) = values_.row(static_cast<Eigen::Index>(rows[r]));
    if (!row_ids_.empty()) out.row_ids_.push_back(row_ids_[rows[r]]);
  }
  return out;
}

double log1p_exp(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double sigmoid_predict(const Coefficients& theta, const Eigen::VectorXd& phi_row) {
  if (theta.theta.size() != phi_row.size()) {
    throw ContractViolation("coefficient and feature dimensions differ");
  }
  return sigmoid(theta.theta.dot(phi_row));
}

void require_binary_labels(const Eigen::VectorXd& y, Eigen::Index n) {
  if (y.size() != n) throw ContractViolation("labels do not align with annotation rows");
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw ContractViolation("labels must be 0 or 1");
  }
}

double neg_log_joint(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& theta, double gamma) {
  const Eigen::VectorXd z = x * theta;
  double g = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) g += log1p_exp(z[i]) - y[i] * z[i];
  return g + theta.squaredNorm() / (2.0 * gamma * gamma);
}

Eigen::VectorXd neg_log_joint_gradient(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& theta, double gamma) {
  Eigen::VectorXd resid = x * theta;
  for (Eigen::Index i = 0; i < resid.size(); ++i) resid[i] = sigmoid(resid[i]) - y[i];
  return x.transpose() * resid + theta / (gamma * gamma);
}

Eigen::MatrixXd neg_log_joint_hessian(const Eigen::MatrixXd& x, const Eigen::VectorXd& theta,
                                      double gamma) {
  Eigen::VectorXd w = x * theta;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double s = sigmoid(w[i]);
    w[i] = s * (1.0 - s);
  }
  Eigen::MatrixXd h = x.transpose() * w.asDiagonal() * x;
  h.diagonal().array() += 1.0 / (gamma * gamma);
  return h;
}

namespace {

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

std::string condition_report(const Eigen::MatrixXd& h) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h, Eigen::EigenvaluesOnly);
  std::ostringstream msg;
  msg << "Hessian factorization failed (d=" << h.rows() << ", min eigenvalue "
      << es.eigenvalues().minCoeff() << ", max eigenvalue " << es.eigenvalues().maxCoeff()
      << ")";
  return msg.str();
}

}  // namespace

Coefficients map_estimate_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 const ModelConfig& cfg) {
  cfg.validate();
  require_binary_labels(y, x.rows());
  const double gamma = cfg.gamma;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(x.cols());
  if (x.rows() == 0) return {theta};

  double g = neg_log_joint(x, y, theta, gamma);
  double grad_norm = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < cfg.max_newton_iterations; ++iter) {
    const Eigen::VectorXd grad = neg_log_joint_gradient(x, y, theta, gamma);
    grad_norm = grad.lpNorm<Eigen::Infinity>();
    if (grad_norm <= cfg.gradient_tolerance) return {theta};

    const Eigen::MatrixXd h = neg_log_joint_hessian(x, theta, gamma);
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success) throw NumericalError(condition_report(h));
    const Eigen::VectorXd step = llt.solve(grad);
    const double slope = grad.dot(step);

    // Backtracking (Armijo). Near the optimum g stops resolving the decrease,
    // so the full Newton step is taken once the decrease is below rounding.
    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double g_next = neg_log_joint(x, y, next, gamma);
    const double noise = 1e-13 * (1.0 + std::abs(g));
    while (g_next > g - 1e-4 * t * slope + noise && t > 1e-12) {
      t *= 0.5;
      next = theta - t * step;
      g_next = neg_log_joint(x, y, next, gamma);
    }
    theta = next;
    g = g_next;
  }
  const Eigen::VectorXd grad = neg_log_joint_gradient(x, y, theta, gamma);
  grad_norm = grad.lpNorm<Eigen::Infinity>();
  if (grad_norm <= cfg.gradient_tolerance) return {theta};
  std::ostringstream msg;
  msg << "MAP Newton did not converge in " << cfg.max_newton_iterations
      << " iterations (gradient inf-norm " << grad_norm << ")";
  throw OptimizationFailure(msg.str(), to_std(theta), grad_norm);
}

LogMarginal log_marginal_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                const ModelConfig& cfg) {
  const double gamma = cfg.gamma;
  const auto d = static_cast<double>(x.cols());
  LogMarginal out;
  out.theta_map = map_estimate_design(x, y, cfg);
  if (x.rows() == 0) {
    // Empty product: the prior normalization and determinant terms cancel.
    out.log_det_hessian = -d * std::log(gamma * gamma);
    out.value = 0.0;
    return out;
  }
  const Eigen::MatrixXd h = neg_log_joint_hessian(x, out.theta_map.theta, gamma);
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) throw NumericalError(condition_report(h));
  const Eigen::MatrixXd l = llt.matrixL();
  out.log_det_hessian = 2.0 * l.diagonal().array().log().sum();
  const double g = neg_log_joint(x, y, out.theta_map.theta, gamma);
  out.value = -g - 0.5 * d * std::log(gamma * gamma) - 0.5 * out.log_det_hessian;
  if (!std::isfinite(out.value)) throw NumericalError("non-finite log marginal likelihood");
  return out;
}

Coefficients map_estimate(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                          const ModelConfig& cfg) {
  return map_estimate_design(phi.design(cfg), y, cfg);
}

LogMarginal log_marginal_likelihood(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                                    const ModelConfig& cfg) {
  return log_marginal_design(phi.design(cfg), y, cfg);
}

double log_partial_bayes(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                         std::span<const std::size_t> subset_s, const ModelConfig& cfg) {
  const auto n = static_cast<std::size_t>(phi.rows());
  require_binary_labels(y, phi.rows());
  std::vector<bool> seen(n, false);
  std::size_t distinct = 0;
  for (std::size_t r : subset_s) {
    if (r >= n) throw ContractViolation("subset index out of range");
    if (!seen[r]) {
      seen[r] = true;
      ++distinct;
    }
  }
  if (distinct == n) return 0.0;
  const Eigen::MatrixXd x = phi.design(cfg);
  const double full = log_marginal_design(x, y, cfg).value;
  if (distinct == 0) return full;

  Eigen::MatrixXd xs(static_cast<Eigen::Index>(distinct), x.cols());
  Eigen::VectorXd ys(static_cast<Eigen::Index>(distinct));
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen[i]) continue;
    xs.row(r) = x.row(static_cast<Eigen::Index>(i));
    ys[r] = y[static_cast<Eigen::Index>(i)];
    ++r;
  }
  return full - log_marginal_design(xs, ys, cfg).value;
}

double posterior_predictive(std::span<const PosteriorSample> samples,
                            std::span<const Eigen::VectorXd> phi_rows) {
  if (samples.empty()) throw ContractViolation("posterior_predictive needs at least one sample");
  if (samples.size() != phi_rows.size()) {
    throw ContractViolation("one annotated row is required per posterior sample");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    sum += sigmoid_predict(samples[i].theta, phi_rows[i]);
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace ccbm
