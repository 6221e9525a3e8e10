#pragma once

// Logistic concept-bottleneck model: likelihood, Gaussian-prior MAP fit,
// Laplace marginal likelihoods, partial Bayes factors and the plug-in
// posterior-predictive ensemble. Everything here is a pure function.

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ccbm/concept.hpp"

namespace ccbm {

struct ModelConfig {
  double gamma = 2.0;  // prior standard deviation of every coefficient
  int k = 1;
  bool include_intercept = true;
  double gradient_tolerance = 1e-8;  // infinity norm
  int max_newton_iterations = 100;

  void validate() const;
};

/// n x (K+1) design: concept values in [0,1] followed by a constant intercept column.
class AnnotationMatrix {
 public:
  AnnotationMatrix() = default;
  /// `concept_values` is n x K. Throws ContractViolation for values outside [0,1].
  explicit AnnotationMatrix(const Eigen::MatrixXd& concept_values,
                            std::vector<std::string> row_ids = {});
  static AnnotationMatrix from_columns(std::span<const std::vector<double>> columns,
                                       std::size_t rows);

  const Eigen::MatrixXd& values() const { return values_; }
  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index concept_count() const { return values_.cols() - 1; }
  const std::vector<std::string>& row_ids() const { return row_ids_; }

  /// Design matrix handed to the likelihood (drops the intercept when disabled).
  Eigen::MatrixXd design(const ModelConfig& cfg) const;
  AnnotationMatrix select_rows(std::span<const std::size_t> rows) const;

 private:
  Eigen::MatrixXd values_;
  std::vector<std::string> row_ids_;
};

/// theta = (theta_1..theta_K, theta_0); the intercept is last.
struct Coefficients {
  Eigen::VectorXd theta;
};

struct LogMarginal {
  double value = 0.0;  // nats
  Coefficients theta_map;
  double log_det_hessian = 0.0;
};

/// One recorded chain state with its full-data plug-in fit.
struct PosteriorSample {
  ConceptSet concept_set;
  Coefficients theta;
  double log_marginal_full = 0.0;
  int epoch = 0;
  int slot = 0;
  bool accepted = false;
  bool warm_start = false;
};

double log1p_exp(double z);
double sigmoid(double z);

/// sigma(theta . phi). `phi_row` includes the trailing intercept entry.
double sigmoid_predict(const Coefficients& theta, const Eigen::VectorXd& phi_row);

/// g_T(theta) = sum_i [-y_i z_i + log(1 + e^{z_i})] + |theta|^2 / (2 gamma^2).
double neg_log_joint(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& theta, double gamma);
Eigen::VectorXd neg_log_joint_gradient(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& theta, double gamma);
/// H_T(theta) = sum_i s_i (1 - s_i) x_i x_i^T + gamma^{-2} I.
Eigen::MatrixXd neg_log_joint_hessian(const Eigen::MatrixXd& x, const Eigen::VectorXd& theta,
                                      double gamma);

/// Damped Newton from zero. Throws OptimizationFailure carrying the last iterate.
Coefficients map_estimate(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                          const ModelConfig& cfg);

/// Laplace approximation: -g(theta*) - (d/2) log gamma^2 - (1/2) log det H(theta*).
LogMarginal log_marginal_likelihood(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                                    const ModelConfig& cfg);

/// log p(y_{S^c} | y_S, c, X) as a ratio of the two Laplace marginals.
double log_partial_bayes(const AnnotationMatrix& phi, const Eigen::VectorXd& y,
                         std::span<const std::size_t> subset_s, const ModelConfig& cfg);

/// Same quantities on a raw design matrix; used by the sampler's hot path.
Coefficients map_estimate_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 const ModelConfig& cfg);
LogMarginal log_marginal_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                const ModelConfig& cfg);

/// Mean over samples of each sample's plug-in prediction; `phi_rows[i]` is the
/// observation annotated under samples[i]'s concept set.
double posterior_predictive(std::span<const PosteriorSample> samples,
                            std::span<const Eigen::VectorXd> phi_rows);

/// Checks y is a 0/1 vector of the given length.
void require_binary_labels(const Eigen::VectorXd& y, Eigen::Index n);

}  // namespace ccbm
