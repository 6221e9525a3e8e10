#pragma once

// Independent reference computations and small fixtures shared by the unit
// tests and the acceptance suite. Nothing here calls the library's solver.

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccbm/annotation_cache.hpp"
#include "ccbm/eval.hpp"
#include "ccbm/pool_oracle.hpp"
#include "ccbm/rng.hpp"
#include "ccbm/sampler.hpp"

namespace ccbm::testing {

inline double log1pexp_ref(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// log p(y | x) with theta ~ N(0, gamma^2 I) on a 2-column design, by tensor
/// trapezoid quadrature in coordinates whitened at a gradient-descent mode.
inline double quadrature_log_marginal_2d(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double gamma,
                                         int grid = 401, double half_width = 9.0) {
  auto log_joint = [&](const Eigen::Vector2d& t) {
    double v = -t.squaredNorm() / (2 * gamma * gamma) - std::log(2 * M_PI * gamma * gamma);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double z = x.row(i).dot(t);
      v += y[i] * z - log1pexp_ref(z);
    }
    return v;
  };
  // mode by plain gradient ascent, then the curvature there to size the grid
  Eigen::Vector2d t = Eigen::Vector2d::Zero();
  for (int it = 0; it < 20000; ++it) {
    Eigen::Vector2d g = -t / (gamma * gamma);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x.row(i).dot(t)));
      g += (y[i] - s) * x.row(i).transpose();
    }
    t += 0.05 * g;
  }
  Eigen::Matrix2d h = Eigen::Matrix2d::Identity() / (gamma * gamma);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x.row(i).dot(t)));
    h += s * (1 - s) * x.row(i).transpose() * x.row(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(h);
  const Eigen::Matrix2d scale = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();
  const double jac = std::abs(scale.determinant());
  const double step = 2 * half_width / (grid - 1);
  const double peak = log_joint(t);
  double total = 0.0;
  for (int a = 0; a < grid; ++a) {
    const double wa = (a == 0 || a == grid - 1) ? 0.5 : 1.0;
    for (int b = 0; b < grid; ++b) {
      const double wb = (b == 0 || b == grid - 1) ? 0.5 : 1.0;
      const Eigen::Vector2d u(-half_width + a * step, -half_width + b * step);
      total += wa * wb * std::exp(log_joint(t + scale * u) - peak);
    }
  }
  return peak + std::log(total * step * step * jac);
}

/// MAP of the ridge-penalized logistic objective by fixed-step gradient descent.
inline Eigen::VectorXd gradient_descent_map(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double gamma,
                                            int iterations = 200000, double step = 0.01) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(x.cols());
  for (int it = 0; it < iterations; ++it) {
    Eigen::VectorXd g = t / (gamma * gamma);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x.row(i).dot(t)));
      g += (s - y[i]) * x.row(i).transpose();
    }
    if (g.lpNorm<Eigen::Infinity>() < 1e-12) break;
    t -= step * g;
  }
  return t;
}

/// Synthetic corpus over a pool of `p` features with the first `true_k`
/// carrying alternating +/-`effect` coefficients.
inline SyntheticSpec small_spec(std::size_t n, std::size_t p, std::size_t true_k, double effect, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.seed = seed;
  for (std::size_t j = 0; j < p; ++j) {
    const std::string f = "feature " + std::string(1, static_cast<char>('a' + j));
    spec.pool.push_back({"Does the note mention " + f + "?", f, 0.3 + 0.04 * static_cast<double>(j % 5)});
  }
  for (std::size_t t = 0; t < true_k; ++t) {
    spec.true_support.push_back(t);
    spec.coefficients.push_back(t % 2 == 0 ? effect : -effect);
  }
  spec.intercept = 0.0;
  return spec;
}

/// Everything a sampler test needs for one synthetic pool problem.
struct PoolProblem {
  SyntheticData data;
  std::unique_ptr<PoolOracle> oracle;
  std::unique_ptr<FixedColumns> columns;
  std::unique_ptr<LikelihoodEvaluator> eval;
  Eigen::VectorXd y;

  PoolProblem(const SyntheticSpec& spec, PoolProposalRule rule, double gamma) {
    data = generate_synthetic(spec);
    data.pool.rule = rule;
    ModelConfig model;
    model.gamma = gamma;
    oracle = std::make_unique<PoolOracle>(data.pool, model, data.observations);
    std::unordered_map<std::string, std::vector<double>> cols;
    for (std::size_t j = 0; j < oracle->concepts().size(); ++j) {
      cols[oracle->concepts()[j].id()] = oracle->training_column(j);
    }
    columns = std::make_unique<FixedColumns>(data.observations.size(), std::move(cols));
    y = Dataset(data.observations).labels();
    eval = std::make_unique<LikelihoodEvaluator>(*columns, y, model);
  }

  std::vector<std::vector<double>> pool_columns() const {
    std::vector<std::vector<double>> out;
    for (std::size_t j = 0; j < oracle->concepts().size(); ++j) out.push_back(oracle->training_column(j));
    return out;
  }
};

/// Temporary directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("ccbm-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace ccbm::testing
