#include <doctest.h>

#include <random>

#include "ccbm/errors.hpp"
#include "ccbm/model.hpp"
#include "test_support.hpp"

using namespace ccbm;

namespace {

struct Instance {
  Eigen::MatrixXd values;  // n x K concept values
  Eigen::VectorXd y;
};

Instance random_instance(std::mt19937_64& gen, int n, int k) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance inst{Eigen::MatrixXd(n, k), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) inst.values(i, j) = u(gen) < 0.5 ? std::round(u(gen)) : u(gen);
    inst.y[i] = u(gen) < 0.5 ? 1.0 : 0.0;
  }
  return inst;
}

ModelConfig config(double gamma) {
  ModelConfig cfg;
  cfg.gamma = gamma;
  return cfg;
}

}  // namespace

TEST_CASE("laplace marginal tracks quadrature on small K=1 problems") {
  // The approximation error is roughly constant in nats and shrinks with n, so
  // the 2% band holds for gamma <= 1 throughout and for gamma = 2 once n >= 7.
  std::mt19937_64 gen(11);
  for (int rep = 0; rep < 18; ++rep) {
    const double gamma = std::array{0.5, 1.0, 2.0}[rep % 3];
    const int n = 2 + rep % 9;
    const Instance inst = random_instance(gen, n, 1);
    if (gamma == 2.0 && n < 7) continue;
    const AnnotationMatrix phi(inst.values);
    const double laplace = log_marginal_likelihood(phi, inst.y, config(gamma)).value;
    const double exact = testing::quadrature_log_marginal_2d(phi.values(), inst.y, gamma, 201);
    CHECK(std::abs(laplace - exact) <= 0.02 * std::abs(exact));
  }
}

TEST_CASE("laplace error shrinks as n grows") {
  std::mt19937_64 gen(12);
  auto mean_error = [&](int n) {
    double total = 0.0;
    for (int rep = 0; rep < 6; ++rep) {
      const Instance inst = random_instance(gen, n, 1);
      const AnnotationMatrix phi(inst.values);
      total += std::abs(log_marginal_likelihood(phi, inst.y, config(2.0)).value -
                        testing::quadrature_log_marginal_2d(phi.values(), inst.y, 2.0, 201));
    }
    return total / 6;
  };
  const double small = mean_error(4);
  const double large = mean_error(60);
  CHECK(large < small);
}

TEST_CASE("newton MAP agrees with plain gradient descent") {
  std::mt19937_64 gen(5);
  for (int rep = 0; rep < 5; ++rep) {
    const Instance inst = random_instance(gen, 15, 3);
    const AnnotationMatrix phi(inst.values);
    const double gamma = 1.0 + rep;
    const Coefficients map = map_estimate(phi, inst.y, config(gamma));
    const Eigen::VectorXd ref = testing::gradient_descent_map(phi.values(), inst.y, gamma);
    CHECK((map.theta - ref).lpNorm<Eigen::Infinity>() < 1e-6);
  }
}

TEST_CASE("prior scale gamma corresponds to an L2 logistic fit with C = gamma^2") {
  // reference coefficients from an L2 logistic regression with a penalized constant column
  Eigen::MatrixXd x(8, 2);
  x << 0.2, 0.0, 0.9, 1.0, 0.4, 1.0, 1.0, 0.0, 0.0, 0.0, 0.7, 1.0, 0.5, 0.0, 0.3, 1.0;
  Eigen::VectorXd y(8);
  y << 0, 1, 0, 1, 0, 1, 1, 0;
  const std::vector<std::pair<double, Eigen::Vector3d>> cases = {
      {0.5, {0.24401698843635847, -0.020601356722577423, -0.03718348471152024}},
      {1.5, {1.5537687853938353, -0.2533290926741594, -0.522729892699674}},
      {3.0, {3.7618088188941914, -0.6721735010533195, -1.3904953511064835}},
  };
  for (const auto& [gamma, expected] : cases) {
    const Coefficients map = map_estimate(AnnotationMatrix(x), y, config(gamma));
    CHECK((map.theta - expected).lpNorm<Eigen::Infinity>() < 1e-5);
  }
}

TEST_CASE("objective gradient and hessian are consistent with finite differences") {
  std::mt19937_64 gen(3);
  const Instance inst = random_instance(gen, 12, 2);
  const Eigen::MatrixXd x = AnnotationMatrix(inst.values).values();
  Eigen::VectorXd theta(3);
  theta << 0.3, -1.2, 0.5;
  const double h = 1e-6;
  const Eigen::VectorXd g = neg_log_joint_gradient(x, inst.y, theta, 1.3);
  const Eigen::MatrixXd hess = neg_log_joint_hessian(x, theta, 1.3);
  for (int j = 0; j < 3; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(3);
    e[j] = h;
    const double fd = (neg_log_joint(x, inst.y, theta + e, 1.3) - neg_log_joint(x, inst.y, theta - e, 1.3)) / (2 * h);
    CHECK(g[j] == doctest::Approx(fd).epsilon(1e-6));
    const Eigen::VectorXd gd = (neg_log_joint_gradient(x, inst.y, theta + e, 1.3) -
                                neg_log_joint_gradient(x, inst.y, theta - e, 1.3)) / (2 * h);
    CHECK((hess.col(j) - gd).lpNorm<Eigen::Infinity>() < 1e-5);
  }
}

TEST_CASE("model invariants") {
  std::mt19937_64 gen(9);
  const Instance inst = random_instance(gen, 20, 2);
  const AnnotationMatrix phi(inst.values);
  const ModelConfig cfg = config(2.0);

  SUBCASE("gradient vanishes at the MAP and the hessian is positive definite") {
    const LogMarginal lm = log_marginal_likelihood(phi, inst.y, cfg);
    const Eigen::VectorXd g = neg_log_joint_gradient(phi.values(), inst.y, lm.theta_map.theta, cfg.gamma);
    CHECK(g.lpNorm<Eigen::Infinity>() < 1e-8);
    Eigen::LLT<Eigen::MatrixXd> llt(neg_log_joint_hessian(phi.values(), lm.theta_map.theta, cfg.gamma));
    CHECK(llt.info() == Eigen::Success);
  }

  SUBCASE("empty data has zero log marginal") {
    const AnnotationMatrix empty(Eigen::MatrixXd(0, 2));
    CHECK(log_marginal_likelihood(empty, Eigen::VectorXd(0), cfg).value == 0.0);
  }

  SUBCASE("partial Bayes factor with an empty subset is the full marginal") {
    const std::vector<std::size_t> none;
    CHECK(log_partial_bayes(phi, inst.y, none, cfg) ==
          doctest::Approx(log_marginal_likelihood(phi, inst.y, cfg).value));
  }

  SUBCASE("partial Bayes factor is the difference of marginals") {
    const std::vector<std::size_t> s = {0, 3, 4, 7, 11};
    const double diff = log_marginal_likelihood(phi, inst.y, cfg).value -
                        log_marginal_likelihood(phi.select_rows(s), [&] {
                          Eigen::VectorXd ys(5);
                          for (int i = 0; i < 5; ++i) ys[i] = inst.y[static_cast<Eigen::Index>(s[i])];
                          return ys;
                        }(), cfg).value;
    CHECK(log_partial_bayes(phi, inst.y, s, cfg) == doctest::Approx(diff).epsilon(1e-12));
  }

  SUBCASE("marginal is invariant to row order") {
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(20);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 20, gen);
    const AnnotationMatrix shuffled(perm * inst.values);
    const Eigen::VectorXd ys = perm * inst.y;
    CHECK(log_marginal_likelihood(shuffled, ys, cfg).value ==
          doctest::Approx(log_marginal_likelihood(phi, inst.y, cfg).value).epsilon(1e-10));
  }

  SUBCASE("a single-sample ensemble predicts that model's output") {
    PosteriorSample s;
    s.theta = map_estimate(phi, inst.y, cfg);
    Eigen::VectorXd row(3);
    row << 1.0, 0.0, 1.0;
    const PosteriorSample samples[] = {s};
    const Eigen::VectorXd rows[] = {row};
    CHECK(posterior_predictive(samples, rows) == doctest::Approx(sigmoid_predict(s.theta, row)));
  }
}

TEST_CASE("model contract violations") {
  Eigen::MatrixXd bad(2, 1);
  bad << 0.5, 1.5;
  CHECK_THROWS_AS(AnnotationMatrix{bad}, ContractViolation);
  Eigen::VectorXd y(2);
  y << 0, 2;
  CHECK_THROWS_AS(require_binary_labels(y, 2), ContractViolation);
  ModelConfig cfg;
  cfg.gamma = -1.0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("log1p_exp and sigmoid stay finite at extreme inputs") {
  CHECK(log1p_exp(800.0) == doctest::Approx(800.0));
  CHECK(log1p_exp(-800.0) >= 0.0);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}
