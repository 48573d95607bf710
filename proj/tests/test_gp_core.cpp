#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pxpgp/errors.hpp"
#include "pxpgp/gp_core.hpp"
#include "test_support.hpp"

using namespace pxpgp;
using namespace pxpgp::testing;

namespace {

Hyperparams paper_theta() {
  return Hyperparams::from_natural(Vector{{0.7, 0.5, 1.8, 0.1}});
}

}  // namespace

TEST_CASE("hyperparams round-trip natural values and reject bad input") {
  const Hyperparams t = paper_theta();
  CHECK(t.input_dim() == 2);
  CHECK(t.size() == 4);
  CHECK(t.lengthscale(0) == doctest::Approx(0.7));
  CHECK(t.signal_std() == doctest::Approx(1.8));
  CHECK(t.noise_std() == doctest::Approx(0.1));
  CHECK_THROWS_AS(Hyperparams(Vector{{0.0, 1.0}}), InvalidInput);
  CHECK_THROWS_AS(Hyperparams(Vector{{0.0, NAN, 1.0}}), InvalidInput);
  CHECK_THROWS_AS(Hyperparams::from_natural(Vector{{1.0, -1.0, 1.0}}),
                  InvalidInput);
}

TEST_CASE("sse kernel") {
  const Hyperparams t = paper_theta();
  const Vector x{{0.0, 0.0}}, xp{{0.7, 0.5}};

  SUBCASE("zero distance gives the signal variance") {
    CHECK(sse_kernel(xp, xp, t) == doctest::Approx(3.24));
  }
  SUBCASE("one lengthscale per coordinate gives sigma_f^2 / e") {
    CHECK(sse_kernel(x, xp, t) == doctest::Approx(3.24 * std::exp(-1.0)));
    CHECK(sse_kernel(x, xp, t) == doctest::Approx(1.19193).epsilon(1e-4));
  }
  SUBCASE("symmetric and bounded on random pairs") {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 200; ++k) {
      const Index dim = 1 + k % 3;
      const Hyperparams th = random_theta(rng, dim);
      const Vector a = random_vector(rng, dim), b = random_vector(rng, dim);
      const double kab = sse_kernel(a, b, th);
      CHECK(kab == sse_kernel(b, a, th));
      CHECK(kab > 0.0);
      CHECK(kab <= th.signal_variance());
    }
  }
  SUBCASE("non-finite or mismatched arguments are rejected") {
    CHECK_THROWS_AS(sse_kernel(Vector{{NAN, 0.0}}, x, t), InvalidInput);
    CHECK_THROWS_AS(sse_kernel(Vector{{0.0}}, x, t), InvalidInput);
  }
}

TEST_CASE("covariance assembly") {
  const Hyperparams t = paper_theta();
  SUBCASE("single input") {
    const Matrix C = covariance(Matrix::Zero(1, 2), t);
    REQUIRE(C.rows() == 1);
    CHECK(C(0, 0) == doctest::Approx(3.24 + 0.01));
  }
  SUBCASE("duplicated rows stay positive definite through the noise") {
    Matrix X(3, 2);
    X << 0.2, 0.3, 0.2, 0.3, 0.2, 0.3;
    const Matrix C = covariance(X, t);
    CHECK(C.llt().info() == Eigen::Success);
  }
  SUBCASE("matches the elementwise loop") {
    std::mt19937_64 rng(5);
    const Matrix X = random_inputs(rng, 5, 2);
    const Matrix C = covariance(X, t);
    const Matrix oracle = covariance_by_loop(X, t);
    CHECK((C - oracle).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((C - C.transpose()).norm() == 0.0);
  }
}

TEST_CASE("robust cholesky escalates jitter and then gives up") {
  Matrix singular = Matrix::Ones(4, 4);  // rank one, PSD
  singular(3, 3) -= 1e-13;
  const auto chol = robust_cholesky(singular);
  CHECK(chol.jitter > 0.0);
  CHECK(chol.jitter <= 1e-2 * singular.diagonal().mean() * (1 + 1e-12));

  Matrix indefinite = Matrix::Identity(3, 3);
  indefinite(0, 0) = -1.0;
  CHECK_THROWS_AS(robust_cholesky(indefinite), IllConditioned);
}

TEST_CASE("nll values") {
  SUBCASE("scalar case by hand") {
    const Dataset d{Matrix::Zero(1, 1), Vector::Ones(1)};
    const Hyperparams t = Hyperparams::from_natural(Vector{{1.0, 1.0, 1.0}});
    // C = 2: 1/2 + log 2
    CHECK(nll(d, t) == doctest::Approx(0.5 + std::log(2.0)).epsilon(1e-12));
    CHECK(nll(d, t) == doctest::Approx(1.19315).epsilon(1e-5));
  }
  SUBCASE("zero outputs leave only the log determinant") {
    std::mt19937_64 rng(3);
    Dataset d = random_dataset(rng, 8, 2);
    d.y.setZero();
    const Hyperparams t = paper_theta();
    const double logdet =
        std::log(covariance_by_loop(d.X, t).fullPivLu().determinant());
    CHECK(nll(d, t) == doctest::Approx(logdet).epsilon(1e-10));
  }
  SUBCASE("matches the dense inverse oracle") {
    std::mt19937_64 rng(21);
    for (int k = 0; k < 10; ++k) {
      const Index n = 5 + 5 * (k % 10);  // up to 50
      const Index dim = 1 + k % 3;
      const Dataset d = random_dataset(rng, n, dim);
      Hyperparams t = random_theta(rng, dim);
      const double a = nll(d, t);
      const double b = nll_dense_oracle(d, t);
      CHECK(std::abs(a - b) <= 1e-8 * std::max(1.0, std::abs(b)));
    }
  }
  SUBCASE("invariant to row permutation") {
    std::mt19937_64 rng(8);
    const Dataset d = random_dataset(rng, 30, 2);
    std::vector<Index> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Hyperparams t = paper_theta();
    CHECK(std::abs(nll(d, t) - nll(d.subset(perm), t)) < 1e-10);
  }
}

TEST_CASE("nll gradient") {
  SUBCASE("scalar noise derivative by hand") {
    const Dataset d{Matrix::Zero(1, 1), Vector::Ones(1)};
    const Hyperparams t = Hyperparams::from_natural(Vector{{1.0, 1.0, 1.0}});
    // 2 s^2 (1/C - y^2/C^2) = 2 (0.5 - 0.25)
    CHECK(nll_grad(d, t)(2) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("zero outputs give the trace term only") {
    std::mt19937_64 rng(4);
    Dataset d = random_dataset(rng, 10, 2);
    d.y.setZero();
    const Hyperparams t = paper_theta();
    const auto fd = central_difference(
        [&](const Vector& x) {
          return std::log(
              covariance_by_loop(d.X, Hyperparams(x)).fullPivLu().determinant());
        },
        t.log_values(), 1e-5);
    CHECK(max_relative_error(nll_grad(d, t), fd) < 1e-5);
  }
  SUBCASE("matches central differences on 50 random draws") {
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const Index dim = 1 + k % 3;
      const Index n = 3 + k % 20;
      const Dataset d = random_dataset(rng, n, dim);
      const Hyperparams t = random_theta(rng, dim);
      const Vector fd = central_difference(
          [&](const Vector& x) { return nll_dense_oracle(d, Hyperparams(x)); },
          t.log_values(), 1e-5);
      worst = std::max(worst, max_relative_error(nll_grad(d, t), fd));
    }
    CHECK(worst < 1e-5);
  }
  SUBCASE("value from nll_with_grad equals nll") {
    std::mt19937_64 rng(6);
    const Dataset d = random_dataset(rng, 12, 2);
    const Hyperparams t = paper_theta();
    CHECK(nll_with_grad(d, t).value == doctest::Approx(nll(d, t)));
  }
}

TEST_CASE("log marginal likelihood adds the constant back") {
  std::mt19937_64 rng(9);
  const Dataset d = random_dataset(rng, 7, 1);
  const Hyperparams t = Hyperparams::from_natural(Vector{{0.4, 1.0, 0.2}});
  CHECK(log_marginal_likelihood(d, t) ==
        doctest::Approx(-0.5 * (nll(d, t) + 7 * std::log(2 * M_PI))));
}

TEST_CASE("posterior prediction") {
  std::mt19937_64 rng(12);
  SUBCASE("interpolates training outputs when noise is tiny") {
    const Dataset d{random_inputs(rng, 20, 2, 0.0, 3.0), random_vector(rng, 20)};
    const Hyperparams t =
        Hyperparams::from_natural(Vector{{0.7, 0.5, 1.8, 1e-6}});
    const Posterior post = predict(d, t, d.X);
    const double rms = std::sqrt((post.mean - d.y).squaredNorm() / 20.0);
    CHECK(rms < 1e-3);
  }
  SUBCASE("reverts to the prior far away") {
    const Dataset d = random_dataset(rng, 10, 2);
    const Hyperparams t = paper_theta();
    const Posterior post = predict(d, t, Matrix::Constant(1, 2, 100.0));
    CHECK(std::abs(post.mean(0)) < 1e-12);
    CHECK(post.variance(0) == doctest::Approx(3.24 + 0.01));
  }
  SUBCASE("matches the dense inverse oracle") {
    const Dataset d = random_dataset(rng, 25, 2);
    const Hyperparams t = random_theta(rng, 2);
    const Matrix Xq = random_inputs(rng, 6, 2);
    const Posterior post = predict(d, t, Xq);

    const Vector natural = t.natural_values();
    const Matrix Cinv = covariance_by_loop(d.X, t).inverse();
    for (Index q = 0; q < Xq.rows(); ++q) {
      Vector k(d.size());
      for (Index i = 0; i < d.size(); ++i) {
        k(i) = kernel_by_formula(Xq.row(q).transpose(), d.X.row(i).transpose(),
                                 natural);
      }
      const double mean = k.dot(Cinv * d.y);
      const double var =
          natural(2) * natural(2) + natural(3) * natural(3) - k.dot(Cinv * k);
      CHECK(std::abs(post.mean(q) - mean) <= 1e-8 * std::max(1.0, std::abs(mean)));
      CHECK(std::abs(post.variance(q) - var) <= 1e-8 * std::max(1.0, var));
      CHECK(post.variance(q) > 0.0);
    }
  }
}
