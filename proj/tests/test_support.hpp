#pragma once

// Generators and independent oracles shared by the unit and acceptance suites.
// Nothing here calls into the code paths it is used to check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "pxpgp/gp_core.hpp"

namespace pxpgp::testing {

inline Matrix random_inputs(std::mt19937_64& rng, Index n, Index dim,
                            double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix X(n, dim);
  for (Index i = 0; i < n; ++i)
    for (Index d = 0; d < dim; ++d) X(i, d) = u(rng);
  return X;
}

inline Vector random_vector(std::mt19937_64& rng, Index n, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

/// Natural-space draw: lengthscales in [0.2, 1.5], sigma_f in [0.5, 2],
/// sigma_eps in [0.05, 0.5].
inline Hyperparams random_theta(std::mt19937_64& rng, Index dim) {
  std::uniform_real_distribution<double> ls(0.2, 1.5), sf(0.5, 2.0),
      se(0.05, 0.5);
  Vector natural(dim + 2);
  for (Index d = 0; d < dim; ++d) natural(d) = ls(rng);
  natural(dim) = sf(rng);
  natural(dim + 1) = se(rng);
  return Hyperparams::from_natural(natural);
}

inline Dataset random_dataset(std::mt19937_64& rng, Index n, Index dim) {
  return Dataset{random_inputs(rng, n, dim), random_vector(rng, n)};
}

/// Kernel by the textbook formula, elementwise.
inline double kernel_by_formula(const Vector& a, const Vector& b,
                                const Vector& natural) {
  const Index dim = a.size();
  double s = 0.0;
  for (Index d = 0; d < dim; ++d) {
    s += (a(d) - b(d)) * (a(d) - b(d)) / (natural(d) * natural(d));
  }
  return natural(dim) * natural(dim) * std::exp(-0.5 * s);
}

inline Matrix covariance_by_loop(const Matrix& X, const Hyperparams& theta) {
  const Vector natural = theta.natural_values();
  const Index n = X.rows();
  Matrix C(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      C(i, j) = kernel_by_formula(X.row(i).transpose(), X.row(j).transpose(),
                                  natural);
  C.diagonal().array() += natural(X.cols() + 1) * natural(X.cols() + 1);
  return C;
}

/// y^T C^-1 y + log|C| through an explicit inverse and an LU determinant.
inline double nll_dense_oracle(const Dataset& data, const Hyperparams& theta) {
  const Matrix C = covariance_by_loop(data.X, theta);
  const Matrix Cinv = C.inverse();
  return data.y.dot(Cinv * data.y) + std::log(C.fullPivLu().determinant());
}

/// Central differences.
inline Vector central_difference(const std::function<double(const Vector&)>& f,
                                 const Vector& x, double step) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vector hi = x, lo = x;
    hi(i) += step;
    lo(i) -= step;
    g(i) = (f(hi) - f(lo)) / (2.0 * step);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|b_i|, floor).
inline double max_relative_error(const Vector& a, const Vector& b,
                                 double floor = 1e-3) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    worst = std::max(worst,
                     std::abs(a(i) - b(i)) / std::max(std::abs(b(i)), floor));
  }
  return worst;
}

}  // namespace pxpgp::testing
