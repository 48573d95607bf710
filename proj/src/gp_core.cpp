#include "pxpgp/gp_core.hpp"

#include <cmath>
#include <numbers>

#include "pxpgp/errors.hpp"

namespace pxpgp {

namespace {

constexpr double kVarianceFloor = 1e-12;

bool all_finite(const Eigen::Ref<const Matrix>& m) {
  return m.allFinite();
}

void require_same_dim(const Matrix& X, const Hyperparams& theta) {
  if (X.cols() != theta.input_dim()) {
    throw InvalidInput("input dimension " + std::to_string(X.cols()) +
                       " does not match hyperparameter dimension " +
                       std::to_string(theta.input_dim()));
  }
}

// Inputs divided by their lengthscales; the kernel is then a plain
// squared-distance exponential.
Matrix scaled_inputs(const Matrix& X, const Hyperparams& theta) {
  Matrix S = X;
  for (Index d = 0; d < X.cols(); ++d) S.col(d) /= theta.lengthscale(d);
  return S;
}

}  // namespace

Hyperparams::Hyperparams(Vector log_values) : values_(std::move(log_values)) {
  if (values_.size() < 3) {
    throw InvalidInput("hyperparameter vector needs at least 3 entries");
  }
  if (!values_.allFinite()) {
    throw InvalidInput("hyperparameters must be finite");
  }
}

Hyperparams Hyperparams::from_natural(const Vector& lengthscales,
                                      double signal_std, double noise_std) {
  Vector natural(lengthscales.size() + 2);
  natural << lengthscales, signal_std, noise_std;
  return from_natural(natural);
}

Hyperparams Hyperparams::from_natural(const Vector& natural) {
  if ((natural.array() <= 0.0).any() || !natural.allFinite()) {
    throw InvalidInput("natural hyperparameters must be positive and finite");
  }
  return Hyperparams(natural.array().log().matrix());
}

double Hyperparams::lengthscale(Index d) const {
  return std::exp(values_(d));
}
double Hyperparams::signal_std() const {
  return std::exp(values_(values_.size() - 2));
}
double Hyperparams::noise_std() const {
  return std::exp(values_(values_.size() - 1));
}
double Hyperparams::signal_variance() const {
  return std::exp(2.0 * values_(values_.size() - 2));
}
double Hyperparams::noise_variance() const {
  return std::exp(2.0 * values_(values_.size() - 1));
}

Vector Hyperparams::natural_values() const {
  return values_.array().exp().matrix();
}

void Dataset::validate() const {
  if (y.size() == 0) throw InvalidInput("dataset has no rows");
  if (X.rows() != y.size()) {
    throw InvalidInput("dataset has " + std::to_string(X.rows()) +
                       " input rows but " + std::to_string(y.size()) +
                       " outputs");
  }
  if (!all_finite(X) || !y.allFinite()) {
    throw InvalidInput("dataset contains non-finite values");
  }
}

Dataset Dataset::concat(const Dataset& a, const Dataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.dim() != b.dim()) {
    throw InvalidInput("cannot concatenate datasets of different dimension");
  }
  Dataset out;
  out.X.resize(a.size() + b.size(), a.dim());
  out.X << a.X, b.X;
  out.y.resize(a.size() + b.size());
  out.y << a.y, b.y;
  return out;
}

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset out;
  out.X.resize(static_cast<Index>(rows.size()), dim());
  out.y.resize(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.X.row(static_cast<Index>(k)) = X.row(rows[k]);
    out.y(static_cast<Index>(k)) = y(rows[k]);
  }
  return out;
}

double sse_kernel(const Eigen::Ref<const Vector>& a,
                  const Eigen::Ref<const Vector>& b, const Hyperparams& theta) {
  if (a.size() != theta.input_dim() || b.size() != theta.input_dim()) {
    throw InvalidInput("kernel argument dimension mismatch");
  }
  if (!a.allFinite() || !b.allFinite()) {
    throw InvalidInput("kernel arguments must be finite");
  }
  double r2 = 0.0;
  for (Index d = 0; d < a.size(); ++d) {
    const double diff = (a(d) - b(d)) / theta.lengthscale(d);
    r2 += diff * diff;
  }
  return theta.signal_variance() * std::exp(-0.5 * r2);
}

Matrix kernel_matrix(const Matrix& A, const Matrix& B,
                     const Hyperparams& theta) {
  require_same_dim(A, theta);
  require_same_dim(B, theta);
  if (!all_finite(A) || !all_finite(B)) {
    throw InvalidInput("kernel arguments must be finite");
  }
  const Matrix SA = scaled_inputs(A, theta);
  const Matrix SB = scaled_inputs(B, theta);
  const double sf2 = theta.signal_variance();
  Matrix K(A.rows(), B.rows());
  for (Index j = 0; j < B.rows(); ++j) {
    for (Index i = 0; i < A.rows(); ++i) {
      K(i, j) = sf2 * std::exp(-0.5 * (SA.row(i) - SB.row(j)).squaredNorm());
    }
  }
  return K;
}

Matrix covariance(const Matrix& X, const Hyperparams& theta) {
  require_same_dim(X, theta);
  if (X.rows() < 1) throw InvalidInput("covariance needs at least one input");
  Matrix C = kernel_matrix(X, X, theta);
  C.diagonal().array() += theta.noise_variance();
  return C;
}

RobustCholesky robust_cholesky(const Matrix& A) {
  RobustCholesky out;
  out.llt.compute(A);
  if (out.llt.info() == Eigen::Success) return out;

  const double scale = A.diagonal().mean();
  for (double factor = 1e-8; factor <= 1e-2 * (1.0 + 1e-9); factor *= 10.0) {
    Matrix jittered = A;
    jittered.diagonal().array() += factor * scale;
    out.llt.compute(jittered);
    if (out.llt.info() == Eigen::Success) {
      out.jitter = factor * scale;
      return out;
    }
  }
  throw IllConditioned("Cholesky factorization failed for a " +
                       std::to_string(A.rows()) + "x" +
                       std::to_string(A.cols()) +
                       " matrix after jitter escalation");
}

namespace {

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

double nll(const Dataset& data, const Hyperparams& theta) {
  data.validate();
  const auto chol = robust_cholesky(covariance(data.X, theta));
  const Vector half = chol.llt.matrixL().solve(data.y);
  return half.squaredNorm() + log_det(chol.llt);
}

ValueAndGradient nll_with_grad(const Dataset& data, const Hyperparams& theta) {
  data.validate();
  require_same_dim(data.X, theta);
  const Index n = data.size();
  const Index dim = data.dim();

  const Matrix K = kernel_matrix(data.X, data.X, theta);
  Matrix C = K;
  C.diagonal().array() += theta.noise_variance();
  const auto chol = robust_cholesky(C);

  const Vector alpha = chol.llt.solve(data.y);
  ValueAndGradient out;
  out.value = data.y.dot(alpha) + log_det(chol.llt);

  // d nll / d theta_j = tr((C^-1 - alpha alpha^T) dC/dtheta_j)
  Matrix W = chol.llt.solve(Matrix::Identity(n, n));
  W.noalias() -= alpha * alpha.transpose();

  out.gradient = Vector::Zero(dim + 2);
  const Matrix S = scaled_inputs(data.X, theta);
  for (Index j = 0; j < n; ++j) {
    for (Index i = j + 1; i < n; ++i) {
      const double wk = 2.0 * W(i, j) * K(i, j);
      for (Index d = 0; d < dim; ++d) {
        const double diff = S(i, d) - S(j, d);
        out.gradient(d) += wk * diff * diff;
      }
    }
  }
  // Only K (not the noise diagonal) scales with sigma_f^2.
  out.gradient(dim) = 2.0 * W.cwiseProduct(K).sum();
  out.gradient(dim + 1) = 2.0 * theta.noise_variance() * W.trace();
  return out;
}

Vector nll_grad(const Dataset& data, const Hyperparams& theta) {
  return nll_with_grad(data, theta).gradient;
}

double log_marginal_likelihood(const Dataset& data, const Hyperparams& theta) {
  const double n = static_cast<double>(data.size());
  return -0.5 * (nll(data, theta) + n * std::log(2.0 * std::numbers::pi));
}

Posterior predict(const Dataset& train, const Hyperparams& theta,
                  const Matrix& Xq) {
  train.validate();
  require_same_dim(Xq, theta);
  const auto chol = robust_cholesky(covariance(train.X, theta));
  const Matrix Kqn = kernel_matrix(Xq, train.X, theta);

  Posterior post;
  post.mean = Kqn * chol.llt.solve(train.y);
  const Matrix V = chol.llt.matrixL().solve(Kqn.transpose());
  const double prior = theta.signal_variance() + theta.noise_variance();
  post.variance =
      (prior - V.colwise().squaredNorm().array()).max(kVarianceFloor).matrix();
  return post;
}

}  // namespace pxpgp
