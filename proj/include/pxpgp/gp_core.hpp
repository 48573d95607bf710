#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <vector>

namespace pxpgp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Kernel and noise parameters of a separable squared-exponential GP.
///
/// Values are held in log-space as one contiguous vector
/// (log l_1, ..., log l_D, log sigma_f, log sigma_eps), so every optimizer and
/// consensus step in the library works on an unconstrained R^{D+2} vector and
/// the natural-space values are positive by construction.
class Hyperparams {
 public:
  Hyperparams() = default;

  /// Throws InvalidInput unless the vector has size >= 3 and finite entries.
  explicit Hyperparams(Vector log_values);

  static Hyperparams from_natural(const Vector& lengthscales, double signal_std,
                                  double noise_std);
  /// (l_1, ..., l_D, sigma_f, sigma_eps) in one vector.
  static Hyperparams from_natural(const Vector& natural);

  Index input_dim() const { return values_.size() - 2; }
  Index size() const { return values_.size(); }

  double lengthscale(Index d) const;
  double signal_std() const;
  double noise_std() const;
  double signal_variance() const;
  double noise_variance() const;

  const Vector& log_values() const { return values_; }
  Vector natural_values() const;

  bool operator==(const Hyperparams& other) const {
    return values_ == other.values_;
  }

 private:
  Vector values_;
};

/// Training inputs X (N x D) and scalar outputs y (N).
struct Dataset {
  Matrix X;
  Vector y;

  Index size() const { return y.size(); }
  Index dim() const { return X.cols(); }

  /// Throws InvalidInput on N == 0, mismatched rows or non-finite entries.
  void validate() const;

  /// Rows of `a` followed by rows of `b`. Column counts must agree.
  static Dataset concat(const Dataset& a, const Dataset& b);
  Dataset subset(const std::vector<Index>& rows) const;
};

/// Predictive distribution at Q query points.
struct Posterior {
  Vector mean;
  Vector variance;
};

double sse_kernel(const Eigen::Ref<const Vector>& a,
                  const Eigen::Ref<const Vector>& b, const Hyperparams& theta);

/// Cross-covariance k(A_i, B_j), no noise.
Matrix kernel_matrix(const Matrix& A, const Matrix& B,
                     const Hyperparams& theta);

/// C = K(X, X) + sigma_eps^2 I.
Matrix covariance(const Matrix& X, const Hyperparams& theta);

/// Cholesky factorization with the library jitter schedule: plain first, then
/// diagonal jitter 1e-8 * mean(diag) growing x10 up to 1e-2 * mean(diag).
/// Throws IllConditioned when every attempt fails.
struct RobustCholesky {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;
};
RobustCholesky robust_cholesky(const Matrix& A);

/// y^T C^-1 y + log|C|. The N log(2 pi) constant is left out.
double nll(const Dataset& data, const Hyperparams& theta);

/// Gradient of nll() with respect to the log-space coordinates.
Vector nll_grad(const Dataset& data, const Hyperparams& theta);

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
};
/// nll and its gradient from a single factorization.
ValueAndGradient nll_with_grad(const Dataset& data, const Hyperparams& theta);

/// log N(y | 0, C), including the constant.
double log_marginal_likelihood(const Dataset& data, const Hyperparams& theta);

/// Observation-space predictive mean and variance (sigma_eps^2 included),
/// variance clamped below at 1e-12.
Posterior predict(const Dataset& train, const Hyperparams& theta,
                  const Matrix& Xq);

}  // namespace pxpgp
