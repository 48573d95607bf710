#include "pxpgp/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

#include "pxpgp/errors.hpp"

namespace pxpgp {

Bounds Bounds::of(const Matrix& X) {
  if (X.rows() == 0) throw InvalidInput("bounds of an empty input set");
  return Bounds{X.colwise().minCoeff().transpose(),
                X.colwise().maxCoeff().transpose()};
}

bool Bounds::contains(const Eigen::Ref<const Vector>& x, double slack) const {
  return ((x - lower).array() >= -slack).all() &&
         ((upper - x).array() >= -slack).all();
}

InducingSet kmeans_init(const Matrix& X, Index count, std::uint64_t seed) {
  const Index n = X.rows();
  if (count < 1 || count > n) {
    throw InvalidInput("k-means needs 1 <= P <= N, got P=" +
                       std::to_string(count) + " N=" + std::to_string(n));
  }
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  std::vector<Index> chosen;
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  Vector nearest = Vector::Constant(n, std::numeric_limits<double>::infinity());
  auto take = [&](Index idx) {
    chosen.push_back(idx);
    taken[static_cast<std::size_t>(idx)] = 1;
    for (Index i = 0; i < n; ++i) {
      nearest(i) = std::min(nearest(i), (X.row(i) - X.row(idx)).squaredNorm());
    }
  };
  take(std::uniform_int_distribution<Index>(0, n - 1)(rng));
  while (static_cast<Index>(chosen.size()) < count) {
    const double total = nearest.sum();
    Index pick = -1;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Index i = 0; i < n; ++i) {
        if (nearest(i) <= 0.0) continue;
        pick = i;
        u -= nearest(i);
        if (u <= 0.0) break;
      }
    } else {
      // Only duplicates left: take the first unused row.
      for (Index i = 0; i < n && pick < 0; ++i) {
        if (!taken[static_cast<std::size_t>(i)]) pick = i;
      }
    }
    take(pick);
  }

  Matrix centroids(count, X.cols());
  for (Index k = 0; k < count; ++k) {
    centroids.row(k) = X.row(chosen[static_cast<std::size_t>(k)]);
  }

  // Lloyd iterations.
  std::vector<Index> assignment(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 100; ++iter) {
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Index k = 0; k < count; ++k) {
        const double d = (X.row(i) - centroids.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      assignment[static_cast<std::size_t>(i)] = best;
    }
    Matrix sums = Matrix::Zero(count, X.cols());
    Vector counts = Vector::Zero(count);
    for (Index i = 0; i < n; ++i) {
      sums.row(assignment[static_cast<std::size_t>(i)]) += X.row(i);
      counts(assignment[static_cast<std::size_t>(i)]) += 1.0;
    }
    double moved = 0.0;
    for (Index k = 0; k < count; ++k) {
      if (counts(k) == 0.0) continue;  // empty cluster keeps its centroid
      const Eigen::RowVectorXd next = sums.row(k) / counts(k);
      moved = std::max(moved, (next - centroids.row(k)).norm());
      centroids.row(k) = next;
    }
    if (moved <= 1e-6) break;
  }
  return InducingSet{centroids};
}

Index choose_inducing_count(Index local_size, Index agents) {
  if (local_size < 1 || agents < 1) {
    throw InvalidInput("inducing count needs N_i >= 1 and M >= 1");
  }
  return std::min(std::max<Index>(local_size / agents, 4), local_size);
}

namespace {

// Shared factorizations of the collapsed bound.
struct BoundFactors {
  Matrix Kpp;
  Matrix Knp;       // N x P
  Matrix W;         // P x R, W W^T = Kpp^-1 (pseudo-inverse if singular)
  Matrix A;         // W^T Kpn / sigma
  Eigen::LLT<Matrix> LB;  // chol(I + A A^T)
  double sigma = 0.0;
  double value = 0.0;
  double trace_gap = 0.0;  // tr(K_nn) - tr(Q_nn)
};

BoundFactors factorize(const Dataset& data, const InducingSet& inducing,
                       const Hyperparams& theta) {
  data.validate();
  if (inducing.Xp.cols() != data.dim()) {
    throw InvalidInput("inducing inputs and data differ in dimension");
  }
  if (inducing.size() < 1) throw InvalidInput("no inducing points");

  BoundFactors f;
  const Index n = data.size();
  const Index p = inducing.size();
  f.sigma = theta.noise_std();
  const double s2 = theta.noise_variance();

  f.Kpp = kernel_matrix(inducing.Xp, inducing.Xp, theta);
  Eigen::LLT<Matrix> llt(f.Kpp);
  if (llt.info() == Eigen::Success &&
      llt.matrixLLT().diagonal().minCoeff() > 1e-7 * std::sqrt(f.Kpp.diagonal().maxCoeff())) {
    f.W = llt.matrixU().solve(Matrix::Identity(p, p));
  } else {
    // Near-singular Kpp: drop the null space instead of adding jitter so that
    // Q_nn stays exact on the retained span.
    Eigen::SelfAdjointEigenSolver<Matrix> eig(f.Kpp);
    const Vector& lambda = eig.eigenvalues();
    const double cutoff = 1e-12 * std::max(lambda.maxCoeff(), 1e-300);
    Index r = 0;
    while (r < p && lambda(p - 1 - r) > cutoff) ++r;
    if (r == 0) throw IllConditioned("inducing kernel matrix has no positive spectrum");
    f.W = eig.eigenvectors().rightCols(r) *
          lambda.tail(r).cwiseSqrt().cwiseInverse().asDiagonal();
  }
  f.Knp = kernel_matrix(data.X, inducing.Xp, theta);

  const Index r = f.W.cols();
  f.A = f.W.transpose() * f.Knp.transpose() / f.sigma;
  Matrix B = Matrix::Identity(r, r);
  B.noalias() += f.A * f.A.transpose();
  f.LB = robust_cholesky(B).llt;

  const Vector c = f.LB.matrixL().solve(f.A * data.y) / f.sigma;
  const double nd = static_cast<double>(n);
  const double log_det_b =
      f.LB.matrixLLT().diagonal().array().log().sum();
  const double log_normal =
      -0.5 * nd * std::log(2.0 * std::numbers::pi) - log_det_b -
      nd * std::log(f.sigma) - 0.5 * data.y.squaredNorm() / s2 +
      0.5 * c.squaredNorm();
  const double trace_q = s2 * f.A.squaredNorm();
  f.trace_gap = nd * theta.signal_variance() - trace_q;
  f.value = log_normal - 0.5 * f.trace_gap / s2;
  return f;
}

}  // namespace

double elbo(const Dataset& data, const InducingSet& inducing,
            const Hyperparams& theta) {
  return factorize(data, inducing, theta).value;
}

ElboGradient elbo_with_grad(const Dataset& data, const InducingSet& inducing,
                            const Hyperparams& theta) {
  const BoundFactors f = factorize(data, inducing, theta);
  const Index n = data.size();
  const Index p = inducing.size();
  const Index dim = data.dim();
  const double s2 = theta.noise_variance();
  const double s4 = s2 * s2;

  // H = Kpp^-1 Kpn, alpha = (Q_nn + s^2 I)^-1 y via Woodbury on A.
  const Matrix H = f.W * (f.sigma * f.A);
  const Vector alpha = (data.y - f.A.transpose() * f.LB.solve(f.A * data.y)) / s2;
  const Matrix Ht = H.transpose();
  const Matrix inv_sy_Ht =
      (Ht - f.A.transpose() * f.LB.solve(f.A * Ht)) / s2;  // N x P
  const Vector h_alpha = H * alpha;

  // Sensitivities of the bound to K_np, K_pp and s^2.
  Matrix G_np = alpha * h_alpha.transpose() - inv_sy_Ht + Ht / s2;
  Matrix G_pp = -0.5 * (h_alpha * h_alpha.transpose() - H * inv_sy_Ht) -
                (H * Ht) / (2.0 * s2);
  G_pp = 0.5 * (G_pp + G_pp.transpose()).eval();

  const double trace_inv_sy =
      (static_cast<double>(n) - f.LB.solve(f.A * f.A.transpose()).trace()) /
      s2;
  const double trace_w = alpha.squaredNorm() - trace_inv_sy;
  const double d_s2 = 0.5 * trace_w + f.trace_gap / (2.0 * s4);

  ElboGradient out;
  out.value = f.value;
  out.d_inducing = Matrix::Zero(p, dim);
  out.d_log_theta = Vector::Zero(dim + 2);

  const Matrix& Xp = inducing.Xp;
  const Matrix& X = data.X;
  for (Index d = 0; d < dim; ++d) {
    const double l = theta.lengthscale(d);
    const double l2 = l * l;
    double d_log_l = 0.0;
    for (Index i = 0; i < p; ++i) {
      double acc = 0.0;
      for (Index m = 0; m < n; ++m) {
        const double gk = G_np(m, i) * f.Knp(m, i);
        const double diff = X(m, d) - Xp(i, d);
        acc += gk * diff;
        d_log_l += gk * diff * diff / l2;
      }
      for (Index j = 0; j < p; ++j) {
        if (j == i) continue;
        const double gk = G_pp(i, j) * f.Kpp(i, j);
        const double diff = Xp(i, d) - Xp(j, d);
        acc -= 2.0 * gk * diff;
        d_log_l += gk * diff * diff / l2;
      }
      out.d_inducing(i, d) = acc / l2;
    }
    out.d_log_theta(d) = d_log_l;
  }
  out.d_log_theta(dim) = 2.0 * G_np.cwiseProduct(f.Knp).sum() +
                         2.0 * G_pp.cwiseProduct(f.Kpp).sum() -
                         static_cast<double>(n) * theta.signal_variance() / s2;
  out.d_log_theta(dim + 1) = 2.0 * s2 * d_s2;
  return out;
}

VariationalState optimal_variational(const Dataset& data,
                                     const InducingSet& inducing,
                                     const Hyperparams& theta) {
  const BoundFactors f = factorize(data, inducing, theta);
  VariationalState q;
  const Matrix KW = f.Kpp * f.W;
  q.mean = KW * f.LB.solve(f.A * data.y) / f.sigma;
  q.covariance = KW * f.LB.solve(KW.transpose());
  q.covariance = 0.5 * (q.covariance + q.covariance.transpose()).eval();
  return q;
}

double boundary_penalty(const InducingSet& inducing, const Bounds& bounds) {
  double total = 0.0;
  for (Index i = 0; i < inducing.size(); ++i) {
    for (Index d = 0; d < inducing.Xp.cols(); ++d) {
      const double x = inducing.Xp(i, d);
      const double below = std::max(0.0, bounds.lower(d) - x);
      const double above = std::max(0.0, x - bounds.upper(d));
      total += below * below + above * above;
    }
  }
  return total;
}

Matrix boundary_penalty_grad(const InducingSet& inducing, const Bounds& bounds) {
  Matrix g = Matrix::Zero(inducing.size(), inducing.Xp.cols());
  for (Index i = 0; i < inducing.size(); ++i) {
    for (Index d = 0; d < inducing.Xp.cols(); ++d) {
      const double x = inducing.Xp(i, d);
      g(i, d) = -2.0 * std::max(0.0, bounds.lower(d) - x) +
                2.0 * std::max(0.0, x - bounds.upper(d));
    }
  }
  return g;
}

double repulsive_penalty(const InducingSet& inducing, double min_separation) {
  double total = 0.0;
  const Matrix& Xp = inducing.Xp;
  for (Index i = 0; i < Xp.rows(); ++i) {
    for (Index j = i + 1; j < Xp.rows(); ++j) {
      const double gap =
          std::max(0.0, min_separation - (Xp.row(i) - Xp.row(j)).norm());
      total += 2.0 * gap * gap;  // (i, j) and (j, i)
    }
  }
  return total;
}

Matrix repulsive_penalty_grad(const InducingSet& inducing,
                              double min_separation) {
  const Matrix& Xp = inducing.Xp;
  Matrix g = Matrix::Zero(Xp.rows(), Xp.cols());
  for (Index i = 0; i < Xp.rows(); ++i) {
    for (Index j = i + 1; j < Xp.rows(); ++j) {
      const Eigen::RowVectorXd diff = Xp.row(i) - Xp.row(j);
      const double r = diff.norm();
      const double gap = min_separation - r;
      if (gap <= 0.0 || r == 0.0) continue;  // r == 0: no defined direction
      const Eigen::RowVectorXd push = -4.0 * gap * diff / r;
      g.row(i) += push;
      g.row(j) -= push;
    }
  }
  return g;
}

double default_min_separation(const Bounds& bounds, Index count) {
  const double dim = static_cast<double>(bounds.lower.size());
  return 0.5 * std::pow(bounds.volume() / static_cast<double>(count), 1.0 / dim);
}

namespace {

void clamp_to(Matrix& Xp, const Bounds& bounds) {
  for (Index i = 0; i < Xp.rows(); ++i) {
    Xp.row(i) = Xp.row(i)
                    .cwiseMax(bounds.lower.transpose())
                    .cwiseMin(bounds.upper.transpose());
  }
}

// Pairwise projection onto {|x_i - x_j| >= d_min} interleaved with box
// clamping, until neither constraint is violated.
bool repair_feasibility(Matrix& Xp, const Bounds& bounds, bool box,
                        double min_separation, int max_sweeps) {
  const Index p = Xp.rows();
  const Index dim = Xp.cols();
  const double target = min_separation * (1.0 + 1e-6);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    if (box) clamp_to(Xp, bounds);
    bool violated = false;
    if (min_separation > 0.0) {
      for (Index i = 0; i < p; ++i) {
        for (Index j = i + 1; j < p; ++j) {
          Eigen::RowVectorXd diff = Xp.row(i) - Xp.row(j);
          double r = diff.norm();
          if (r >= min_separation) continue;
          violated = true;
          if (r == 0.0) {
            diff = Eigen::RowVectorXd::Zero(dim);
            diff((i + j) % dim) = 1.0;
            r = 1.0;
            Xp.row(i) += 0.5 * target * diff;
            Xp.row(j) -= 0.5 * target * diff;
          } else {
            const double shift = 0.5 * (target - r);
            Xp.row(i) += shift * diff / r;
            Xp.row(j) -= shift * diff / r;
          }
        }
      }
    }
    if (!violated) {
      if (box) clamp_to(Xp, bounds);
      return true;
    }
  }
  if (box) clamp_to(Xp, bounds);
  return false;
}

Vector pack(const Matrix& Xp, const Hyperparams& theta) {
  Vector x(Xp.size() + theta.size());
  x << Eigen::Map<const Vector>(Xp.data(), Xp.size()), theta.log_values();
  return x;
}

}  // namespace

SparseFit fit_sparse(const Dataset& data, Index count,
                     const SparseConfig& config, std::uint64_t seed,
                     int agent_id) {
  data.validate();
  if (count < 1 || count > data.size()) {
    throw InvalidInput("fit_sparse needs 1 <= P <= N");
  }
  const Bounds bounds = Bounds::of(data.X);
  if (((bounds.upper - bounds.lower).array() <= 0.0).any()) {
    throw InvalidInput("local data has zero extent in some coordinate");
  }
  const Index dim = data.dim();
  const double d_min =
      config.min_separation.value_or(default_min_separation(bounds, count));
  if (!(d_min > 0.0)) throw InvalidInput("min separation must be positive");

  const InducingSet start = kmeans_init(data.X, count, seed);
  const Hyperparams theta0 = default_init(data);
  const Index n_inducing = count * dim;

  const Objective objective = [&](const Vector& x, Vector* grad) {
    InducingSet ind{Eigen::Map<const Matrix>(x.data(), count, dim)};
    const Hyperparams theta(x.tail(dim + 2));
    double value = 0.0;
    if (grad == nullptr) {
      value = -elbo(data, ind, theta);
    } else {
      const ElboGradient eg = elbo_with_grad(data, ind, theta);
      value = -eg.value;
      Matrix gx = -eg.d_inducing;
      if (config.boundary_weight != 0.0) {
        gx += config.boundary_weight * boundary_penalty_grad(ind, bounds);
      }
      if (config.repulsive_weight != 0.0) {
        gx += config.repulsive_weight * repulsive_penalty_grad(ind, d_min);
      }
      grad->resize(x.size());
      grad->head(n_inducing) = Eigen::Map<const Vector>(gx.data(), n_inducing);
      grad->tail(dim + 2) = -eg.d_log_theta;
    }
    if (config.boundary_weight != 0.0) {
      value += config.boundary_weight * boundary_penalty(ind, bounds);
    }
    if (config.repulsive_weight != 0.0) {
      value += config.repulsive_weight * repulsive_penalty(ind, d_min);
    }
    return value;
  };

  const OptimizeResult opt =
      minimize_adam(objective, pack(start.Xp, theta0), config.optimizer);

  SparseFit fit;
  fit.min_separation = d_min;
  fit.objective_trace = opt.trace;
  fit.theta = Hyperparams(opt.x.tail(dim + 2));
  fit.inducing.Xp = Eigen::Map<const Matrix>(opt.x.data(), count, dim);

  const bool box = config.boundary_weight != 0.0;
  const double sep = config.repulsive_weight != 0.0 ? d_min : 0.0;
  if (box || sep > 0.0) {
    if (!repair_feasibility(fit.inducing.Xp, bounds, box, sep,
                            config.max_repair_sweeps)) {
      throw InvalidInput("cannot place " + std::to_string(count) +
                         " pseudo-inputs with separation " +
                         std::to_string(d_min) + " inside the local box");
    }
  }

  fit.variational = optimal_variational(data, fit.inducing, fit.theta);
  fit.pseudo = PseudoDataset{fit.inducing.Xp, fit.variational.mean, agent_id};
  return fit;
}

void write_pseudo_csv(std::ostream& out,
                      std::span<const PseudoDataset> payloads) {
  if (payloads.empty()) return;
  const Index dim = payloads.front().dim();
  out << "agent_id";
  for (Index d = 0; d < dim; ++d) out << ",x" << (d + 1);
  out << ",y\n";
  out << std::setprecision(17);
  for (const auto& p : payloads) {
    for (Index i = 0; i < p.size(); ++i) {
      out << p.agent_id;
      for (Index d = 0; d < dim; ++d) out << ',' << p.Xp(i, d);
      out << ',' << p.yp(i) << '\n';
    }
  }
}

void write_pseudo_csv(const std::string& path,
                      std::span<const PseudoDataset> payloads) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open " + path + " for writing");
  write_pseudo_csv(out, payloads);
}

}  // namespace pxpgp
