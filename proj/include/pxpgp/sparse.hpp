#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pxpgp/gp_core.hpp"
#include "pxpgp/optimizer.hpp"

namespace pxpgp {

/// Pseudo-input locations, one row per inducing point (P x D).
struct InducingSet {
  Matrix Xp;

  Index size() const { return Xp.rows(); }
};

/// Optimal Gaussian q(f_P) = N(mean, covariance) of the collapsed bound.
struct VariationalState {
  Vector mean;
  Matrix covariance;
};

/// The compact summary an agent shares: pseudo-inputs and pseudo-outputs.
struct PseudoDataset {
  Matrix Xp;
  Vector yp;
  int agent_id = 0;

  Index size() const { return yp.size(); }
  Index dim() const { return Xp.cols(); }
  Dataset as_dataset() const { return Dataset{Xp, yp}; }
  /// Message size on the wire: P (D + 1) values plus the id.
  std::uint64_t scalar_count() const {
    return static_cast<std::uint64_t>(size() * (dim() + 1) + 1);
  }
};

/// Axis-aligned box of a local dataset.
struct Bounds {
  Vector lower;
  Vector upper;

  static Bounds of(const Matrix& X);
  double volume() const { return (upper - lower).prod(); }
  bool contains(const Eigen::Ref<const Vector>& x, double slack = 0.0) const;
};

/// k-means++ seeding followed by Lloyd iterations (at most 100, stop when no
/// centroid moves more than 1e-6). Deterministic for a given seed.
InducingSet kmeans_init(const Matrix& X, Index count, std::uint64_t seed);

/// max(floor(N_i / M), 4), clamped to N_i.
Index choose_inducing_count(Index local_size, Index agents);

/// Collapsed variational lower bound on log p(y):
///   log N(y | 0, Q_nn + s^2 I) - tr(K_nn - Q_nn) / (2 s^2).
double elbo(const Dataset& data, const InducingSet& inducing,
            const Hyperparams& theta);

struct ElboGradient {
  double value = 0.0;
  Matrix d_inducing;   // P x D
  Vector d_log_theta;  // D + 2
};
ElboGradient elbo_with_grad(const Dataset& data, const InducingSet& inducing,
                            const Hyperparams& theta);

/// Closed-form optimal q(f_P) for the collapsed bound.
VariationalState optimal_variational(const Dataset& data,
                                     const InducingSet& inducing,
                                     const Hyperparams& theta);

double boundary_penalty(const InducingSet& inducing, const Bounds& bounds);
Matrix boundary_penalty_grad(const InducingSet& inducing, const Bounds& bounds);

/// Sum over ordered pairs i != j of ReLU(d_min - |x_i - x_j|)^2.
double repulsive_penalty(const InducingSet& inducing, double min_separation);
Matrix repulsive_penalty_grad(const InducingSet& inducing,
                              double min_separation);

/// Half the spacing of a uniform grid of P points over the box.
double default_min_separation(const Bounds& bounds, Index count);

struct SparseConfig {
  AdamOptions optimizer{};
  double boundary_weight = 1.0;
  double repulsive_weight = 1.0;
  std::optional<double> min_separation;  // default_min_separation() if unset
  double feasibility_tolerance = 1e-6;
  int max_repair_sweeps = 2000;
};

struct SparseFit {
  PseudoDataset pseudo;
  Hyperparams theta;
  VariationalState variational;
  InducingSet inducing;
  std::vector<double> objective_trace;
  double min_separation = 0.0;
};

/// Jointly fits pseudo-inputs and hyperparameters on one agent's data by
/// minimizing -elbo + w_b L_b + w_r L_r, then moves any point still violating
/// the box or the separation constraint back to feasibility. Pseudo-outputs
/// are the optimal variational mean at the final inputs.
SparseFit fit_sparse(const Dataset& data, Index count,
                     const SparseConfig& config, std::uint64_t seed,
                     int agent_id = 0);

/// CSV with header `agent_id,x1..xD,y`, 17 significant digits.
void write_pseudo_csv(std::ostream& out,
                      std::span<const PseudoDataset> payloads);
void write_pseudo_csv(const std::string& path,
                      std::span<const PseudoDataset> payloads);

}  // namespace pxpgp
