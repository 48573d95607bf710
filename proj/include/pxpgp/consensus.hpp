#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pxpgp/gp_core.hpp"
#include "pxpgp/netsim.hpp"
#include "pxpgp/optimizer.hpp"
#include "pxpgp/sparse.hpp"

namespace pxpgp {

enum class Variant { pxpgp, apxgp, gapxgp };

std::string to_string(Variant variant);

/// One agent of the centralized consensus loop. theta and u are in the
/// log-hyperparameter space.
struct AgentState {
  int id = 0;
  Vector theta;
  Vector u;
  double rho = 1.0;
  double lipschitz = 5.0;
  Dataset data_plus;
};

/// Local objective value and gradient at one point.
struct LocalEvaluation {
  double value = 0.0;
  Vector gradient;
};

/// Per-datum NLL on an agent's augmented data, in log-hyperparameters.
Objective local_objective(const Dataset& data_plus);

/// Evaluates `f` at x; evaluation failures become IllConditioned carrying
/// the agent id.
LocalEvaluation evaluate_local(const Objective& f, const Vector& x,
                               int agent_id);

/// v - grad / (L + rho).
Vector proximal_step(const Vector& v, const Vector& grad, double lipschitz,
                     double rho);

/// Center of the penalty rho/2 |theta - z + u|^2 for the scaled dual u.
Vector prox_center(const Vector& z, const Vector& u);

/// theta <- v - grad f(v) / (L + rho) with v = prox_center(z, u): one
/// gradient evaluation. The evaluation at v is returned through `at_v`.
Vector theta_update(const AgentState& agent, const Vector& z,
                    const Objective& f, LocalEvaluation* at_v = nullptr);

/// Coordinatewise mean of theta_i + u_i, summed in ascending agent order.
Vector z_update(std::span<const AgentState> agents);

Vector u_update(const Vector& u, const Vector& theta, const Vector& z);

struct ResidualNorms {
  std::vector<double> primal;  // |theta_i - z_new|
  std::vector<double> dual;    // rho_i |z_new - z_old|
};
ResidualNorms residuals(std::span<const AgentState> agents, const Vector& z_new,
                        const Vector& z_old);

struct Tolerances {
  double primal = 0.0;
  double dual = 0.0;
};
Tolerances tolerances(const Vector& theta, const Vector& z, const Vector& u,
                      double rho, double eps_abs, double eps_rel);

struct RhoRule {
  double beta = 10.0;
  double tau_incr = 2.0;
  double tau_decr = 2.0;
  double rho_min = 1e-3;
  double rho_max = 1e3;
};
double adapt_rho(double rho, double primal_norm, double dual_norm,
                 const RhoRule& rule);

struct ArmijoRule {
  double c = 0.5;
  double tau_lip = 0.5;
  int retries = 10;
};

struct LipschitzSearch {
  double lipschitz = 0.0;
  Vector theta;        // step taken with the returned L
  bool satisfied = false;
  int retries_used = 0;
};

/// Sufficient decrease f(theta) <= f(v) - c |g|^2 / (L + rho), up to a
/// relative rounding slack of 1e-12. While it
/// fails, L <- L / tau_lip and theta is recomputed. A point where f cannot
/// be evaluated counts as a failure.
LipschitzSearch adapt_lipschitz(double lipschitz, double rho, const Vector& v,
                                const LocalEvaluation& at_v, const Objective& f,
                                const ArmijoRule& rule);

/// Local training set for one agent.
///  pxpgp:  local rows plus every shared payload except the agent's own
///  apxgp:  local rows only
///  gapxgp: local rows plus every other agent's payload (raw samples)
/// Throws ProtocolError on duplicate agent ids in `shared`.
Dataset build_augmented(const Dataset& local, int agent_id,
                        std::span<const PseudoDataset> shared, Variant variant);

/// `count` rows drawn without replacement, packaged for the fabric.
PseudoDataset raw_sample_payload(const Dataset& local, Index count,
                                 int agent_id, std::uint64_t seed);

struct AdmmConfig {
  double rho0 = 1.0;
  double lipschitz0 = 5.0;
  int max_iterations = 500;
  double eps_abs = 1e-5;
  double eps_rel = 1e-4;
  bool adapt = true;  // residual balancing for rho and Armijo search for L
  RhoRule rho_rule{};
  ArmijoRule armijo{};

  SparseConfig sparse{};
  std::optional<Index> inducing_count;     // choose_inducing_count() if unset
  std::optional<Index> gapx_sample_count;  // same as the inducing count if unset

  /// Adaptive pxpGP settings (rho 1, L 5, 500 iterations).
  static AdmmConfig pxpgp_defaults();
  /// Baselines: fixed rho 5, L 10, 1000 iterations.
  static AdmmConfig baseline_defaults();
};

struct AgentSnapshot {
  Vector theta;
  Vector u;
  double rho = 0.0;
  double lipschitz = 0.0;
};

struct IterationRecord {
  int iteration = 0;
  Vector z;
  std::vector<double> primal;
  std::vector<double> dual;
  std::vector<double> rho;        // value used for the residuals above
  std::vector<double> lipschitz;  // value used for the theta step
  std::vector<bool> sufficient_decrease;
};

struct ConvergenceReport {
  std::vector<AgentSnapshot> initial;
  std::vector<IterationRecord> history;
  std::vector<AgentSnapshot> final_agents;
  Vector z;           // last consensus value
  Vector z_previous;  // consensus value before the last round
  int iterations = 0;
  bool converged = false;
  int armijo_failures = 0;
  CommLedger setup_ledger;  // pseudo-dataset and warm-start traffic
  CommLedger loop_ledger;   // per-round traffic
  std::uint64_t scalars_communicated() const {
    return setup_ledger.scalars_sent + loop_ledger.scalars_sent;
  }
};

struct CentralizedRun {
  Hyperparams theta;  // z in natural space via Hyperparams
  ConvergenceReport report;
  std::vector<PseudoDataset> shared;
  std::vector<Dataset> augmented;
  std::vector<Vector> warm_start;  // sparse-fit log theta per agent (pxpgp)
};

/// Seed for agent `agent` derived from the run seed.
std::uint64_t agent_seed(std::uint64_t seed, int agent, std::uint64_t stream);

/// Centralized consensus over a star whose hub (node 0) is the coordinator
/// and whose leaves 1..M are the agents; one round uploads theta_i + u_i and
/// broadcasts z, 2 M (D + 2) scalars.
CentralizedRun run_centralized(std::span<const Dataset> datasets,
                               Variant variant, const AdmmConfig& config,
                               std::uint64_t seed);

/// CSV `iter,agent_id,r_norm,s_norm,rho,L`, 17 significant digits.
void write_report_csv(std::ostream& out, const ConvergenceReport& report);

}  // namespace pxpgp
