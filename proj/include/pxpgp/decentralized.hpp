#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pxpgp/consensus.hpp"
#include "pxpgp/netsim.hpp"

namespace pxpgp {

/// One agent of the edge-based decentralized loop (log-hyperparameters).
struct DecAgentState {
  int id = 0;
  Vector theta;
  Vector alpha;
  double rho = 1.0;
  double lipschitz = 5.0;
  std::vector<int> neighbors;
  Dataset data_plus;
};

/// (rho sum_j theta_j - grad - alpha + (rho |N| + L) theta) / (L + 2 rho |N|).
/// Throws ProtocolError when the neighbor count does not match.
Vector dec_theta_update(const DecAgentState& agent,
                        std::span<const Vector> neighbor_thetas,
                        const Vector& grad);

/// alpha + rho (|N| theta - sum_j theta_j).
Vector dec_alpha_update(const DecAgentState& agent,
                        std::span<const Vector> neighbor_thetas,
                        const Vector& theta);

/// Local augmented objective whose plain gradient step from theta_i is the
/// update above with rho_eff = 2 rho |N|:
///   f(x) + alpha^T x + rho sum_j |x - (theta_i + theta_j) / 2|^2.
Objective dec_local_objective(const Objective& f, const DecAgentState& agent,
                              std::span<const Vector> neighbor_thetas);

struct DecConfig {
  AdmmConfig admm = AdmmConfig::pxpgp_defaults();  // max_iterations = s_end
  bool early_stop = false;
  int early_stop_rounds = 10;
  // Per-agent residual balancing makes rho differ across an edge, which breaks
  // sum_i alpha_i = 0 and biases the consensus point. Off by default; the
  // Armijo search on L still runs when admm.adapt is set.
  bool adapt_rho = false;
};

struct DecentralizedRun {
  std::vector<Hyperparams> thetas;  // final per-agent estimates
  Hyperparams theta;                // mean of the agents' log theta
  double spread = 0.0;              // max_ij |theta_i - theta_j| in log space
  ConvergenceReport report;         // z holds the agent mean per round
  std::vector<PseudoDataset> shared;
  std::vector<Dataset> augmented;
  std::vector<Vector> warm_start;
  int flood_rounds = 0;
};

/// Log-space max pairwise distance.
double consensus_spread(std::span<const Vector> thetas);

/// Decentralized training over `graph`: sparse fits (pxpgp) or raw samples
/// (gapxgp) are flooded, then each round agents exchange theta with their
/// neighbors, update alpha, then theta, then adapt rho and L. Reads of other
/// agents' state go through netsim::exchange; `observer` sees each delivery.
DecentralizedRun run_decentralized(std::span<const Dataset> datasets,
                                   const Graph& graph, Variant variant,
                                   const DecConfig& config, std::uint64_t seed,
                                   const DeliveryObserver& observer = {});

/// CSV `agent_id,l1..lD,sigma_f,sigma_eps`, natural values.
void write_agent_thetas_csv(std::ostream& out,
                            std::span<const Hyperparams> thetas);

}  // namespace pxpgp
