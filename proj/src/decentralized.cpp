#include "pxpgp/decentralized.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

#include "pxpgp/errors.hpp"

namespace pxpgp {

namespace {

void check_neighbors(const DecAgentState& agent,
                     std::span<const Vector> neighbor_thetas) {
  if (neighbor_thetas.size() != agent.neighbors.size()) {
    throw ProtocolError("agent " + std::to_string(agent.id) + " expected " +
                        std::to_string(agent.neighbors.size()) +
                        " neighbor values, got " +
                        std::to_string(neighbor_thetas.size()));
  }
}

Vector neighbor_sum(std::span<const Vector> neighbor_thetas, Index n) {
  Vector sum = Vector::Zero(n);
  for (const auto& t : neighbor_thetas) sum += t;
  return sum;
}

Vector mean_of(std::span<const Vector> thetas) {
  Vector sum = Vector::Zero(thetas.front().size());
  for (const auto& t : thetas) sum += t;
  return sum / static_cast<double>(thetas.size());
}

}  // namespace

Vector dec_theta_update(const DecAgentState& agent,
                        std::span<const Vector> neighbor_thetas,
                        const Vector& grad) {
  check_neighbors(agent, neighbor_thetas);
  const double degree = static_cast<double>(neighbor_thetas.size());
  const Vector sum = neighbor_sum(neighbor_thetas, agent.theta.size());
  return (agent.rho * sum - grad - agent.alpha +
          (agent.rho * degree + agent.lipschitz) * agent.theta) /
         (agent.lipschitz + 2.0 * agent.rho * degree);
}

Vector dec_alpha_update(const DecAgentState& agent,
                        std::span<const Vector> neighbor_thetas,
                        const Vector& theta) {
  check_neighbors(agent, neighbor_thetas);
  const double degree = static_cast<double>(neighbor_thetas.size());
  return agent.alpha +
         agent.rho * (degree * theta - neighbor_sum(neighbor_thetas, theta.size()));
}

Objective dec_local_objective(const Objective& f, const DecAgentState& agent,
                              std::span<const Vector> neighbor_thetas) {
  check_neighbors(agent, neighbor_thetas);
  std::vector<Vector> midpoints;
  for (const auto& t : neighbor_thetas) midpoints.push_back(0.5 * (agent.theta + t));
  return [f, alpha = agent.alpha, rho = agent.rho,
          midpoints = std::move(midpoints)](const Vector& x, Vector* grad) {
    double value = f(x, grad) + alpha.dot(x);
    if (grad != nullptr) *grad += alpha;
    for (const auto& m : midpoints) {
      value += rho * (x - m).squaredNorm();
      if (grad != nullptr) *grad += 2.0 * rho * (x - m);
    }
    return value;
  };
}

double consensus_spread(std::span<const Vector> thetas) {
  double worst = 0.0;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    for (std::size_t j = i + 1; j < thetas.size(); ++j) {
      worst = std::max(worst, (thetas[i] - thetas[j]).norm());
    }
  }
  return worst;
}

DecentralizedRun run_decentralized(std::span<const Dataset> datasets,
                                   const Graph& graph, Variant variant,
                                   const DecConfig& config, std::uint64_t seed,
                                   const DeliveryObserver& observer) {
  const int m = static_cast<int>(datasets.size());
  if (m < 2) throw InvalidInput("decentralized training needs at least two agents");
  if (graph.size() != m) {
    throw InvalidInput("graph has " + std::to_string(graph.size()) +
                       " agents but " + std::to_string(m) + " datasets were given");
  }
  if (!graph.connected()) throw InvalidInput("communication graph is not connected");
  for (int i = 0; i < m; ++i) {
    datasets[static_cast<std::size_t>(i)].validate();
    if (datasets[static_cast<std::size_t>(i)].dim() != datasets[0].dim()) {
      throw InvalidInput("agent " + std::to_string(i) +
                         ": input dimension differs from agent 0");
    }
  }
  const AdmmConfig& admm = config.admm;
  const Index n_theta = datasets[0].dim() + 2;

  DecentralizedRun run;
  ConvergenceReport& report = run.report;

  for (int i = 0; i < m; ++i) {
    const Dataset& local = datasets[static_cast<std::size_t>(i)];
    const Index p = std::min(
        admm.inducing_count.value_or(choose_inducing_count(local.size(), m)),
        local.size());
    if (variant == Variant::pxpgp) {
      SparseFit fit = fit_sparse(local, p, admm.sparse, agent_seed(seed, i, 1), i);
      run.warm_start.push_back(fit.theta.log_values());
      run.shared.push_back(std::move(fit.pseudo));
    } else if (variant == Variant::gapxgp) {
      const Index count = std::min(admm.gapx_sample_count.value_or(p), local.size());
      run.shared.push_back(
          raw_sample_payload(local, count, i, agent_seed(seed, i, 2)));
    }
  }

  std::vector<std::vector<PseudoDataset>> holdings(static_cast<std::size_t>(m));
  if (!run.shared.empty()) {
    FloodResult flooded = flood(graph, run.shared);
    report.setup_ledger = flooded.ledger;
    run.flood_rounds = flooded.rounds;
    holdings = std::move(flooded.holdings);
  }

  std::vector<DecAgentState> agents(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    DecAgentState& a = agents[static_cast<std::size_t>(i)];
    const Dataset& local = datasets[static_cast<std::size_t>(i)];
    a.id = i;
    a.neighbors = graph.neighbors(i);
    a.data_plus = build_augmented(local, i, holdings[static_cast<std::size_t>(i)],
                                  variant);
    a.theta = variant == Variant::pxpgp ? run.warm_start[static_cast<std::size_t>(i)]
                                        : default_init(local).log_values();
    a.alpha = Vector::Zero(n_theta);
    a.rho = admm.rho0;
    a.lipschitz = admm.lipschitz0;
    report.initial.push_back({a.theta, a.alpha, a.rho, a.lipschitz});
  }
  std::vector<Objective> objectives;
  for (const auto& a : agents) objectives.push_back(local_objective(a.data_plus));

  std::vector<Vector> current(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) current[static_cast<std::size_t>(i)] = agents[static_cast<std::size_t>(i)].theta;
  Vector z = mean_of(current);
  int quiet_rounds = 0;

  for (int s = 1; s <= admm.max_iterations; ++s) {
    const auto inbound = exchange(graph, current, report.loop_ledger, observer);
    IterationRecord record;
    record.iteration = s;
    std::vector<Vector> next(static_cast<std::size_t>(m));
    bool all_quiet = true;

    for (auto& a : agents) {
      const auto& received = inbound[static_cast<std::size_t>(a.id)];
      std::vector<Vector> nbr;
      for (int j : a.neighbors) {
        const auto it = received.find(j);
        if (it == received.end()) {
          throw ProtocolError("agent " + std::to_string(a.id) +
                              " did not receive from neighbor " + std::to_string(j));
        }
        nbr.push_back(it->second);
      }
      if (received.size() != nbr.size()) {
        throw ProtocolError("agent " + std::to_string(a.id) +
                            " received from a non-neighbor");
      }
      const double degree = static_cast<double>(nbr.size());
      const Vector sum = neighbor_sum(nbr, n_theta);
      const double primal = (degree * a.theta - sum).norm();

      a.alpha = dec_alpha_update(a, nbr, a.theta);

      const LocalEvaluation local =
          evaluate_local(objectives[static_cast<std::size_t>(a.id)], a.theta, a.id);
      Vector theta;
      bool ok = true;
      if (admm.adapt) {
        const Objective phi =
            dec_local_objective(objectives[static_cast<std::size_t>(a.id)], a, nbr);
        LocalEvaluation at_theta;
        at_theta.value = local.value + a.alpha.dot(a.theta) +
                         0.25 * a.rho * [&] {
                           double acc = 0.0;
                           for (const auto& t : nbr) acc += (a.theta - t).squaredNorm();
                           return acc;
                         }();
        at_theta.gradient =
            local.gradient + a.alpha + a.rho * (degree * a.theta - sum);
        LipschitzSearch search = adapt_lipschitz(
            a.lipschitz, 2.0 * a.rho * degree, a.theta, at_theta, phi, admm.armijo);
        a.lipschitz = search.lipschitz;
        theta = std::move(search.theta);
        ok = search.satisfied;
        if (!ok) ++report.armijo_failures;
      } else {
        theta = dec_theta_update(a, nbr, local.gradient);
      }
      const double dual = a.rho * (theta - a.theta).norm() * degree;

      record.primal.push_back(primal);
      record.dual.push_back(dual);
      record.rho.push_back(a.rho);
      record.lipschitz.push_back(a.lipschitz);
      record.sufficient_decrease.push_back(ok);

      const Tolerances tol = tolerances(theta, sum / degree, a.alpha / a.rho, a.rho,
                                        admm.eps_abs, admm.eps_rel);
      all_quiet = all_quiet && primal <= tol.primal && dual <= tol.dual;
      next[static_cast<std::size_t>(a.id)] = theta;
    }

    for (auto& a : agents) {
      a.theta = next[static_cast<std::size_t>(a.id)];
      if (admm.adapt && config.adapt_rho) {
        const auto k = static_cast<std::size_t>(a.id);
        a.rho = adapt_rho(a.rho, record.primal[k], record.dual[k], admm.rho_rule);
      }
    }
    current = std::move(next);
    report.z_previous = z;
    z = mean_of(current);
    record.z = z;
    report.history.push_back(std::move(record));
    report.iterations = s;

    quiet_rounds = all_quiet ? quiet_rounds + 1 : 0;
    if (config.early_stop && quiet_rounds >= config.early_stop_rounds) {
      report.converged = true;
      break;
    }
  }

  for (const auto& a : agents) {
    report.final_agents.push_back({a.theta, a.alpha, a.rho, a.lipschitz});
    run.thetas.emplace_back(a.theta);
  }
  report.z = z;
  if (report.iterations == 0) report.z_previous = z;
  run.theta = Hyperparams(z);
  run.spread = consensus_spread(current);
  for (auto& a : agents) run.augmented.push_back(std::move(a.data_plus));
  return run;
}

void write_agent_thetas_csv(std::ostream& out,
                            std::span<const Hyperparams> thetas) {
  if (thetas.empty()) return;
  out << "agent_id";
  for (Index d = 0; d < thetas.front().input_dim(); ++d) out << ",l" << (d + 1);
  out << ",sigma_f,sigma_eps\n" << std::setprecision(17);
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    out << i;
    const Vector natural = thetas[i].natural_values();
    for (Index k = 0; k < natural.size(); ++k) out << ',' << natural(k);
    out << '\n';
  }
}

}  // namespace pxpgp
