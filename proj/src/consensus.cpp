#include "pxpgp/consensus.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "pxpgp/errors.hpp"

namespace pxpgp {

namespace {

void check_datasets(std::span<const Dataset> datasets) {
  if (datasets.empty()) throw InvalidInput("need at least one agent dataset");
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    try {
      datasets[i].validate();
    } catch (const InvalidInput& e) {
      throw InvalidInput("agent " + std::to_string(i) + ": " + e.what());
    }
    if (datasets[i].dim() != datasets[0].dim()) {
      throw InvalidInput("agent " + std::to_string(i) +
                         ": input dimension differs from agent 0");
    }
  }
}

AgentSnapshot snapshot(const AgentState& a) {
  return {a.theta, a.u, a.rho, a.lipschitz};
}

}  // namespace

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::pxpgp: return "pxpgp";
    case Variant::apxgp: return "apxgp";
    case Variant::gapxgp: return "gapxgp";
  }
  return "unknown";
}

Objective local_objective(const Dataset& data_plus) {
  const double scale = 1.0 / static_cast<double>(data_plus.size());
  return [&data_plus, scale](const Vector& x, Vector* grad) {
    const Hyperparams theta(x);
    if (grad == nullptr) return scale * nll(data_plus, theta);
    auto vg = nll_with_grad(data_plus, theta);
    *grad = scale * vg.gradient;
    return scale * vg.value;
  };
}

LocalEvaluation evaluate_local(const Objective& f, const Vector& x,
                               int agent_id) {
  LocalEvaluation e;
  e.gradient.resize(x.size());
  try {
    e.value = f(x, &e.gradient);
  } catch (const Error& err) {
    throw IllConditioned("agent " + std::to_string(agent_id) + ": " + err.what());
  }
  if (!std::isfinite(e.value) || !e.gradient.allFinite()) {
    throw IllConditioned("agent " + std::to_string(agent_id) +
                         ": non-finite local objective");
  }
  return e;
}

Vector proximal_step(const Vector& v, const Vector& grad, double lipschitz,
                     double rho) {
  if (!(lipschitz + rho > 0.0)) throw InvalidInput("L + rho must be positive");
  return v - grad / (lipschitz + rho);
}

Vector prox_center(const Vector& z, const Vector& u) { return z - u; }

Vector theta_update(const AgentState& agent, const Vector& z,
                    const Objective& f, LocalEvaluation* at_v) {
  const Vector v = prox_center(z, agent.u);
  LocalEvaluation e = evaluate_local(f, v, agent.id);
  Vector theta = proximal_step(v, e.gradient, agent.lipschitz, agent.rho);
  if (at_v != nullptr) *at_v = std::move(e);
  return theta;
}

Vector z_update(std::span<const AgentState> agents) {
  if (agents.empty()) throw InvalidInput("z_update needs at least one agent");
  Vector sum = Vector::Zero(agents.front().theta.size());
  for (const auto& a : agents) sum += a.theta + a.u;
  return sum / static_cast<double>(agents.size());
}

Vector u_update(const Vector& u, const Vector& theta, const Vector& z) {
  return u + theta - z;
}

ResidualNorms residuals(std::span<const AgentState> agents, const Vector& z_new,
                        const Vector& z_old) {
  ResidualNorms out;
  const double move = (z_new - z_old).norm();
  for (const auto& a : agents) {
    out.primal.push_back((a.theta - z_new).norm());
    out.dual.push_back(a.rho * move);
  }
  return out;
}

Tolerances tolerances(const Vector& theta, const Vector& z, const Vector& u,
                      double rho, double eps_abs, double eps_rel) {
  const double root_n = std::sqrt(static_cast<double>(theta.size()));
  return {root_n * eps_abs + eps_rel * std::max(theta.norm(), z.norm()),
          root_n * eps_abs + eps_rel * (rho * u).norm()};
}

double adapt_rho(double rho, double primal_norm, double dual_norm,
                 const RhoRule& rule) {
  double next = rho;
  if (primal_norm > rule.beta * dual_norm) {
    next = rho * rule.tau_incr;
  } else if (dual_norm > rule.beta * primal_norm) {
    next = rho / rule.tau_decr;
  }
  return std::clamp(next, rule.rho_min, rule.rho_max);
}

LipschitzSearch adapt_lipschitz(double lipschitz, double rho, const Vector& v,
                                const LocalEvaluation& at_v, const Objective& f,
                                const ArmijoRule& rule) {
  const double g2 = at_v.gradient.squaredNorm();
  // Near a stationary point the required decrease drops below the rounding
  // noise of f itself.
  const double slack = 1e-12 * std::max(1.0, std::abs(at_v.value));
  LipschitzSearch out;
  out.lipschitz = lipschitz;
  for (int attempt = 0;; ++attempt) {
    out.theta = proximal_step(v, at_v.gradient, out.lipschitz, rho);
    bool ok = false;
    try {
      const double value = f(out.theta, nullptr);
      ok = std::isfinite(value) &&
           value <= at_v.value - rule.c * g2 / (out.lipschitz + rho) + slack;
    } catch (const Error&) {
      ok = false;
    }
    if (ok) {
      out.satisfied = true;
      out.retries_used = attempt;
      return out;
    }
    if (attempt >= rule.retries) {
      out.retries_used = attempt;
      return out;
    }
    out.lipschitz /= rule.tau_lip;
  }
}

Dataset build_augmented(const Dataset& local, int agent_id,
                        std::span<const PseudoDataset> shared, Variant variant) {
  std::set<int> ids;
  for (const auto& p : shared) {
    if (!ids.insert(p.agent_id).second) {
      throw ProtocolError("duplicate shared payload from agent " +
                          std::to_string(p.agent_id));
    }
  }
  if (variant == Variant::apxgp) return local;
  if (variant == Variant::pxpgp && shared.empty()) {
    throw InvalidInput("pxpgp augmentation needs the shared pseudo-datasets");
  }
  Index rows = local.size();
  for (const auto& p : shared) {
    if (p.agent_id == agent_id) continue;
    if (p.dim() != local.dim()) {
      throw ProtocolError("payload from agent " + std::to_string(p.agent_id) +
                          " has the wrong input dimension");
    }
    rows += p.size();
  }
  Dataset out;
  out.X.resize(rows, local.dim());
  out.y.resize(rows);
  out.X.topRows(local.size()) = local.X;
  out.y.head(local.size()) = local.y;
  Index at = local.size();
  for (const auto& p : shared) {
    if (p.agent_id == agent_id) continue;
    out.X.middleRows(at, p.size()) = p.Xp;
    out.y.segment(at, p.size()) = p.yp;
    at += p.size();
  }
  return out;
}

PseudoDataset raw_sample_payload(const Dataset& local, Index count,
                                 int agent_id, std::uint64_t seed) {
  if (count < 0 || count > local.size()) {
    throw InvalidInput("sample count " + std::to_string(count) +
                       " exceeds the local dataset size " +
                       std::to_string(local.size()));
  }
  std::vector<Index> rows(static_cast<std::size_t>(local.size()));
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (Index k = 0; k < count; ++k) {
    std::uniform_int_distribution<Index> pick(k, local.size() - 1);
    std::swap(rows[static_cast<std::size_t>(k)],
              rows[static_cast<std::size_t>(pick(rng))]);
  }
  rows.resize(static_cast<std::size_t>(count));
  const Dataset chosen = local.subset(rows);
  return {chosen.X, chosen.y, agent_id};
}

AdmmConfig AdmmConfig::pxpgp_defaults() { return AdmmConfig{}; }

AdmmConfig AdmmConfig::baseline_defaults() {
  AdmmConfig c;
  c.rho0 = 5.0;
  c.lipschitz0 = 10.0;
  c.max_iterations = 1000;
  c.adapt = false;
  return c;
}

std::uint64_t agent_seed(std::uint64_t seed, int agent, std::uint64_t stream) {
  // splitmix64 finalizer over the packed triple
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL +
                    static_cast<std::uint64_t>(agent) * 0xbf58476d1ce4e5b9ULL +
                    stream * 0x94d049bb133111ebULL;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

CentralizedRun run_centralized(std::span<const Dataset> datasets,
                               Variant variant, const AdmmConfig& config,
                               std::uint64_t seed) {
  check_datasets(datasets);
  const int m = static_cast<int>(datasets.size());
  const Index n_theta = datasets[0].dim() + 2;
  const auto theta_scalars = static_cast<std::uint64_t>(n_theta);
  // Node 0 is the coordinator, agent i sits at node i + 1.
  const Graph star = make_topology(Topology::star, m + 1);

  CentralizedRun run;
  ConvergenceReport& report = run.report;

  for (int i = 0; i < m; ++i) {
    const Dataset& local = datasets[static_cast<std::size_t>(i)];
    const Index p = config.inducing_count.value_or(
        choose_inducing_count(local.size(), m));
    if (variant == Variant::pxpgp) {
      SparseFit fit = fit_sparse(local, std::min(p, local.size()),
                                 config.sparse, agent_seed(seed, i, 1), i);
      run.warm_start.push_back(fit.theta.log_values());
      run.shared.push_back(std::move(fit.pseudo));
    } else if (variant == Variant::gapxgp) {
      const Index count =
          std::min(config.gapx_sample_count.value_or(p), local.size());
      run.shared.push_back(
          raw_sample_payload(local, count, i, agent_seed(seed, i, 2)));
    }
  }
  for (const auto& payload : run.shared) {
    deliver(star, payload.agent_id + 1, 0, payload.scalar_count(),
            report.setup_ledger);
  }
  for (int i = 0; i < m; ++i) {
    for (const auto& payload : run.shared) {
      if (payload.agent_id == i) continue;
      deliver(star, 0, i + 1, payload.scalar_count(), report.setup_ledger);
    }
  }

  std::vector<AgentState> agents(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    AgentState& a = agents[static_cast<std::size_t>(i)];
    a.id = i;
    a.data_plus = build_augmented(datasets[static_cast<std::size_t>(i)], i,
                                  run.shared, variant);
    a.theta = variant == Variant::pxpgp
                  ? run.warm_start[static_cast<std::size_t>(i)]
                  : default_init(datasets[static_cast<std::size_t>(i)]).log_values();
    a.u = Vector::Zero(n_theta);
    a.rho = config.rho0;
    a.lipschitz = config.lipschitz0;
    report.initial.push_back(snapshot(a));
  }
  // Objectives capture data_plus by reference; agents no longer move.
  std::vector<Objective> objectives;
  for (const auto& a : agents) objectives.push_back(local_objective(a.data_plus));

  for (int i = 0; i < m; ++i) deliver(star, i + 1, 0, theta_scalars, report.setup_ledger);
  Vector z = z_update(agents);
  for (int i = 0; i < m; ++i) deliver(star, 0, i + 1, theta_scalars, report.setup_ledger);
  ++report.setup_ledger.rounds;
  Vector z_previous = z;

  for (int s = 1; s <= config.max_iterations; ++s) {
    IterationRecord record;
    record.iteration = s;
    for (auto& a : agents) {
      const Objective& f = objectives[static_cast<std::size_t>(a.id)];
      LocalEvaluation at_v;
      Vector theta = theta_update(a, z, f, &at_v);
      bool ok = true;
      if (config.adapt) {
        LipschitzSearch search =
            adapt_lipschitz(a.lipschitz, a.rho, prox_center(z, a.u), at_v, f,
                            config.armijo);
        a.lipschitz = search.lipschitz;
        theta = std::move(search.theta);
        ok = search.satisfied;
        if (!ok) ++report.armijo_failures;
      }
      a.theta = std::move(theta);
      record.lipschitz.push_back(a.lipschitz);
      record.sufficient_decrease.push_back(ok);
    }
    for (int i = 0; i < m; ++i) deliver(star, i + 1, 0, theta_scalars, report.loop_ledger);
    const Vector z_new = z_update(agents);
    for (int i = 0; i < m; ++i) deliver(star, 0, i + 1, theta_scalars, report.loop_ledger);
    ++report.loop_ledger.rounds;

    for (auto& a : agents) a.u = u_update(a.u, a.theta, z_new);
    const ResidualNorms res = residuals(agents, z_new, z);
    bool all_within = true;
    for (const auto& a : agents) {
      const auto k = static_cast<std::size_t>(a.id);
      const Tolerances tol =
          tolerances(a.theta, z_new, a.u, a.rho, config.eps_abs, config.eps_rel);
      all_within = all_within && res.primal[k] <= tol.primal &&
                   res.dual[k] <= tol.dual;
      record.rho.push_back(a.rho);
    }
    record.primal = res.primal;
    record.dual = res.dual;
    record.z = z_new;
    report.history.push_back(std::move(record));
    report.iterations = s;
    z_previous = z;
    z = z_new;
    if (all_within) {
      report.converged = true;
      break;
    }
    if (config.adapt) {
      for (auto& a : agents) {
        const auto k = static_cast<std::size_t>(a.id);
        const double next = adapt_rho(a.rho, res.primal[k], res.dual[k], config.rho_rule);
        // u is the dual scaled by 1/rho; keep the unscaled dual fixed.
        a.u *= a.rho / next;
        a.rho = next;
      }
    }
  }

  for (const auto& a : agents) report.final_agents.push_back(snapshot(a));
  report.z = z;
  report.z_previous = z_previous;
  run.theta = Hyperparams(z);
  for (auto& a : agents) run.augmented.push_back(std::move(a.data_plus));
  return run;
}

void write_report_csv(std::ostream& out, const ConvergenceReport& report) {
  out << "iter,agent_id,r_norm,s_norm,rho,L\n" << std::setprecision(17);
  for (const auto& rec : report.history) {
    for (std::size_t i = 0; i < rec.primal.size(); ++i) {
      out << rec.iteration << ',' << i << ',' << rec.primal[i] << ','
          << rec.dual[i] << ',' << rec.rho[i] << ',' << rec.lipschitz[i] << '\n';
    }
  }
}

}  // namespace pxpgp
