#include "pxpgp/netsim.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <queue>
#include <random>
#include <set>
#include <sstream>

#include "pxpgp/errors.hpp"

namespace pxpgp {

Graph::Graph(int agents, std::span<const std::pair<int, int>> edges) {
  if (agents < 1) throw InvalidInput("graph needs at least one agent");
  adjacency_.assign(static_cast<std::size_t>(agents), {});
  for (const auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= agents || b >= agents) {
      throw InvalidInput("edge (" + std::to_string(a) + ", " +
                         std::to_string(b) + ") references an unknown agent");
    }
    if (a == b) throw InvalidInput("self-loop on agent " + std::to_string(a));
    adjacency_[static_cast<std::size_t>(a)].push_back(b);
    adjacency_[static_cast<std::size_t>(b)].push_back(a);
  }
  for (auto& list : adjacency_) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
}

bool Graph::adjacent(int a, int b) const {
  const auto& list = neighbors(a);
  return std::binary_search(list.begin(), list.end(), b);
}

std::size_t Graph::edge_count() const {
  std::size_t degree_sum = 0;
  for (const auto& list : adjacency_) degree_sum += list.size();
  return degree_sum / 2;
}

std::vector<std::pair<int, int>> Graph::edges() const {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < size(); ++i) {
    for (int j : neighbors(i)) {
      if (i < j) out.emplace_back(i, j);
    }
  }
  return out;
}

std::vector<int> Graph::distances_from(int source) const {
  std::vector<int> dist(adjacency_.size(), -1);
  std::queue<int> frontier;
  dist.at(static_cast<std::size_t>(source)) = 0;
  frontier.push(source);
  while (!frontier.empty()) {
    const int u = frontier.front();
    frontier.pop();
    for (int v : neighbors(u)) {
      if (dist[static_cast<std::size_t>(v)] < 0) {
        dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
        frontier.push(v);
      }
    }
  }
  return dist;
}

bool Graph::connected() const {
  if (adjacency_.empty()) return false;
  const auto dist = distances_from(0);
  return std::none_of(dist.begin(), dist.end(), [](int d) { return d < 0; });
}

int Graph::diameter() const {
  int best = 0;
  for (int s = 0; s < size(); ++s) {
    for (int d : distances_from(s)) {
      if (d < 0) throw InvalidInput("diameter of a disconnected graph");
      best = std::max(best, d);
    }
  }
  return best;
}

Topology parse_topology(const std::string& name) {
  if (name == "ring") return Topology::ring;
  if (name == "path") return Topology::path;
  if (name == "grid") return Topology::grid;
  if (name == "star") return Topology::star;
  if (name == "complete") return Topology::complete;
  throw InvalidInput("unknown topology '" + name + "'");
}

std::string to_string(Topology kind) {
  switch (kind) {
    case Topology::ring: return "ring";
    case Topology::path: return "path";
    case Topology::grid: return "grid";
    case Topology::star: return "star";
    case Topology::complete: return "complete";
  }
  return "unknown";
}

Graph make_topology(Topology kind, int agents) {
  const int minimum = kind == Topology::star ? 1 : 2;
  if (agents < minimum) {
    throw InvalidInput(to_string(kind) + " topology needs at least " +
                       std::to_string(minimum) + " agents");
  }
  std::vector<std::pair<int, int>> edges;
  switch (kind) {
    case Topology::ring:
      for (int i = 0; i < agents; ++i) edges.emplace_back(i, (i + 1) % agents);
      break;
    case Topology::path:
      for (int i = 0; i + 1 < agents; ++i) edges.emplace_back(i, i + 1);
      break;
    case Topology::star:
      for (int i = 1; i < agents; ++i) edges.emplace_back(0, i);
      break;
    case Topology::complete:
      for (int i = 0; i < agents; ++i) {
        for (int j = i + 1; j < agents; ++j) edges.emplace_back(i, j);
      }
      break;
    case Topology::grid: {
      const int side = static_cast<int>(std::lround(std::sqrt(agents)));
      if (side * side != agents) {
        throw InvalidInput("grid topology needs a square agent count, got " +
                           std::to_string(agents));
      }
      for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
          const int id = r * side + c;
          if (c + 1 < side) edges.emplace_back(id, id + 1);
          if (r + 1 < side) edges.emplace_back(id, id + side);
        }
      }
      break;
    }
  }
  return Graph(agents, edges);
}

Graph random_connected_graph(int agents, double extra_edge_probability,
                             std::uint64_t seed) {
  if (agents < 1) throw InvalidInput("graph needs at least one agent");
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(agents));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::set<std::pair<int, int>> edges;
  auto add = [&](int a, int b) { edges.emplace(std::min(a, b), std::max(a, b)); };
  for (std::size_t k = 1; k < order.size(); ++k) {
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    add(order[k], order[pick(rng)]);
  }
  std::bernoulli_distribution extra(extra_edge_probability);
  for (int i = 0; i < agents; ++i) {
    for (int j = i + 1; j < agents; ++j) {
      if (extra(rng)) add(i, j);
    }
  }
  const std::vector<std::pair<int, int>> list(edges.begin(), edges.end());
  return Graph(agents, list);
}

void write_edge_list(std::ostream& out, const Graph& graph) {
  for (const auto& [i, j] : graph.edges()) out << i << ' ' << j << '\n';
}

Graph read_edge_list(std::istream& in, int agents) {
  std::vector<std::pair<int, int>> edges;
  std::string line;
  std::size_t line_number = 0;
  int largest = -1;
  while (std::getline(in, line)) {
    ++line_number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    int a = 0, b = 0;
    std::string rest;
    if (!(fields >> a >> b) || (fields >> rest)) {
      throw ParseError("expected two agent ids", line_number);
    }
    if (a < 0 || b < 0) throw ParseError("negative agent id", line_number);
    largest = std::max({largest, a, b});
    edges.emplace_back(a, b);
  }
  return Graph(agents > 0 ? agents : largest + 1, edges);
}

void CommLedger::record(int from, int to, std::uint64_t scalars) {
  scalars_sent += scalars;
  ++messages;
  ++edge_messages[{from, to}];
}

void CommLedger::merge(const CommLedger& other) {
  rounds += other.rounds;
  scalars_sent += other.scalars_sent;
  messages += other.messages;
  for (const auto& [edge, count] : other.edge_messages) {
    edge_messages[edge] += count;
  }
}

FloodResult flood(const Graph& graph, std::span<const PseudoDataset> payloads) {
  const int m = graph.size();
  if (static_cast<int>(payloads.size()) != m) {
    throw ProtocolError("flood needs one payload per agent");
  }
  // Payloads are identified by agent_id; map ids to payload slots.
  std::map<int, std::size_t> slot;
  for (std::size_t k = 0; k < payloads.size(); ++k) {
    if (!slot.emplace(payloads[k].agent_id, k).second) {
      throw ProtocolError("duplicate payload agent_id " +
                          std::to_string(payloads[k].agent_id));
    }
  }

  std::vector<std::set<int>> known(static_cast<std::size_t>(m));
  std::vector<std::vector<int>> fresh(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    const int id = payloads[static_cast<std::size_t>(a)].agent_id;
    known[static_cast<std::size_t>(a)].insert(id);
    fresh[static_cast<std::size_t>(a)].push_back(id);
  }
  auto complete = [&] {
    return std::all_of(known.begin(), known.end(),
                       [&](const std::set<int>& s) {
                         return static_cast<int>(s.size()) == m;
                       });
  };

  FloodResult result;
  while (!complete()) {
    if (result.rounds > m) {
      throw ProtocolError("flooding did not complete; graph is disconnected");
    }
    ++result.rounds;
    // Sends are buffered and delivered at the round barrier.
    std::vector<std::vector<int>> next(static_cast<std::size_t>(m));
    for (int a = 0; a < m; ++a) {
      for (int id : fresh[static_cast<std::size_t>(a)]) {
        const std::uint64_t scalars = payloads[slot.at(id)].scalar_count();
        for (int b : graph.neighbors(a)) {
          result.ledger.record(a, b, scalars);
          result.log.push_back({result.rounds, a, b, id, scalars});
          if (known[static_cast<std::size_t>(b)].insert(id).second) {
            next[static_cast<std::size_t>(b)].push_back(id);
          }
        }
      }
    }
    for (auto& list : next) std::sort(list.begin(), list.end());
    fresh = std::move(next);
  }
  result.ledger.rounds = static_cast<std::uint64_t>(result.rounds);

  result.holdings.resize(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    for (int id : known[static_cast<std::size_t>(a)]) {
      result.holdings[static_cast<std::size_t>(a)].push_back(payloads[slot.at(id)]);
    }
  }
  return result;
}

std::vector<std::map<int, Vector>> exchange(const Graph& graph,
                                            std::span<const Vector> outbound,
                                            CommLedger& ledger,
                                            const DeliveryObserver& observer) {
  const int m = graph.size();
  if (static_cast<int>(outbound.size()) != m) {
    throw ProtocolError("exchange needs one outbound vector per agent");
  }
  std::vector<std::map<int, Vector>> inbound(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    const Vector& message = outbound[static_cast<std::size_t>(a)];
    for (int b : graph.neighbors(a)) {
      ledger.record(a, b, static_cast<std::uint64_t>(message.size()));
      inbound[static_cast<std::size_t>(b)].emplace(a, message);
      if (observer) observer(b, a);
    }
  }
  ++ledger.rounds;
  return inbound;
}

void deliver(const Graph& graph, int from, int to, std::uint64_t scalars,
             CommLedger& ledger) {
  if (from < 0 || from >= graph.size() || to < 0 || to >= graph.size() ||
      !graph.adjacent(from, to)) {
    throw ProtocolError("no link from " + std::to_string(from) + " to " +
                        std::to_string(to));
  }
  ledger.record(from, to, scalars);
}

}  // namespace pxpgp
