#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pxpgp/gp_core.hpp"
#include "pxpgp/sparse.hpp"

namespace pxpgp {

/// Undirected communication graph over agents 0..M-1.
class Graph {
 public:
  Graph() = default;
  /// Builds from an edge list. Throws InvalidInput on self-loops or ids out
  /// of range; duplicate edges collapse.
  Graph(int agents, std::span<const std::pair<int, int>> edges);

  int size() const { return static_cast<int>(adjacency_.size()); }
  const std::vector<int>& neighbors(int agent) const {
    return adjacency_.at(static_cast<std::size_t>(agent));
  }
  bool adjacent(int a, int b) const;
  std::size_t edge_count() const;
  std::vector<std::pair<int, int>> edges() const;  // i < j, sorted

  bool connected() const;
  /// Hop distances from `source` (BFS); -1 for unreachable agents.
  std::vector<int> distances_from(int source) const;
  /// Largest eccentricity. Throws InvalidInput on disconnected graphs.
  int diameter() const;

 private:
  std::vector<std::vector<int>> adjacency_;
};

enum class Topology { ring, path, grid, star, complete };

Topology parse_topology(const std::string& name);
std::string to_string(Topology kind);

/// ring/path need M >= 2 (a ring on 2 agents is a single edge), star needs
/// M >= 1 with agent 0 at the center, grid needs a square M.
Graph make_topology(Topology kind, int agents);

/// Random spanning tree plus each remaining pair with probability
/// `extra_edge_probability`. Always connected.
Graph random_connected_graph(int agents, double extra_edge_probability,
                             std::uint64_t seed);

/// Text edge list: one `i j` pair per line, 0-indexed. The agent count is
/// one more than the largest id unless `agents` is given.
void write_edge_list(std::ostream& out, const Graph& graph);
Graph read_edge_list(std::istream& in, int agents = -1);

/// Running totals of simulated traffic.
struct CommLedger {
  std::uint64_t rounds = 0;
  std::uint64_t scalars_sent = 0;
  std::uint64_t messages = 0;
  std::map<std::pair<int, int>, std::uint64_t> edge_messages;  // (from, to)

  void record(int from, int to, std::uint64_t scalars);
  void merge(const CommLedger& other);
};

struct FloodMessage {
  int round = 0;
  int from = 0;
  int to = 0;
  int payload_agent = 0;
  std::uint64_t scalars = 0;
};

struct FloodResult {
  std::vector<std::vector<PseudoDataset>> holdings;  // per agent, by agent_id
  CommLedger ledger;
  int rounds = 0;
  std::vector<FloodMessage> log;
};

/// Synchronous novelty flooding: in each round every agent sends to all of
/// its neighbors the payloads it learned in the previous round (its own in
/// round 1). Rounds continue until every agent holds all M payloads.
/// Throws ProtocolError on duplicate agent ids.
FloodResult flood(const Graph& graph, std::span<const PseudoDataset> payloads);

/// Called once per delivered message with (receiver, sender).
using DeliveryObserver = std::function<void(int receiver, int sender)>;

/// One synchronous neighbor exchange: each agent receives its neighbors'
/// vectors keyed by sender id. Adds 2|E| * length scalars to the ledger.
std::vector<std::map<int, Vector>> exchange(
    const Graph& graph, std::span<const Vector> outbound, CommLedger& ledger,
    const DeliveryObserver& observer = {});

/// Point-to-point send along an edge of `graph`. Throws ProtocolError when
/// the endpoints are not adjacent.
void deliver(const Graph& graph, int from, int to, std::uint64_t scalars,
             CommLedger& ledger);

}  // namespace pxpgp
