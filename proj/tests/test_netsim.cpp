#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "pxpgp/errors.hpp"
#include "pxpgp/netsim.hpp"

using namespace pxpgp;

namespace {

std::vector<PseudoDataset> payloads_for(int m, Index points, Index dim) {
  std::vector<PseudoDataset> out;
  for (int a = 0; a < m; ++a) {
    PseudoDataset p;
    p.Xp = Matrix::Constant(points + a % 3, dim, a);
    p.yp = Vector::Constant(points + a % 3, -a);
    p.agent_id = a;
    out.push_back(p);
  }
  return out;
}

std::vector<std::size_t> degrees(const Graph& g) {
  std::vector<std::size_t> d;
  for (int i = 0; i < g.size(); ++i) d.push_back(g.neighbors(i).size());
  return d;
}

// Eccentricity by repeated neighbor expansion on the adjacency matrix, kept
// independent of Graph::distances_from.
int diameter_oracle(const Graph& g) {
  const int m = g.size();
  int worst = 0;
  for (int s = 0; s < m; ++s) {
    std::vector<bool> reached(static_cast<std::size_t>(m), false);
    reached[static_cast<std::size_t>(s)] = true;
    int steps = 0;
    while (std::count(reached.begin(), reached.end(), true) < m) {
      std::vector<bool> next = reached;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
          if (reached[static_cast<std::size_t>(i)] && g.adjacent(i, j)) {
            next[static_cast<std::size_t>(j)] = true;
          }
        }
      }
      ++steps;
      reached = next;
      REQUIRE(steps <= m);
    }
    worst = std::max(worst, steps);
  }
  return worst;
}

}  // namespace

TEST_CASE("topologies") {
  SUBCASE("ring gives every agent two neighbors") {
    const Graph g = make_topology(Topology::ring, 4);
    CHECK(degrees(g) == std::vector<std::size_t>{2, 2, 2, 2});
    CHECK(g.edge_count() == 4);
  }
  SUBCASE("path degree sequence") {
    CHECK(degrees(make_topology(Topology::path, 3)) ==
          std::vector<std::size_t>{1, 2, 1});
  }
  SUBCASE("3x3 grid lattice degrees") {
    const Graph g = make_topology(Topology::grid, 9);
    CHECK(degrees(g) == std::vector<std::size_t>{2, 3, 2, 3, 4, 3, 2, 3, 2});
  }
  SUBCASE("star is centered on agent 0") {
    const Graph g = make_topology(Topology::star, 5);
    CHECK(g.neighbors(0) == std::vector<int>{1, 2, 3, 4});
    CHECK(make_topology(Topology::star, 1).size() == 1);
  }
  SUBCASE("complete graph") {
    CHECK(make_topology(Topology::complete, 6).edge_count() == 15);
  }
  SUBCASE("invalid requests") {
    CHECK_THROWS_AS(make_topology(Topology::grid, 8), InvalidInput);
    CHECK_THROWS_AS(make_topology(Topology::ring, 1), InvalidInput);
    CHECK_THROWS_AS(parse_topology("torus"), InvalidInput);
    const std::vector<std::pair<int, int>> loop{{1, 1}};
    CHECK_THROWS_AS(Graph(3, loop), InvalidInput);
  }
  SUBCASE("adjacency is symmetric and sorted") {
    for (int seed = 0; seed < 20; ++seed) {
      const Graph g = random_connected_graph(2 + seed, 0.1, seed);
      CHECK(g.connected());
      for (int i = 0; i < g.size(); ++i) {
        CHECK(std::is_sorted(g.neighbors(i).begin(), g.neighbors(i).end()));
        for (int j : g.neighbors(i)) {
          CHECK(i != j);
          CHECK(g.adjacent(j, i));
        }
      }
    }
  }
}

TEST_CASE("edge list round trip") {
  const Graph g = make_topology(Topology::grid, 4);
  std::stringstream io;
  write_edge_list(io, g);
  CHECK(io.str() == "0 1\n0 2\n1 3\n2 3\n");
  const Graph back = read_edge_list(io);
  CHECK(back.edges() == g.edges());

  std::istringstream bad("0 1\n1 x\n");
  try {
    read_edge_list(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("flooding") {
  SUBCASE("path of three completes in two rounds") {
    const auto payloads = payloads_for(3, 2, 2);
    const FloodResult r = flood(make_topology(Topology::path, 3), payloads);
    CHECK(r.rounds == 2);
    for (const auto& held : r.holdings) {
      REQUIRE(held.size() == 3);
      for (int a = 0; a < 3; ++a) CHECK(held[static_cast<std::size_t>(a)].agent_id == a);
    }
  }
  SUBCASE("complete graph needs one round") {
    const auto payloads = payloads_for(5, 3, 2);
    CHECK(flood(make_topology(Topology::complete, 5), payloads).rounds == 1);
  }
  SUBCASE("ring of eight: four rounds and a hand-counted ledger") {
    // Every agent sends its own payload in round 1 and two newly learned
    // payloads in each of rounds 2..4, each to two neighbors. With equal
    // payload sizes s: 8*2*s + 3 * 8*2*2*s = 112 s.
    std::vector<PseudoDataset> payloads;
    for (int a = 0; a < 8; ++a) {
      payloads.push_back({Matrix::Zero(4, 2), Vector::Zero(4), a});
    }
    const FloodResult r = flood(make_topology(Topology::ring, 8), payloads);
    CHECK(r.rounds == 4);
    const std::uint64_t s = 4 * (2 + 1) + 1;
    CHECK(r.ledger.scalars_sent == 112 * s);
    CHECK(r.ledger.rounds == 4);
  }
  SUBCASE("single agent needs no rounds") {
    const auto payloads = payloads_for(1, 2, 2);
    const FloodResult r = flood(make_topology(Topology::star, 1), payloads);
    CHECK(r.rounds == 0);
    CHECK(r.holdings[0].size() == 1);
  }
  SUBCASE("duplicate ids are a protocol error") {
    auto payloads = payloads_for(3, 2, 2);
    payloads[2].agent_id = 0;
    CHECK_THROWS_AS(flood(make_topology(Topology::path, 3), payloads),
                    ProtocolError);
  }
  SUBCASE("random connected graphs: full union, diameter rounds, conservation") {
    for (int seed = 0; seed < 40; ++seed) {
      const int m = 2 + seed % 31;
      const Graph g = random_connected_graph(m, 0.05 * (seed % 4), 100 + seed);
      const auto payloads = payloads_for(m, 2, 1 + seed % 3);
      const FloodResult r = flood(g, payloads);
      for (const auto& held : r.holdings) {
        std::set<int> ids;
        for (const auto& p : held) ids.insert(p.agent_id);
        CHECK(static_cast<int>(ids.size()) == m);
      }
      CHECK(r.rounds == diameter_oracle(g));
      CHECK(r.rounds == g.diameter());

      std::uint64_t recount = 0;
      for (const auto& msg : r.log) {
        recount += payloads[static_cast<std::size_t>(msg.payload_agent)].scalar_count();
        CHECK(g.adjacent(msg.from, msg.to));
      }
      CHECK(recount == r.ledger.scalars_sent);
      CHECK(r.log.size() == r.ledger.messages);
    }
  }
  SUBCASE("deterministic ledgers and delivery order") {
    const Graph g = random_connected_graph(12, 0.1, 7);
    const auto payloads = payloads_for(12, 3, 2);
    const FloodResult a = flood(g, payloads), b = flood(g, payloads);
    CHECK(a.ledger.scalars_sent == b.ledger.scalars_sent);
    CHECK(a.ledger.edge_messages == b.ledger.edge_messages);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t k = 0; k < a.log.size(); ++k) {
      CHECK(a.log[k].from == b.log[k].from);
      CHECK(a.log[k].to == b.log[k].to);
      CHECK(a.log[k].payload_agent == b.log[k].payload_agent);
    }
  }
}

TEST_CASE("neighbor exchange") {
  SUBCASE("path of three") {
    CommLedger ledger;
    const std::vector<Vector> out{Vector::Constant(2, 1.0),
                                  Vector::Constant(2, 2.0),
                                  Vector::Constant(2, 3.0)};
    const auto in = exchange(make_topology(Topology::path, 3), out, ledger);
    CHECK(in[0].size() == 1);
    CHECK(in[0].count(1) == 1);
    CHECK(in[1].size() == 2);
    CHECK(in[1].at(0)(0) == 1.0);
    CHECK(in[1].at(2)(0) == 3.0);
    CHECK(in[2].size() == 1);
  }
  SUBCASE("ring of four with length-4 vectors adds 32 scalars") {
    CommLedger ledger;
    const std::vector<Vector> out(4, Vector::Zero(4));
    exchange(make_topology(Topology::ring, 4), out, ledger);
    CHECK(ledger.scalars_sent == 32);
    exchange(make_topology(Topology::ring, 4), out, ledger);
    CHECK(ledger.scalars_sent == 64);
    CHECK(ledger.rounds == 2);
  }
  SUBCASE("star of five") {
    CommLedger ledger;
    const std::vector<Vector> out(5, Vector::Zero(3));
    const auto in = exchange(make_topology(Topology::star, 5), out, ledger);
    CHECK(in[0].size() == 4);
    for (int a = 1; a < 5; ++a) CHECK(in[static_cast<std::size_t>(a)].size() == 1);
  }
  SUBCASE("observer sees only graph edges") {
    CommLedger ledger;
    const Graph g = random_connected_graph(10, 0.2, 3);
    const std::vector<Vector> out(10, Vector::Zero(2));
    int deliveries = 0;
    exchange(g, out, ledger, [&](int receiver, int sender) {
      ++deliveries;
      CHECK(g.adjacent(receiver, sender));
    });
    CHECK(deliveries == static_cast<int>(2 * g.edge_count()));
  }
  SUBCASE("wrong vector count") {
    CommLedger ledger;
    const std::vector<Vector> out(2, Vector::Zero(2));
    CHECK_THROWS_AS(exchange(make_topology(Topology::ring, 3), out, ledger),
                    ProtocolError);
  }
}

TEST_CASE("point-to-point delivery follows edges") {
  const Graph g = make_topology(Topology::star, 4);
  CommLedger ledger;
  deliver(g, 2, 0, 5, ledger);
  deliver(g, 0, 3, 5, ledger);
  CHECK(ledger.scalars_sent == 10);
  CHECK(ledger.edge_messages.at({2, 0}) == 1);
  CHECK_THROWS_AS(deliver(g, 1, 2, 5, ledger), ProtocolError);
  CHECK_THROWS_AS(deliver(g, 0, 9, 5, ledger), ProtocolError);
}
