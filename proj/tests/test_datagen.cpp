#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "pxpgp/datagen.hpp"
#include "pxpgp/errors.hpp"
#include "test_support.hpp"

using namespace pxpgp;
using namespace pxpgp::testing;

namespace {

Hyperparams truth() { return Hyperparams::from_natural(Vector{{0.7, 0.5, 1.8, 0.1}}); }

double sample_variance(const Vector& y) {
  const double mean = y.mean();
  return (y.array() - mean).square().sum() / static_cast<double>(y.size() - 1);
}

bool same_bits(const Dataset& a, const Dataset& b) {
  return a.X.rows() == b.X.rows() && a.X.cols() == b.X.cols() &&
         a.y.size() == b.y.size() &&
         std::equal(a.X.data(), a.X.data() + a.X.size(), b.X.data()) &&
         std::equal(a.y.data(), a.y.data() + a.y.size(), b.y.data());
}

}  // namespace

TEST_CASE("grid spec") {
  const GridSpec g = GridSpec::square(0.0, 5.0, 40);
  CHECK(g.size() == 1600);
  const Matrix X = g.inputs();
  CHECK(X(0, 0) == 0.0);
  CHECK(X(1, 0) == doctest::Approx(5.0 / 39));
  CHECK(X(40, 1) == doctest::Approx(5.0 / 39));
  CHECK(X(1599, 0) == 5.0);
  CHECK_THROWS_AS(GridSpec::square(1.0, 1.0, 4).validate(), InvalidInput);
  CHECK_THROWS_AS(GridSpec::square(0.0, 1.0, 1).validate(), InvalidInput);
}

TEST_CASE("sample_gp") {
  SUBCASE("vanishing signal leaves the noise") {
    GridSpec g;
    g.axes = {{0.0, 10.0, 1000}};
    const Hyperparams t = Hyperparams::from_natural(Vector{{0.5, 1e-8, 0.3}});
    const Dataset d = sample_gp(g, t, 1);
    CHECK(sample_variance(d.y) == doctest::Approx(0.09).epsilon(0.2));
  }
  SUBCASE("variance on the 40x40 grid stays within [0.5, 2] of the prior") {
    const double prior = 1.8 * 1.8 + 0.01;
    const GridSpec g = GridSpec::square(0.0, 5.0, 40);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const double v = sample_variance(sample_gp(g, truth(), seed).y);
      CHECK(v >= 0.5 * prior);
      CHECK(v <= 2.0 * prior);
    }
  }
  SUBCASE("bit-identical per seed, different across seeds") {
    const GridSpec g = GridSpec::square(0.0, 5.0, 12);
    CHECK(same_bits(sample_gp(g, truth(), 4), sample_gp(g, truth(), 4)));
    CHECK(!same_bits(sample_gp(g, truth(), 4), sample_gp(g, truth(), 5)));
  }
  SUBCASE("nearby points are more correlated than distant ones") {
    GridSpec g;
    g.axes = {{0.0, 20.0, 200}};
    const Hyperparams t = Hyperparams::from_natural(Vector{{1.0, 1.0, 0.05}});
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Dataset d = sample_gp(g, t, seed);
      double near = 0.0, far = 0.0;
      int n_near = 0, n_far = 0;
      for (Index i = 0; i < d.size(); ++i) {
        for (Index j = i + 1; j < d.size(); ++j) {
          const double lag = std::abs(d.X(i, 0) - d.X(j, 0));
          if (lag < 1.0) {
            near += d.y(i) * d.y(j);
            ++n_near;
          } else if (lag > 3.0) {
            far += d.y(i) * d.y(j);
            ++n_far;
          }
        }
      }
      if (near / n_near > far / n_far) ++wins;
    }
    CHECK(wins >= 6);
  }
  SUBCASE("size guard") {
    CHECK_THROWS_AS(sample_gp_at(Matrix::Zero(20001, 1),
                                 Hyperparams::from_natural(Vector{{1.0, 1.0, 0.1}}), 0),
                    InvalidInput);
  }
  SUBCASE("joint train/test draw") {
    const SyntheticSplit s = sample_gp_with_test(GridSpec::square(0.0, 5.0, 10), truth(), 30, 2);
    CHECK(s.train.size() == 100);
    CHECK(s.test.size() == 30);
    CHECK(s.test.X.minCoeff() >= 0.0);
    CHECK(s.test.X.maxCoeff() <= 5.0);
    CHECK(same_bits(s.train, sample_gp_with_test(GridSpec::square(0.0, 5.0, 10), truth(), 30, 2).train));
  }
}

TEST_CASE("spatial partition") {
  SUBCASE("unit square into quadrants") {
    Matrix X(4, 2);
    X << 0.1, 0.1, 0.9, 0.1, 0.1, 0.9, 0.9, 0.9;
    Matrix corners(2, 2);
    corners << 0.0, 0.0, 1.0, 1.0;
    Matrix all(6, 2);
    all << X, corners;
    const Partition p = partition_inputs(all, 4, PartitionScheme::grid);
    CHECK(p.assignment == std::vector<int>{0, 1, 2, 3, 0, 3});
  }
  SUBCASE("40x40 grid into 16 tiles of 100") {
    const Matrix X = GridSpec::square(0.0, 5.0, 40).inputs();
    const Partition p = partition_inputs(X, 16, PartitionScheme::grid);
    for (const auto& rows : p.members()) CHECK(rows.size() == 100);
    CHECK(p.locate(Vector{{0.1, 0.1}}) == 0);
    CHECK(p.locate(Vector{{4.9, 4.9}}) == 15);
    CHECK(p.locate(Vector{{9.0, -3.0}}) == 3);
  }
  SUBCASE("single agent keeps everything") {
    std::mt19937_64 rng(1);
    const Dataset d = random_dataset(rng, 17, 2);
    const auto parts = partition_spatial(d, 1);
    REQUIRE(parts.size() == 1);
    CHECK(same_bits(parts[0], d));
  }
  SUBCASE("parts are disjoint and exhaustive") {
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) {
      const Matrix X = random_inputs(rng, 50 + k, 2, 0.0, 3.0);
      for (auto scheme : {PartitionScheme::grid, PartitionScheme::stripes}) {
        const int m = scheme == PartitionScheme::grid ? 4 + 5 * (k % 2) : 3 + k % 7;
        const Partition p = partition_inputs(X, m, scheme);
        std::multiset<Index> seen;
        for (const auto& rows : p.members()) seen.insert(rows.begin(), rows.end());
        CHECK(seen.size() == static_cast<std::size_t>(X.rows()));
        CHECK(std::set<Index>(seen.begin(), seen.end()).size() == seen.size());
        for (Index i = 0; i < X.rows(); ++i) {
          const int a = p.assignment[static_cast<std::size_t>(i)];
          CHECK(a >= 0);
          CHECK(a < m);
        }
      }
    }
  }
  SUBCASE("stripes are equal-count slabs along the first axis") {
    const Matrix X = GridSpec::square(0.0, 5.0, 40).inputs();
    const Partition p = partition_inputs(X, 10, PartitionScheme::stripes);
    for (const auto& rows : p.members()) CHECK(rows.size() == 160);
    CHECK(p.cuts.size() == 9);
    CHECK(p.locate(Vector{{0.0, 2.0}}) == 0);
    CHECK(p.locate(Vector{{5.0, 2.0}}) == 9);
  }
  SUBCASE("invalid requests") {
    const Matrix X = GridSpec::square(0.0, 1.0, 5).inputs();
    CHECK_THROWS_AS(partition_inputs(X, 5, PartitionScheme::grid), InvalidInput);
    CHECK_THROWS_AS(partition_inputs(X, 26, PartitionScheme::stripes), InvalidInput);
  }
}

TEST_CASE("table io") {
  SUBCASE("round trip is bit-exact") {
    std::mt19937_64 rng(3);
    Dataset d = random_dataset(rng, 40, 3);
    d.y(0) = 1.0 / 3.0;
    d.X(1, 1) = 5e-300;
    std::stringstream io;
    write_table(io, d);
    CHECK(same_bits(read_table(io), d));
  }
  SUBCASE("dimension comes from the header") {
    std::istringstream in("x1,x2,x3,y\n1,2,3,4\n5,6,7,8\n");
    const Dataset d = read_table(in);
    CHECK(d.dim() == 3);
    CHECK(d.size() == 2);
    CHECK(d.y(1) == 8.0);
  }
  SUBCASE("no rows") {
    std::istringstream in("x1,y\n\n");
    CHECK_THROWS_WITH_AS(read_table(in), "no rows", ParseError);
  }
  SUBCASE("malformed rows name their line") {
    std::istringstream short_row("x1,y\n1,2\n3\n");
    try {
      read_table(short_row);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    std::istringstream bad_number("x1,y\n1,2\n3,4\n5,abc\n");
    try {
      read_table(bad_number);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 4);
    }
  }
}

TEST_CASE("ascii grid raster") {
  SUBCASE("2x2 without nodata") {
    std::istringstream in("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\n1 2\n3 4\n");
    CHECK(read_grid_raster(in).data.size() == 4);
  }
  SUBCASE("one nodata cell is dropped") {
    std::istringstream in("NCOLS 2\nNROWS 2\nXLLCORNER 0\nYLLCORNER 0\nCELLSIZE 30\nNODATA_value -9999\n1 -9999\n3 4\n");
    CHECK(read_grid_raster(in).data.size() == 3);
  }
  SUBCASE("3x3 normalization by hand") {
    std::istringstream in(
        "ncols 3\nnrows 3\nxllcorner 100\nyllcorner 200\ncellsize 10\nnodata_value -1\n"
        "1 2 3\n4 -1 6\n7 8 9\n");
    const RasterData r = read_grid_raster(in);
    REQUIRE(r.data.size() == 8);
    // Values 1,2,3,4,6,7,8,9: mean 5, population variance 60/8.
    CHECK(r.output_mean == doctest::Approx(5.0));
    CHECK(r.output_std == doctest::Approx(std::sqrt(7.5)));
    // First cell: top-left, so (0, 1).
    CHECK(r.data.X(0, 0) == 0.0);
    CHECK(r.data.X(0, 1) == 1.0);
    CHECK(r.data.y(0) == doctest::Approx(-4.0 / std::sqrt(7.5)));
    // Cell (row 1, col 2) with value 6: x = 1, y = 0.5.
    CHECK(r.data.X(4, 0) == 1.0);
    CHECK(r.data.X(4, 1) == 0.5);
    CHECK(r.data.y(4) == doctest::Approx(1.0 / std::sqrt(7.5)));
    CHECK(r.destandardize(r.data.y)(7) == doctest::Approx(9.0));
  }
  SUBCASE("value count mismatch") {
    std::istringstream in("ncols 2\nnrows 2\ncellsize 1\n1 2\n3\n");
    CHECK_THROWS_AS(read_grid_raster(in), ParseError);
  }
}
