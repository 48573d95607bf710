#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pxpgp/gp_core.hpp"

namespace pxpgp {

struct GridAxis {
  double min = 0.0;
  double max = 1.0;
  Index points = 2;
};

/// Regular lattice; the first axis varies fastest.
struct GridSpec {
  std::vector<GridAxis> axes;

  static GridSpec square(double min, double max, Index points_per_side,
                         Index dim = 2);
  Index dim() const { return static_cast<Index>(axes.size()); }
  Index size() const;
  void validate() const;
  Matrix inputs() const;
};

/// Uniform scatter inside [lower, upper].
Matrix uniform_inputs(const Vector& lower, const Vector& upper, Index count,
                      std::uint64_t seed);

/// y = L w + s_eps w' with L L^T = K(X, X) + 1e-10 I. Throws InvalidInput
/// above 20000 points.
Dataset sample_gp_at(const Matrix& X, const Hyperparams& theta,
                     std::uint64_t seed);
Dataset sample_gp(const GridSpec& grid, const Hyperparams& theta,
                  std::uint64_t seed);

struct SyntheticSplit {
  Dataset train;
  Dataset test;
};

/// One joint draw over the grid plus `test_count` uniform points inside the
/// grid box, so the held-out points come from the same function.
SyntheticSplit sample_gp_with_test(const GridSpec& grid,
                                   const Hyperparams& theta, Index test_count,
                                   std::uint64_t seed);

enum class PartitionScheme { grid, stripes };

PartitionScheme parse_partition_scheme(const std::string& name);

/// Agent assignment of a set of inputs.
///  grid:    s^D tiles over the bounding box with s = M^(1/D); cells are
///           half-open except the last along each axis.
///  stripes: M equal-count slabs along the first coordinate.
struct Partition {
  PartitionScheme scheme = PartitionScheme::grid;
  int agents = 1;
  std::vector<int> assignment;
  Vector lower, upper;       // bounding box of the partitioned inputs
  int per_side = 1;          // grid
  std::vector<double> cuts;  // stripes: first-coordinate lower edges 1..M-1

  /// Agent whose tile contains x; points outside the box go to the nearest.
  int locate(const Eigen::Ref<const Vector>& x) const;
  std::vector<std::vector<Index>> members() const;
};

Partition partition_inputs(const Matrix& X, int agents, PartitionScheme scheme);
std::vector<Dataset> split(const Dataset& data, const Partition& partition);
std::vector<Dataset> partition_spatial(
    const Dataset& data, int agents,
    PartitionScheme scheme = PartitionScheme::grid);

/// CSV with header x1,..,xD,y and 17 significant digits.
void write_table(std::ostream& out, const Dataset& data);
void write_table(const std::filesystem::path& path, const Dataset& data);
Dataset read_table(std::istream& in);
Dataset read_table(const std::filesystem::path& path);

struct RasterData {
  Dataset data;
  double output_mean = 0.0;
  double output_std = 1.0;

  Vector destandardize(const Vector& y) const {
    return (y.array() * output_std + output_mean).matrix();
  }
};

/// ESRI ASCII grid. Cell centers are mapped to [0,1]^2 over the full raster
/// extent (north row first); NODATA cells are dropped; outputs standardized
/// with the population standard deviation.
RasterData read_grid_raster(std::istream& in);
RasterData read_grid_raster(const std::filesystem::path& path);

}  // namespace pxpgp
