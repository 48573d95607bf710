#include "pxpgp/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "pxpgp/errors.hpp"

namespace pxpgp {

namespace {

constexpr Index kMaxSamplePoints = 20000;

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& text, double& value) {
  const char* begin = text.data();
  const char* end = begin + text.size();
  if (begin != end && *begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  return ec == std::errc() && ptr == end;
}

std::string lower_case(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

GridSpec GridSpec::square(double min, double max, Index points_per_side,
                          Index dim) {
  GridSpec g;
  g.axes.assign(static_cast<std::size_t>(dim), GridAxis{min, max, points_per_side});
  return g;
}

Index GridSpec::size() const {
  Index n = 1;
  for (const auto& a : axes) n *= a.points;
  return n;
}

void GridSpec::validate() const {
  if (axes.empty()) throw InvalidInput("grid needs at least one axis");
  for (const auto& a : axes) {
    if (!(a.min < a.max)) throw InvalidInput("grid axis needs min < max");
    if (a.points < 2) throw InvalidInput("grid axis needs at least 2 points");
  }
}

Matrix GridSpec::inputs() const {
  validate();
  Matrix X(size(), dim());
  for (Index row = 0; row < X.rows(); ++row) {
    Index rest = row;
    for (Index d = 0; d < dim(); ++d) {
      const auto& a = axes[static_cast<std::size_t>(d)];
      const Index k = rest % a.points;
      rest /= a.points;
      X(row, d) = a.min + (a.max - a.min) * static_cast<double>(k) /
                              static_cast<double>(a.points - 1);
    }
  }
  return X;
}

Matrix uniform_inputs(const Vector& lower, const Vector& upper, Index count,
                      std::uint64_t seed) {
  if (lower.size() != upper.size() || lower.size() == 0) {
    throw InvalidInput("uniform_inputs: bounds dimension mismatch");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix X(count, lower.size());
  for (Index i = 0; i < count; ++i) {
    for (Index d = 0; d < lower.size(); ++d) {
      X(i, d) = lower(d) + (upper(d) - lower(d)) * unit(rng);
    }
  }
  return X;
}

Dataset sample_gp_at(const Matrix& X, const Hyperparams& theta,
                     std::uint64_t seed) {
  if (X.rows() > kMaxSamplePoints) {
    throw InvalidInput("sample_gp: " + std::to_string(X.rows()) +
                       " points exceed the dense limit of " +
                       std::to_string(kMaxSamplePoints));
  }
  if (X.rows() == 0) throw InvalidInput("sample_gp: no inputs");
  if (X.cols() != theta.input_dim()) {
    throw InvalidInput("sample_gp: input dimension does not match theta");
  }
  Matrix K = kernel_matrix(X, X, theta);
  K.diagonal().array() += 1e-10;
  const RobustCholesky chol = robust_cholesky(K);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vector w(X.rows()), w_noise(X.rows());
  for (Index i = 0; i < w.size(); ++i) w(i) = normal(rng);
  for (Index i = 0; i < w_noise.size(); ++i) w_noise(i) = normal(rng);

  Dataset out;
  out.X = X;
  out.y = chol.llt.matrixL() * w + theta.noise_std() * w_noise;
  return out;
}

Dataset sample_gp(const GridSpec& grid, const Hyperparams& theta,
                  std::uint64_t seed) {
  return sample_gp_at(grid.inputs(), theta, seed);
}

SyntheticSplit sample_gp_with_test(const GridSpec& grid,
                                   const Hyperparams& theta, Index test_count,
                                   std::uint64_t seed) {
  const Matrix train_X = grid.inputs();
  Vector lower(grid.dim()), upper(grid.dim());
  for (Index d = 0; d < grid.dim(); ++d) {
    lower(d) = grid.axes[static_cast<std::size_t>(d)].min;
    upper(d) = grid.axes[static_cast<std::size_t>(d)].max;
  }
  // Distinct stream for test locations so they do not shadow the noise draws.
  const Matrix test_X = uniform_inputs(lower, upper, test_count,
                                       seed ^ 0x9e3779b97f4a7c15ULL);
  Matrix all(train_X.rows() + test_X.rows(), grid.dim());
  all << train_X, test_X;
  const Dataset joint = sample_gp_at(all, theta, seed);

  SyntheticSplit out;
  out.train = {train_X, joint.y.head(train_X.rows())};
  out.test = {test_X, joint.y.tail(test_X.rows())};
  return out;
}

PartitionScheme parse_partition_scheme(const std::string& name) {
  if (name == "grid") return PartitionScheme::grid;
  if (name == "stripes") return PartitionScheme::stripes;
  throw InvalidInput("unknown partition scheme '" + name + "'");
}

int Partition::locate(const Eigen::Ref<const Vector>& x) const {
  if (scheme == PartitionScheme::stripes) {
    const auto it = std::upper_bound(cuts.begin(), cuts.end(), x(0));
    return static_cast<int>(it - cuts.begin());
  }
  int id = 0;
  int stride = 1;
  for (Index d = 0; d < lower.size(); ++d) {
    const double width = upper(d) - lower(d);
    int cell = 0;
    if (width > 0.0) {
      cell = static_cast<int>(std::floor((x(d) - lower(d)) / width * per_side));
    }
    cell = std::clamp(cell, 0, per_side - 1);
    id += cell * stride;
    stride *= per_side;
  }
  return id;
}

std::vector<std::vector<Index>> Partition::members() const {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(agents));
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    out[static_cast<std::size_t>(assignment[i])].push_back(static_cast<Index>(i));
  }
  return out;
}

Partition partition_inputs(const Matrix& X, int agents, PartitionScheme scheme) {
  const Index n = X.rows();
  if (agents < 1) throw InvalidInput("partition needs at least one agent");
  if (agents > n) {
    throw InvalidInput("cannot split " + std::to_string(n) + " points across " +
                       std::to_string(agents) + " agents");
  }
  Partition p;
  p.scheme = scheme;
  p.agents = agents;
  p.lower = X.colwise().minCoeff().transpose();
  p.upper = X.colwise().maxCoeff().transpose();
  p.assignment.resize(static_cast<std::size_t>(n));

  if (scheme == PartitionScheme::grid) {
    const Index dim = X.cols();
    const int side = static_cast<int>(
        std::lround(std::pow(static_cast<double>(agents), 1.0 / dim)));
    int total = 1;
    for (Index d = 0; d < dim; ++d) total *= side;
    if (total != agents) {
      throw InvalidInput("grid partition needs M to be a perfect power of the "
                         "input dimension (M=" + std::to_string(agents) +
                         ", D=" + std::to_string(dim) +
                         "); use the stripes scheme instead");
    }
    p.per_side = side;
    for (Index i = 0; i < n; ++i) {
      p.assignment[static_cast<std::size_t>(i)] = p.locate(X.row(i).transpose());
    }
  } else {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return X(a, 0) < X(b, 0);
    });
    for (Index rank = 0; rank < n; ++rank) {
      const int part = static_cast<int>(rank * agents / n);
      p.assignment[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] = part;
      if (rank > 0 && part != static_cast<int>((rank - 1) * agents / n)) {
        p.cuts.push_back(X(order[static_cast<std::size_t>(rank)], 0));
      }
    }
  }
  return p;
}

std::vector<Dataset> split(const Dataset& data, const Partition& partition) {
  if (static_cast<Index>(partition.assignment.size()) != data.size()) {
    throw InvalidInput("partition does not match the dataset size");
  }
  std::vector<Dataset> parts;
  for (const auto& rows : partition.members()) parts.push_back(data.subset(rows));
  return parts;
}

std::vector<Dataset> partition_spatial(const Dataset& data, int agents,
                                       PartitionScheme scheme) {
  data.validate();
  return split(data, partition_inputs(data.X, agents, scheme));
}

void write_table(std::ostream& out, const Dataset& data) {
  data.validate();
  for (Index d = 0; d < data.dim(); ++d) out << 'x' << (d + 1) << ',';
  out << "y\n";
  out << std::setprecision(17);
  for (Index i = 0; i < data.size(); ++i) {
    for (Index d = 0; d < data.dim(); ++d) out << data.X(i, d) << ',';
    out << data.y(i) << '\n';
  }
}

void write_table(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open " + path.string() + " for writing");
  write_table(out, data);
  if (!out) throw InvalidInput("failed writing " + path.string());
}

Dataset read_table(std::istream& in) {
  std::string line;
  std::size_t line_number = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_number;
    if (!trim(line).empty()) {
      header = split_commas(trim(line));
      break;
    }
  }
  if (header.size() < 2) throw ParseError("missing header x1,..,xD,y", line_number);
  const Index dim = static_cast<Index>(header.size()) - 1;
  for (Index d = 0; d < dim; ++d) {
    if (header[static_cast<std::size_t>(d)] != "x" + std::to_string(d + 1)) {
      throw ParseError("header column " + std::to_string(d + 1) +
                           " should be x" + std::to_string(d + 1),
                       line_number);
    }
  }
  if (header.back() != "y") throw ParseError("last header column should be y", line_number);

  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_number;
    const std::string row = trim(line);
    if (row.empty()) continue;
    const auto fields = split_commas(row);
    if (static_cast<Index>(fields.size()) != dim + 1) {
      throw ParseError("expected " + std::to_string(dim + 1) + " fields, got " +
                           std::to_string(fields.size()),
                       line_number);
    }
    for (const auto& f : fields) {
      double v = 0.0;
      if (!parse_double(f, v) || !std::isfinite(v)) {
        throw ParseError("bad number '" + f + "'", line_number);
      }
      values.push_back(v);
    }
  }
  const Index n = static_cast<Index>(values.size()) / (dim + 1);
  if (n == 0) throw ParseError("no rows", 0);
  Dataset out;
  out.X.resize(n, dim);
  out.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index d = 0; d < dim; ++d) out.X(i, d) = values[static_cast<std::size_t>(i * (dim + 1) + d)];
    out.y(i) = values[static_cast<std::size_t>(i * (dim + 1) + dim)];
  }
  return out;
}

Dataset read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return read_table(in);
}

RasterData read_grid_raster(std::istream& in) {
  std::map<std::string, double> header;
  const std::vector<std::string> keys{"ncols",     "nrows",     "xllcorner",
                                      "yllcorner", "xllcenter", "yllcenter",
                                      "cellsize",  "nodata_value"};
  std::string line;
  std::size_t line_number = 0;
  std::vector<double> cells;
  std::size_t first_data_line = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::istringstream fields(line);
    std::string word;
    if (!(fields >> word)) continue;
    const std::string key = lower_case(word);
    if (cells.empty() && std::find(keys.begin(), keys.end(), key) != keys.end()) {
      std::string text;
      double v = 0.0;
      if (!(fields >> text) || !parse_double(text, v)) {
        throw ParseError("bad value for " + word, line_number);
      }
      header[key] = v;
      continue;
    }
    if (first_data_line == 0) first_data_line = line_number;
    do {
      double v = 0.0;
      if (!parse_double(word, v)) throw ParseError("bad cell value '" + word + "'", line_number);
      cells.push_back(v);
    } while (fields >> word);
  }
  for (const char* required : {"ncols", "nrows", "cellsize"}) {
    if (!header.count(required)) {
      throw ParseError(std::string("missing header keyword ") + required, 0);
    }
  }
  const double ncols_raw = header["ncols"], nrows_raw = header["nrows"];
  if (ncols_raw < 1 || nrows_raw < 1 || ncols_raw != std::floor(ncols_raw) ||
      nrows_raw != std::floor(nrows_raw)) {
    throw ParseError("ncols and nrows must be positive integers", 0);
  }
  const auto ncols = static_cast<Index>(ncols_raw);
  const auto nrows = static_cast<Index>(nrows_raw);
  if (static_cast<Index>(cells.size()) != ncols * nrows) {
    throw ParseError("header declares " + std::to_string(ncols * nrows) +
                         " cells but " + std::to_string(cells.size()) +
                         " values follow",
                     first_data_line);
  }
  const bool has_nodata = header.count("nodata_value") > 0;
  const double nodata = has_nodata ? header["nodata_value"] : 0.0;

  std::vector<Index> rows_kept;
  for (Index k = 0; k < ncols * nrows; ++k) {
    if (!(has_nodata && cells[static_cast<std::size_t>(k)] == nodata)) rows_kept.push_back(k);
  }
  if (rows_kept.empty()) throw ParseError("no rows", 0);

  RasterData out;
  const auto n = static_cast<Index>(rows_kept.size());
  out.data.X.resize(n, 2);
  out.data.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Index k = rows_kept[static_cast<std::size_t>(i)];
    const Index r = k / ncols, c = k % ncols;
    // Row 0 is the northern edge.
    out.data.X(i, 0) = ncols > 1 ? static_cast<double>(c) / static_cast<double>(ncols - 1) : 0.0;
    out.data.X(i, 1) = nrows > 1 ? static_cast<double>(nrows - 1 - r) / static_cast<double>(nrows - 1) : 0.0;
    out.data.y(i) = cells[static_cast<std::size_t>(k)];
  }
  out.output_mean = out.data.y.mean();
  const double var = (out.data.y.array() - out.output_mean).square().mean();
  out.output_std = var > 0.0 ? std::sqrt(var) : 1.0;
  out.data.y = ((out.data.y.array() - out.output_mean) / out.output_std).matrix();
  return out;
}

RasterData read_grid_raster(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return read_grid_raster(in);
}

}  // namespace pxpgp
