#include "pxpgp/evalcli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "pxpgp/errors.hpp"
#include "pxpgp/optimizer.hpp"

namespace pxpgp {

namespace fs = std::filesystem;
using nlohmann::json;

double nrmse(const Vector& pred_mean, const Vector& truth) {
  if (pred_mean.size() != truth.size() || truth.size() < 2) {
    throw InvalidInput("nrmse needs two equal-length vectors of size >= 2");
  }
  const double range = truth.maxCoeff() - truth.minCoeff();
  if (!(range > 0.0)) throw InvalidInput("nrmse: truth has zero range");
  const double mse = (pred_mean - truth).squaredNorm() / static_cast<double>(truth.size());
  return std::sqrt(mse) / range;
}

double nlpd(const Posterior& post, const Vector& truth) {
  if (post.mean.size() != truth.size() || post.variance.size() != truth.size() ||
      truth.size() == 0) {
    throw InvalidInput("nlpd: size mismatch");
  }
  double total = 0.0;
  for (Index i = 0; i < truth.size(); ++i) {
    const double var = post.variance(i);
    if (!(var > 0.0)) throw InvalidInput("nlpd: non-positive predictive variance");
    const double r = truth(i) - post.mean(i);
    total += 0.5 * std::log(2.0 * std::numbers::pi * var) + r * r / (2.0 * var);
  }
  return total / static_cast<double>(truth.size());
}

Vector hyperparam_error(const Hyperparams& estimate, const Hyperparams& truth) {
  if (estimate.size() != truth.size()) {
    throw InvalidInput("hyperparam_error: dimension mismatch");
  }
  const Vector t = truth.natural_values();
  return ((estimate.natural_values() - t).array() / t.array()).matrix();
}

namespace {

constexpr std::array<std::pair<Method, const char*>, 6> kMethods{{
    {Method::full_gp, "full_gp"},
    {Method::pxpgp, "pxpgp"},
    {Method::apxgp, "apxgp"},
    {Method::gapxgp, "gapxgp"},
    {Method::dec_pxpgp, "dec_pxpgp"},
    {Method::dec_gapxgp, "dec_gapxgp"},
}};

bool is_decentralized(Method m) {
  return m == Method::dec_pxpgp || m == Method::dec_gapxgp;
}

Variant variant_of(Method m) {
  switch (m) {
    case Method::pxpgp:
    case Method::dec_pxpgp:
      return Variant::pxpgp;
    case Method::apxgp:
      return Variant::apxgp;
    case Method::gapxgp:
    case Method::dec_gapxgp:
      return Variant::gapxgp;
    case Method::full_gp:
      break;
  }
  throw InvalidInput("full_gp has no consensus variant");
}

}  // namespace

std::string to_string(Method method) {
  for (const auto& [m, name] : kMethods) {
    if (m == method) return name;
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (const auto& [m, n] : kMethods) {
    if (name == n) return m;
  }
  throw InvalidInput("unknown method '" + name + "'");
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

using boost::property_tree::ptree;

const std::map<std::string, std::set<std::string>> kKnownKeys{
    {"experiment", {"methods", "agents", "seeds", "output", "full_gp_oracle",
                    "full_gp_iterations"}},
    {"data", {"source", "path", "test_path", "grid_min", "grid_max", "grid_points",
              "dim", "sampling", "scatter_points", "theta_true", "test_points",
              "test_mode", "partition"}},
    {"pxpgp", {"rho0", "lipschitz0", "max_iterations", "eps_abs", "eps_rel", "adapt",
               "beta", "tau_incr", "tau_decr", "rho_min", "rho_max", "armijo_c",
               "tau_lip", "armijo_retries"}},
    {"baseline", {"rho0", "lipschitz0", "max_iterations", "eps_abs", "eps_rel",
                  "adapt", "beta", "tau_incr", "tau_decr", "rho_min", "rho_max",
                  "armijo_c", "tau_lip", "armijo_retries"}},
    {"sparse", {"inducing_count", "gapx_samples", "boundary_weight",
                "repulsive_weight", "min_separation", "adam_step",
                "adam_iterations"}},
    {"network", {"topology", "edge_file", "extra_edge_probability", "early_stop",
                 "early_stop_rounds", "adapt_rho"}},
};

class Reader {
 public:
  Reader(const ptree& tree, fs::path base) : tree_(tree), base_(std::move(base)) {
    for (const auto& [section, body] : tree_) {
      const auto known = kKnownKeys.find(section);
      if (known == kKnownKeys.end()) {
        throw ConfigError(section, "unknown section");
      }
      if (!body.data().empty()) throw ConfigError(section, "key outside a section");
      for (const auto& [key, value] : body) {
        if (!known->second.contains(key)) {
          throw ConfigError(section + "." + key, "unknown key");
        }
      }
    }
  }

  std::optional<std::string> raw(const std::string& field) const {
    const auto v = tree_.get_optional<std::string>(ptree::path_type(field, '.'));
    if (!v) return std::nullopt;
    return boost::algorithm::trim_copy(*v);
  }

  bool has(const std::string& field) const { return raw(field).has_value(); }

  std::string text(const std::string& field, const std::string& fallback) const {
    return raw(field).value_or(fallback);
  }

  double real(const std::string& field, double fallback) const {
    const auto v = raw(field);
    return v ? to_real(field, *v) : fallback;
  }

  double positive(const std::string& field, double fallback) const {
    const double v = real(field, fallback);
    if (!(v > 0.0)) throw ConfigError(field, "must be positive");
    return v;
  }

  long long integer(const std::string& field, long long fallback,
                    long long min_value = std::numeric_limits<long long>::min()) const {
    const auto v = raw(field);
    const long long out = v ? to_integer(field, *v) : fallback;
    if (out < min_value) {
      throw ConfigError(field, "must be at least " + std::to_string(min_value));
    }
    return out;
  }

  bool boolean(const std::string& field, bool fallback) const {
    const auto v = raw(field);
    if (!v) return fallback;
    const std::string s = boost::algorithm::to_lower_copy(*v);
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    throw ConfigError(field, "expected true or false, got '" + *v + "'");
  }

  std::vector<std::string> list(const std::string& field) const {
    std::vector<std::string> out;
    const auto v = raw(field);
    if (!v) return out;
    boost::algorithm::split(out, *v, boost::is_any_of(","));
    for (auto& s : out) boost::algorithm::trim(s);
    std::erase_if(out, [](const std::string& s) { return s.empty(); });
    return out;
  }

  std::vector<double> reals(const std::string& field) const {
    std::vector<double> out;
    for (const auto& s : list(field)) out.push_back(to_real(field, s));
    return out;
  }

  fs::path path(const std::string& field) const {
    const auto v = raw(field);
    if (!v || v->empty()) return {};
    const fs::path p(*v);
    return p.is_absolute() ? p : base_ / p;
  }

  static double to_real(const std::string& field, const std::string& s) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(out)) {
      throw ConfigError(field, "expected a number, got '" + s + "'");
    }
    return out;
  }

  static long long to_integer(const std::string& field, const std::string& s) {
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw ConfigError(field, "expected an integer, got '" + s + "'");
    }
    return out;
  }

 private:
  const ptree& tree_;
  fs::path base_;
};

void read_admm(const Reader& r, const std::string& section, AdmmConfig& c) {
  const auto key = [&](const char* k) { return section + "." + k; };
  c.rho0 = r.positive(key("rho0"), c.rho0);
  c.lipschitz0 = r.positive(key("lipschitz0"), c.lipschitz0);
  c.max_iterations = static_cast<int>(r.integer(key("max_iterations"), c.max_iterations, 1));
  c.eps_abs = r.positive(key("eps_abs"), c.eps_abs);
  c.eps_rel = r.real(key("eps_rel"), c.eps_rel);
  if (c.eps_rel < 0.0) throw ConfigError(key("eps_rel"), "must be non-negative");
  c.adapt = r.boolean(key("adapt"), c.adapt);
  c.rho_rule.beta = r.positive(key("beta"), c.rho_rule.beta);
  c.rho_rule.tau_incr = r.positive(key("tau_incr"), c.rho_rule.tau_incr);
  c.rho_rule.tau_decr = r.positive(key("tau_decr"), c.rho_rule.tau_decr);
  c.rho_rule.rho_min = r.positive(key("rho_min"), c.rho_rule.rho_min);
  c.rho_rule.rho_max = r.positive(key("rho_max"), c.rho_rule.rho_max);
  if (c.rho_rule.rho_min > c.rho_rule.rho_max) {
    throw ConfigError(key("rho_min"), "exceeds rho_max");
  }
  c.armijo.c = r.positive(key("armijo_c"), c.armijo.c);
  c.armijo.tau_lip = r.positive(key("tau_lip"), c.armijo.tau_lip);
  if (c.armijo.tau_lip >= 1.0) throw ConfigError(key("tau_lip"), "must be below 1");
  c.armijo.retries = static_cast<int>(r.integer(key("armijo_retries"), c.armijo.retries, 0));
}

}  // namespace

ExperimentConfig parse_config(std::istream& in, const fs::path& base_dir) {
  ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()), e.message());
  }
  const Reader r(tree, base_dir);
  ExperimentConfig cfg;

  if (r.list("experiment.methods").empty()) {
    throw ConfigError("experiment.methods", "at least one method is required");
  }
  for (const auto& name : r.list("experiment.methods")) {
    try {
      const Method m = parse_method(name);
      if (std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end()) {
        throw ConfigError("experiment.methods", "duplicate method '" + name + "'");
      }
      cfg.methods.push_back(m);
    } catch (const InvalidInput& e) {
      throw ConfigError("experiment.methods", e.what());
    }
  }
  for (const auto& s : r.list("experiment.agents")) {
    const long long m = Reader::to_integer("experiment.agents", s);
    if (m < 1) throw ConfigError("experiment.agents", "agent counts must be positive");
    cfg.agents.push_back(static_cast<int>(m));
  }
  if (cfg.agents.empty()) cfg.agents.push_back(16);
  for (const auto& s : r.list("experiment.seeds")) {
    const long long seed = Reader::to_integer("experiment.seeds", s);
    if (seed < 0) throw ConfigError("experiment.seeds", "seeds must be non-negative");
    cfg.seeds.push_back(static_cast<std::uint64_t>(seed));
  }
  if (cfg.seeds.empty()) throw ConfigError("experiment.seeds", "at least one seed is required");
  if (std::set(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size() ||
      std::set(cfg.agents.begin(), cfg.agents.end()).size() != cfg.agents.size()) {
    throw ConfigError("experiment", "duplicate entries in seeds or agents");
  }
  cfg.output = r.path("experiment.output");
  if (cfg.output.empty()) throw ConfigError("experiment.output", "required");
  cfg.full_gp_oracle = r.boolean("experiment.full_gp_oracle", cfg.full_gp_oracle);
  cfg.full_gp.max_iterations = static_cast<int>(
      r.integer("experiment.full_gp_iterations", cfg.full_gp.max_iterations, 1));

  DataSpec& d = cfg.data;
  const std::string source = r.text("data.source", "synthetic");
  if (source == "synthetic") {
    d.source = DataSource::synthetic;
  } else if (source == "csv") {
    d.source = DataSource::csv;
  } else if (source == "raster") {
    d.source = DataSource::raster;
  } else {
    throw ConfigError("data.source", "expected synthetic, csv or raster, got '" + source + "'");
  }
  if (d.source == DataSource::synthetic) {
    // One value for every axis, or one per axis.
    const auto dim = static_cast<std::size_t>(r.integer("data.dim", 2, 1));
    const auto per_axis = [&](const std::string& field, double fallback) {
      std::vector<double> v = r.reals(field);
      if (v.empty()) v.push_back(fallback);
      if (v.size() == 1) v.resize(dim, v.front());
      if (v.size() != dim) {
        throw ConfigError(field, "expected 1 or " + std::to_string(dim) + " values");
      }
      return v;
    };
    const auto lo = per_axis("data.grid_min", 0.0);
    const auto hi = per_axis("data.grid_max", 5.0);
    const auto points = per_axis("data.grid_points", 40.0);
    d.grid.axes.clear();
    for (std::size_t k = 0; k < dim; ++k) {
      if (!(hi[k] > lo[k])) throw ConfigError("data.grid_max", "must exceed grid_min");
      if (points[k] < 2 || points[k] != std::floor(points[k])) {
        throw ConfigError("data.grid_points", "expected integers of at least 2");
      }
      d.grid.axes.push_back({lo[k], hi[k], static_cast<Index>(points[k])});
    }
    const std::string sampling = r.text("data.sampling", "grid");
    if (sampling != "grid" && sampling != "scatter") {
      throw ConfigError("data.sampling", "expected grid or scatter, got '" + sampling + "'");
    }
    d.scatter = sampling == "scatter";
    d.scatter_points = r.integer("data.scatter_points", d.grid.size(), 2);
    if (!r.has("data.theta_true")) {
      throw ConfigError("data.theta_true", "required for synthetic data");
    }
  } else {
    d.path = r.path("data.path");
    if (d.path.empty()) throw ConfigError("data.path", "required for file sources");
    d.test_path = r.path("data.test_path");
    if (d.source == DataSource::raster && !d.test_path.empty()) {
      throw ConfigError("data.test_path", "only supported for csv sources");
    }
  }
  if (r.has("data.theta_true")) {
    const auto t = r.reals("data.theta_true");
    if (t.size() < 3) throw ConfigError("data.theta_true", "expected l1..lD,sigma_f,sigma_eps");
    Vector v(static_cast<Index>(t.size()));
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (!(t[k] > 0.0)) throw ConfigError("data.theta_true", "values must be positive");
      v(static_cast<Index>(k)) = t[k];
    }
    d.theta_true = Hyperparams::from_natural(v);
    if (d.source == DataSource::synthetic && d.theta_true->input_dim() != d.grid.dim()) {
      throw ConfigError("data.theta_true", "needs dim + 2 values");
    }
  }
  d.test_points = r.integer("data.test_points", d.test_points, 0);
  const std::string test_mode = r.text("data.test_mode", "global");
  if (test_mode == "global") {
    d.test_mode = TestMode::global;
  } else if (test_mode == "per_agent") {
    d.test_mode = TestMode::per_agent;
    if (d.source == DataSource::synthetic) {
      throw ConfigError("data.test_mode", "per_agent needs a file source");
    }
  } else {
    throw ConfigError("data.test_mode", "expected global or per_agent, got '" + test_mode + "'");
  }
  try {
    d.partition = parse_partition_scheme(r.text("data.partition", "grid"));
  } catch (const InvalidInput& e) {
    throw ConfigError("data.partition", e.what());
  }

  read_admm(r, "pxpgp", cfg.pxpgp);
  read_admm(r, "baseline", cfg.baseline);

  for (AdmmConfig* c : {&cfg.pxpgp, &cfg.baseline}) {
    if (r.has("sparse.inducing_count")) {
      c->inducing_count = r.integer("sparse.inducing_count", 0, 1);
    }
    if (r.has("sparse.gapx_samples")) {
      c->gapx_sample_count = r.integer("sparse.gapx_samples", 0, 0);
    }
    c->sparse.boundary_weight = r.real("sparse.boundary_weight", c->sparse.boundary_weight);
    c->sparse.repulsive_weight = r.real("sparse.repulsive_weight", c->sparse.repulsive_weight);
    if (c->sparse.boundary_weight < 0.0 || c->sparse.repulsive_weight < 0.0) {
      throw ConfigError("sparse", "penalty weights must be non-negative");
    }
    if (r.has("sparse.min_separation")) {
      c->sparse.min_separation = r.positive("sparse.min_separation", 1.0);
    }
    c->sparse.optimizer.step = r.positive("sparse.adam_step", c->sparse.optimizer.step);
    c->sparse.optimizer.max_iterations = static_cast<int>(
        r.integer("sparse.adam_iterations", c->sparse.optimizer.max_iterations, 1));
  }

  NetworkSpec& n = cfg.network;
  n.topology = r.text("network.topology", n.topology);
  if (n.topology == "file") {
    n.edge_file = r.path("network.edge_file");
    if (n.edge_file.empty()) throw ConfigError("network.edge_file", "required for topology = file");
  } else if (n.topology != "random") {
    try {
      (void)parse_topology(n.topology);
    } catch (const InvalidInput& e) {
      throw ConfigError("network.topology", e.what());
    }
  }
  n.extra_edge_probability = r.real("network.extra_edge_probability", n.extra_edge_probability);
  if (n.extra_edge_probability < 0.0 || n.extra_edge_probability > 1.0) {
    throw ConfigError("network.extra_edge_probability", "must lie in [0, 1]");
  }
  n.early_stop = r.boolean("network.early_stop", n.early_stop);
  n.adapt_rho = r.boolean("network.adapt_rho", n.adapt_rho);
  n.early_stop_rounds = static_cast<int>(r.integer("network.early_stop_rounds", n.early_stop_rounds, 1));

  const bool any_dec = std::any_of(cfg.methods.begin(), cfg.methods.end(), is_decentralized);
  for (int m : cfg.agents) {
    if (any_dec && m < 2) {
      throw ConfigError("experiment.agents", "decentralized methods need at least two agents");
    }
    if (d.partition == PartitionScheme::grid) {
      const Index dim = d.source == DataSource::synthetic ? d.grid.dim() : 0;
      if (dim > 0) {
        const auto side = static_cast<long long>(std::llround(std::pow(m, 1.0 / dim)));
        long long count = 1;
        for (Index k = 0; k < dim; ++k) count *= side;
        if (count != m) {
          throw ConfigError("experiment.agents",
                            std::to_string(m) + " is not a perfect power for the grid partition");
        }
      }
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  return parse_config(in, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

std::int64_t seed_offset_from_env() {
  const char* v = std::getenv("PXPGP_SEED_OFFSET");
  if (v == nullptr || *v == '\0') return 0;
  const std::string s(v);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("PXPGP_SEED_OFFSET", "expected an integer, got '" + s + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics table

namespace {

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  Index dim = 0;
  for (const auto& r : rows) dim = std::max(dim, r.theta.size() - 2);
  out << "method,M,seed";
  for (Index d = 0; d < dim; ++d) out << ",l" << (d + 1);
  out << ",sigma_f,sigma_eps,nrmse,nlpd,iterations,converged,scalars_communicated,"
         "log_dist_full_gp\n";
  for (const auto& r : rows) {
    if (r.theta.size() != dim + 2) throw InvalidInput("metrics rows differ in dimension");
    out << to_string(r.method) << ',' << r.agents << ',' << r.seed;
    for (Index k = 0; k < r.theta.size(); ++k) out << ',' << format_real(r.theta(k));
    out << ',' << format_real(r.nrmse) << ',' << format_real(r.nlpd) << ','
        << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << r.scalars_communicated
        << ',' << format_real(r.log_distance_full_gp) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty metrics file", 1);
  std::vector<std::string> header;
  boost::algorithm::split(header, line, boost::is_any_of(","));
  if (header.size() < 11 || header[0] != "method") {
    throw ParseError("unexpected metrics header", 1);
  }
  const std::size_t n_theta = header.size() - 9;
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    boost::algorithm::split(cells, line, boost::is_any_of(","));
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields", line_no);
    }
    try {
      const auto real = [](const std::string& s) {
        return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
      };
      MetricsRow r;
      r.method = parse_method(cells[0]);
      r.agents = std::stoi(cells[1]);
      r.seed = std::stoull(cells[2]);
      r.theta.resize(static_cast<Index>(n_theta));
      for (std::size_t k = 0; k < n_theta; ++k) r.theta(static_cast<Index>(k)) = real(cells[3 + k]);
      std::size_t c = 3 + n_theta;
      r.nrmse = real(cells[c++]);
      r.nlpd = real(cells[c++]);
      r.iterations = std::stoi(cells[c++]);
      r.converged = cells[c++] == "1";
      r.scalars_communicated = std::stoull(cells[c++]);
      r.log_distance_full_gp = real(cells[c++]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed metrics row: ") + e.what(), line_no);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Experiment runner

namespace {

struct SeedData {
  Dataset train;
  Dataset test;  // empty in per_agent mode
  double output_mean = 0.0;
  double output_std = 1.0;
  std::optional<Hyperparams> full_gp;
  OptimizeResult full_gp_details;
  double full_gp_ms = 0.0;
  std::string error;
};

std::uint64_t effective_seed(std::uint64_t seed, std::int64_t offset) {
  return static_cast<std::uint64_t>(static_cast<std::int64_t>(seed) + offset);
}

// Held-out rows drawn without replacement; the rest stay in `train`.
void hold_out(Dataset& train, Dataset& test, Index count, std::uint64_t seed) {
  if (count >= train.size()) throw InvalidInput("data.test_points: not enough rows to hold out");
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  for (Index i = 0; i < train.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Index> held(order.begin(), order.begin() + count);
  std::vector<Index> kept(order.begin() + count, order.end());
  std::sort(held.begin(), held.end());
  std::sort(kept.begin(), kept.end());
  test = train.subset(held);
  train = train.subset(kept);
}

SeedData build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const DataSpec& d = cfg.data;
  SeedData out;
  switch (d.source) {
    case DataSource::synthetic: {
      if (d.scatter) {
        Vector lo(d.grid.dim()), hi(d.grid.dim());
        for (Index k = 0; k < d.grid.dim(); ++k) {
          lo(k) = d.grid.axes[static_cast<std::size_t>(k)].min;
          hi(k) = d.grid.axes[static_cast<std::size_t>(k)].max;
        }
        const Matrix train_x = uniform_inputs(lo, hi, d.scatter_points, seed);
        const Matrix test_x = uniform_inputs(lo, hi, d.test_points, seed ^ 0x5bd1e995ULL);
        Matrix all(train_x.rows() + test_x.rows(), train_x.cols());
        all << train_x, test_x;
        const Dataset joint = sample_gp_at(all, *d.theta_true, seed);
        std::vector<Index> a(static_cast<std::size_t>(train_x.rows())), b(static_cast<std::size_t>(test_x.rows()));
        for (Index i = 0; i < train_x.rows(); ++i) a[static_cast<std::size_t>(i)] = i;
        for (Index i = 0; i < test_x.rows(); ++i) b[static_cast<std::size_t>(i)] = train_x.rows() + i;
        out.train = joint.subset(a);
        out.test = joint.subset(b);
      } else {
        SyntheticSplit s = sample_gp_with_test(d.grid, *d.theta_true, d.test_points, seed);
        out.train = std::move(s.train);
        out.test = std::move(s.test);
      }
      break;
    }
    case DataSource::csv: {
      out.train = read_table(d.path);
      if (!d.test_path.empty()) {
        out.test = read_table(d.test_path);
      } else if (d.test_mode == TestMode::global && d.test_points > 0) {
        hold_out(out.train, out.test, d.test_points, seed);
      }
      break;
    }
    case DataSource::raster: {
      RasterData r = read_grid_raster(d.path);
      out.train = std::move(r.data);
      out.output_mean = r.output_mean;
      out.output_std = r.output_std;
      if (d.test_mode == TestMode::global && d.test_points > 0) {
        hold_out(out.train, out.test, d.test_points, seed);
      }
      break;
    }
  }
  return out;
}

Graph build_graph(const NetworkSpec& n, int agents, std::uint64_t seed) {
  if (n.topology == "file") {
    std::ifstream in(n.edge_file);
    if (!in) throw InvalidInput("cannot read " + n.edge_file.string());
    Graph g = read_edge_list(in, agents);
    if (g.size() != agents) {
      throw InvalidInput("network.edge_file has " + std::to_string(g.size()) +
                         " agents, experiment uses " + std::to_string(agents));
    }
    return g;
  }
  if (n.topology == "random") return random_connected_graph(agents, n.extra_edge_probability, seed);
  return make_topology(parse_topology(n.topology), agents);
}

struct CellResult {
  MetricsRow row;
  json summary;
  std::string trace;
  std::string agent_table;
  std::string error;
};

// Every test point is predicted by the agent whose tile contains it, from
// that agent's augmented data and its own estimate.
Posterior routed_predict(const Partition& partition, const std::vector<Dataset>& augmented,
                         const std::vector<Hyperparams>& thetas, const Matrix& Xq) {
  std::vector<std::vector<Index>> routed(augmented.size());
  for (Index q = 0; q < Xq.rows(); ++q) {
    const Vector x = Xq.row(q).transpose();
    routed[static_cast<std::size_t>(partition.locate(x))].push_back(q);
  }
  Posterior out{Vector(Xq.rows()), Vector(Xq.rows())};
  for (std::size_t a = 0; a < routed.size(); ++a) {
    if (routed[a].empty()) continue;
    Matrix Xa(static_cast<Index>(routed[a].size()), Xq.cols());
    for (std::size_t k = 0; k < routed[a].size(); ++k) Xa.row(static_cast<Index>(k)) = Xq.row(routed[a][k]);
    const Posterior p = predict(augmented[a], thetas[a], Xa);
    for (std::size_t k = 0; k < routed[a].size(); ++k) {
      out.mean(routed[a][k]) = p.mean(static_cast<Index>(k));
      out.variance(routed[a][k]) = p.variance(static_cast<Index>(k));
    }
  }
  return out;
}

std::string cell_name(Method m, int agents, std::uint64_t seed) {
  return to_string(m) + "_M" + std::to_string(agents) + "_seed" + std::to_string(seed);
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Everything needed to re-check the stopping rule offline. Doubles are
// written with round-trip precision.
json final_state_json(const ConvergenceReport& report, const AdmmConfig& admm) {
  json agents = json::array();
  for (const auto& a : report.final_agents) {
    agents.push_back({{"theta", vector_json(a.theta)}, {"u", vector_json(a.u)}, {"rho", a.rho}});
  }
  return {{"z", vector_json(report.z)},
          {"z_previous", vector_json(report.z_previous)},
          {"eps_abs", admm.eps_abs},
          {"eps_rel", admm.eps_rel},
          {"agents", agents}};
}

// Largest box and separation penalties over the shared pseudo-inputs, with
// the bounds and separation each sparse fit used.
json penalty_json(const std::vector<Dataset>& parts, const std::vector<PseudoDataset>& shared,
                  const SparseConfig& sparse) {
  double boundary = 0.0, repulsive = 0.0;
  for (const auto& p : shared) {
    const Bounds bounds = Bounds::of(parts[static_cast<std::size_t>(p.agent_id)].X);
    const double d_min = sparse.min_separation.value_or(default_min_separation(bounds, p.size()));
    const InducingSet inducing{p.Xp};
    boundary = std::max(boundary, boundary_penalty(inducing, bounds));
    repulsive = std::max(repulsive, repulsive_penalty(inducing, d_min));
  }
  return {{"boundary_max", boundary}, {"repulsive_max", repulsive}, {"fits", shared.size()}};
}

CellResult run_cell(const ExperimentConfig& cfg, Method method, int agents,
                    std::uint64_t seed, const SeedData& data) {
  CellResult out;
  MetricsRow& row = out.row;
  row.method = method;
  row.agents = agents;
  row.seed = seed;
  row.log_distance_full_gp = std::numeric_limits<double>::quiet_NaN();
  json& s = out.summary;
  s["method"] = to_string(method);
  s["M"] = agents;
  s["seed"] = seed;

  const auto start = std::chrono::steady_clock::now();

  Dataset train = data.train;
  Dataset test = data.test;
  const Partition partition = partition_inputs(train.X, agents, cfg.data.partition);
  std::vector<Dataset> parts = split(train, partition);
  if (cfg.data.test_mode == TestMode::per_agent && cfg.data.test_path.empty()) {
    // Each agent holds out test_points of its own rows.
    std::vector<Dataset> tests;
    for (std::size_t a = 0; a < parts.size(); ++a) {
      Dataset t;
      hold_out(parts[a], t, cfg.data.test_points, agent_seed(seed, static_cast<int>(a), 3));
      tests.push_back(std::move(t));
    }
    test = tests.front();
    for (std::size_t a = 1; a < tests.size(); ++a) test = Dataset::concat(test, tests[a]);
    train = parts.front();
    for (std::size_t a = 1; a < parts.size(); ++a) train = Dataset::concat(train, parts[a]);
  }

  Hyperparams estimate;
  Posterior post;
  std::ostringstream trace;
  trace << std::setprecision(17);
  if (method == Method::full_gp) {
    OptimizeResult details;
    if (data.full_gp && cfg.data.test_mode == TestMode::global) {
      estimate = *data.full_gp;
      details = data.full_gp_details;
    } else {
      estimate = fit_full_gp(train, default_init(train), cfg.full_gp, &details);
    }
    row.iterations = details.iterations;
    row.converged = details.converged;
    trace << "iter,objective\n";
    for (std::size_t k = 0; k < details.trace.size(); ++k) trace << k << ',' << details.trace[k] << '\n';
    if (test.size() > 0) post = predict(train, estimate, test.X);
  } else {
    const Variant variant = variant_of(method);
    const bool pxp = variant == Variant::pxpgp;
    AdmmConfig admm = pxp ? cfg.pxpgp : cfg.baseline;
    if (is_decentralized(method)) {
      const Graph graph = build_graph(cfg.network, agents, seed);
      DecConfig dec;
      dec.admm = admm;
      dec.early_stop = cfg.network.early_stop;
      dec.early_stop_rounds = cfg.network.early_stop_rounds;
      dec.adapt_rho = cfg.network.adapt_rho;
      const DecentralizedRun run = run_decentralized(parts, graph, variant, dec, seed);
      if (pxp) s["sparse_penalty"] = penalty_json(parts, run.shared, admm.sparse);
      estimate = run.theta;
      row.iterations = run.report.iterations;
      row.converged = run.report.converged;
      row.scalars_communicated = run.report.scalars_communicated();
      write_report_csv(trace, run.report);
      std::ostringstream table;
      write_agent_thetas_csv(table, run.thetas);
      out.agent_table = table.str();
      s["consensus_spread"] = run.spread;
      s["flood_rounds"] = run.flood_rounds;
      s["edges"] = graph.edge_count();
      s["topology"] = cfg.network.topology;
      s["armijo_failures"] = run.report.armijo_failures;
      s["setup_scalars"] = run.report.setup_ledger.scalars_sent;
      s["loop_scalars"] = run.report.loop_ledger.scalars_sent;
      if (test.size() > 0) post = routed_predict(partition, run.augmented, run.thetas, test.X);
    } else {
      const CentralizedRun run = run_centralized(parts, variant, admm, seed);
      s["final_state"] = final_state_json(run.report, admm);
      if (pxp) s["sparse_penalty"] = penalty_json(parts, run.shared, admm.sparse);
      estimate = run.theta;
      row.iterations = run.report.iterations;
      row.converged = run.report.converged;
      row.scalars_communicated = run.report.scalars_communicated();
      write_report_csv(trace, run.report);
      s["armijo_failures"] = run.report.armijo_failures;
      s["setup_scalars"] = run.report.setup_ledger.scalars_sent;
      s["loop_scalars"] = run.report.loop_ledger.scalars_sent;
      if (test.size() > 0) {
        const std::vector<Hyperparams> same(parts.size(), estimate);
        post = routed_predict(partition, run.augmented, same, test.X);
      }
    }
  }

  row.theta = estimate.natural_values();
  if (test.size() >= 2) {
    row.nrmse = nrmse(post.mean, test.y);
    row.nlpd = nlpd(post, test.y);
  } else {
    row.nrmse = row.nlpd = std::numeric_limits<double>::quiet_NaN();
  }
  if (data.full_gp) {
    row.log_distance_full_gp =
        (estimate.log_values() - data.full_gp->log_values()).cwiseAbs().maxCoeff();
  }
  row.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - start).count();
  if (method == Method::full_gp && data.full_gp) row.wall_ms += data.full_gp_ms;

  s["theta"] = vector_json(row.theta);
  s["log_theta"] = vector_json(estimate.log_values());
  s["nrmse"] = row.nrmse;
  s["nlpd"] = row.nlpd;
  s["iterations"] = row.iterations;
  s["converged"] = row.converged;
  s["scalars_communicated"] = row.scalars_communicated;
  s["log_dist_full_gp"] = row.log_distance_full_gp;
  s["wall_ms"] = row.wall_ms;
  s["train_points"] = train.size();
  s["test_points"] = test.size();
  if (cfg.data.theta_true) {
    s["hyperparam_error"] = vector_json(hyperparam_error(estimate, *cfg.data.theta_true));
  }
  out.trace = trace.str();
  return out;
}

void write_atomically(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + tmp.string());
    out << content;
    if (!out) throw InvalidInput("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

json metadata(const ExperimentConfig& cfg, std::int64_t offset) {
  json m;
  m["nrmse"] = "sqrt(mean((mu - y)^2)) / (max(y) - min(y)) over the test points";
  m["nlpd"] = "mean of 0.5 log(2 pi var) + (y - mu)^2 / (2 var), var includes sigma_eps^2";
  m["prediction"] = "test points routed to the agent whose tile contains them";
  m["test_standardization"] = cfg.data.source == DataSource::raster
                                  ? "outputs standardized by the raster mean and std"
                                  : "none";
  m["seed_offset"] = offset;
  m["log_dist_full_gp"] = "max over coordinates of |log theta - log theta_full_gp|";
  return m;
}

template <typename Task>
void parallel_for(std::size_t count, int jobs, const Task& task) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  fs::create_directories(cfg.output);
  std::mutex log_mutex;
  const auto log = [&](const std::string& line) {
    if (options.log == nullptr) return;
    std::lock_guard lock(log_mutex);
    *options.log << line << std::endl;
  };

  std::vector<std::uint64_t> seeds;
  for (auto s : cfg.seeds) seeds.push_back(effective_seed(s, options.seed_offset));

  // Data and the pooled full-GP fit are shared by every cell of a seed.
  std::vector<SeedData> data(seeds.size());
  const bool needs_oracle = cfg.full_gp_oracle ||
      std::find(cfg.methods.begin(), cfg.methods.end(), Method::full_gp) != cfg.methods.end();
  parallel_for(seeds.size(), options.jobs, [&](std::size_t i) {
    try {
      data[i] = build_data(cfg, seeds[i]);
      if (needs_oracle && cfg.data.test_mode == TestMode::global) {
        const auto t0 = std::chrono::steady_clock::now();
        data[i].full_gp = fit_full_gp(data[i].train, default_init(data[i].train), cfg.full_gp,
                                      &data[i].full_gp_details);
        data[i].full_gp_ms = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - t0).count();
      }
      log("seed " + std::to_string(seeds[i]) + ": data ready");
    } catch (const std::exception& e) {
      data[i].error = e.what();
      log("seed " + std::to_string(seeds[i]) + ": " + e.what());
    }
  });

  struct Cell {
    Method method;
    int agents;
    std::size_t seed_index;
  };
  std::vector<Cell> cells;
  for (Method m : cfg.methods) {
    for (int a : cfg.agents) {
      for (std::size_t i = 0; i < seeds.size(); ++i) cells.push_back({m, a, i});
    }
  }
  std::vector<CellResult> results(cells.size());
  parallel_for(cells.size(), options.jobs, [&](std::size_t k) {
    const Cell& c = cells[k];
    const std::uint64_t seed = seeds[c.seed_index];
    const std::string name = cell_name(c.method, c.agents, seed);
    CellResult& r = results[k];
    try {
      if (!data[c.seed_index].error.empty()) throw Error(data[c.seed_index].error);
      r = run_cell(cfg, c.method, c.agents, seed, data[c.seed_index]);
      write_atomically(cfg.output / ("trace_" + name + ".csv"), r.trace);
      if (!r.agent_table.empty()) {
        write_atomically(cfg.output / ("agents_" + name + ".csv"), r.agent_table);
      }
      r.summary["status"] = "ok";
      r.summary["metadata"] = metadata(cfg, options.seed_offset);
      log(name + ": ok in " + std::to_string(static_cast<long long>(r.row.wall_ms)) + " ms");
    } catch (const std::exception& e) {
      r.error = e.what();
      r.summary = json{{"method", to_string(c.method)}, {"M", c.agents}, {"seed", seed},
                       {"status", "failed"}, {"error", r.error}};
      log(name + ": failed: " + r.error);
    }
    write_atomically(cfg.output / ("summary_" + name + ".json"), r.summary.dump(2) + "\n");
  });

  std::vector<MetricsRow> rows;
  bool failed = false;
  for (const auto& r : results) {
    if (r.error.empty()) {
      rows.push_back(r.row);
    } else {
      failed = true;
    }
  }
  std::ostringstream table;
  write_metrics_csv(table, rows);
  write_atomically(cfg.output / "metrics.csv", table.str());
  return failed ? 2 : 0;
}

int run_experiment(const fs::path& config_path, const RunOptions& options, std::ostream& err) {
  ExperimentConfig cfg;
  RunOptions opts = options;
  try {
    cfg = load_config(config_path);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  }
  try {
    return run_experiment(cfg, opts);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

void generate_datasets(const ExperimentConfig& cfg, std::int64_t seed_offset) {
  for (auto s : cfg.seeds) {
    const std::uint64_t seed = effective_seed(s, seed_offset);
    const SeedData data = build_data(cfg, seed);
    const fs::path dir = cfg.output / "data" / ("seed" + std::to_string(seed));
    fs::create_directories(dir);
    write_table(dir / "train.csv", data.train);
    if (data.test.size() > 0) write_table(dir / "test.csv", data.test);
    for (int m : cfg.agents) {
      const auto parts = partition_spatial(data.train, m, cfg.data.partition);
      const fs::path sub = dir / ("M" + std::to_string(m));
      fs::create_directories(sub);
      for (std::size_t a = 0; a < parts.size(); ++a) {
        write_table(sub / ("agent" + std::to_string(a) + ".csv"), parts[a]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Report

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

void write_report(const fs::path& dir) {
  std::ifstream in(dir / "metrics.csv");
  if (!in) throw InvalidInput("cannot read " + (dir / "metrics.csv").string());
  const std::vector<MetricsRow> rows = read_metrics_csv(in);

  std::vector<std::string> quantities;
  Index dim = rows.empty() ? 0 : rows.front().theta.size() - 2;
  for (Index d = 0; d < dim; ++d) quantities.push_back("l" + std::to_string(d + 1));
  for (const char* q : {"sigma_f", "sigma_eps", "nrmse", "nlpd", "iterations",
                        "scalars_communicated", "log_dist_full_gp"}) {
    quantities.emplace_back(q);
  }

  // Keyed by M, then method in order of first appearance.
  std::map<int, std::vector<std::pair<Method, std::vector<const MetricsRow*>>>> groups;
  for (const auto& r : rows) {
    auto& list = groups[r.agents];
    auto it = std::find_if(list.begin(), list.end(), [&](const auto& g) { return g.first == r.method; });
    if (it == list.end()) {
      list.push_back({r.method, {}});
      it = std::prev(list.end());
    }
    it->second.push_back(&r);
  }

  std::ostringstream out;
  out << std::setprecision(17) << "M,method,quantity,n,mean,median,q1,q3,min,max\n";
  for (const auto& [m, list] : groups) {
    for (const auto& [method, members] : list) {
      for (std::size_t q = 0; q < quantities.size(); ++q) {
        std::vector<double> v;
        for (const MetricsRow* r : members) {
          double x = 0.0;
          const auto k = static_cast<Index>(q);
          if (k < r->theta.size()) {
            x = r->theta(k);
          } else {
            switch (k - r->theta.size()) {
              case 0: x = r->nrmse; break;
              case 1: x = r->nlpd; break;
              case 2: x = r->iterations; break;
              case 3: x = static_cast<double>(r->scalars_communicated); break;
              default: x = r->log_distance_full_gp; break;
            }
          }
          if (!std::isnan(x)) v.push_back(x);
        }
        out << m << ',' << to_string(method) << ',' << quantities[q] << ',' << v.size();
        if (v.empty()) {
          out << ",nan,nan,nan,nan,nan,nan\n";
          continue;
        }
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        out << ',' << mean << ',' << quantile(v, 0.5) << ',' << quantile(v, 0.25) << ','
            << quantile(v, 0.75) << ',' << *std::min_element(v.begin(), v.end()) << ','
            << *std::max_element(v.begin(), v.end()) << '\n';
      }
    }
  }
  write_atomically(dir / "report.csv", out.str());
}

}  // namespace pxpgp
