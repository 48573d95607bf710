#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pxpgp/consensus.hpp"
#include "pxpgp/datagen.hpp"
#include "pxpgp/decentralized.hpp"
#include "pxpgp/errors.hpp"
#include "pxpgp/netsim.hpp"

namespace pxpgp {

/// sqrt(mean((pred - truth)^2)) / (max(truth) - min(truth)).
double nrmse(const Vector& pred_mean, const Vector& truth);

/// Mean of 0.5 log(2 pi var) + (y - mu)^2 / (2 var).
double nlpd(const Posterior& post, const Vector& truth);

/// (estimate - truth) / truth per natural coordinate.
Vector hyperparam_error(const Hyperparams& estimate, const Hyperparams& truth);

enum class Method { full_gp, pxpgp, apxgp, gapxgp, dec_pxpgp, dec_gapxgp };

std::string to_string(Method method);
Method parse_method(const std::string& name);

enum class DataSource { synthetic, csv, raster };
enum class TestMode { global, per_agent };

struct DataSpec {
  DataSource source = DataSource::synthetic;
  GridSpec grid = GridSpec::square(0.0, 5.0, 40);
  bool scatter = false;          // uniform inputs instead of the lattice
  Index scatter_points = 1600;
  std::optional<Hyperparams> theta_true;
  Index test_points = 300;
  TestMode test_mode = TestMode::global;
  std::filesystem::path path;       // csv / raster
  std::filesystem::path test_path;  // csv only; empty draws from `path`
  PartitionScheme partition = PartitionScheme::grid;
};

struct NetworkSpec {
  std::string topology = "ring";  // ring path grid star complete random file
  std::filesystem::path edge_file;
  double extra_edge_probability = 0.1;
  bool early_stop = false;
  int early_stop_rounds = 10;
  bool adapt_rho = false;
};

struct ExperimentConfig {
  std::vector<Method> methods;
  std::vector<int> agents;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output;
  DataSpec data;
  AdmmConfig pxpgp = AdmmConfig::pxpgp_defaults();
  AdmmConfig baseline = AdmmConfig::baseline_defaults();
  NetworkSpec network;
  bool full_gp_oracle = true;
  LbfgsOptions full_gp{};
};

/// Parses the INI grammar documented in the README. Relative paths are
/// resolved against the config file's directory. Throws ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(std::istream& in,
                              const std::filesystem::path& base_dir = ".");

class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : Error(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct MetricsRow {
  Method method = Method::full_gp;
  int agents = 1;
  std::uint64_t seed = 0;
  Vector theta;  // natural
  double nrmse = 0.0;
  double nlpd = 0.0;
  int iterations = 0;
  bool converged = false;
  std::uint64_t scalars_communicated = 0;
  double log_distance_full_gp = 0.0;  // NaN without the oracle
  double wall_ms = 0.0;               // summary JSON only
};

/// Header `method,M,seed,l1..lD,sigma_f,sigma_eps,nrmse,nlpd,iterations,
/// converged,scalars_communicated,log_dist_full_gp`.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

struct RunOptions {
  int jobs = 1;
  std::int64_t seed_offset = 0;
  std::ostream* log = nullptr;
};

/// Runs every (method, M, seed) cell and writes metrics.csv plus one trace
/// CSV and one summary JSON per cell into the output directory. Returns 0
/// when every cell succeeded, 2 otherwise.
int run_experiment(const ExperimentConfig& config, const RunOptions& options);

/// Loads, validates and runs; configuration errors print their field and
/// return 1.
int run_experiment(const std::filesystem::path& config_path,
                   const RunOptions& options, std::ostream& err);

/// Writes the training/test tables of every seed (and the per-agent parts
/// for every M) under <output>/data.
void generate_datasets(const ExperimentConfig& config,
                       std::int64_t seed_offset);

/// Aggregates <dir>/metrics.csv into <dir>/report.csv with one row per
/// (M, method, quantity): n, mean, median, q1, q3, min, max.
void write_report(const std::filesystem::path& dir);

/// PXPGP_SEED_OFFSET, 0 when unset. Throws ConfigError when malformed.
std::int64_t seed_offset_from_env();

}  // namespace pxpgp
