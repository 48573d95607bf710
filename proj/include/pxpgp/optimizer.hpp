#pragma once

#include <functional>
#include <vector>

#include "pxpgp/gp_core.hpp"

namespace pxpgp {

/// Objective callback: returns f(x) and, when `grad` is non-null, writes the
/// gradient into it. May throw (e.g. IllConditioned); optimizers treat a
/// throwing trial point as a rejected step.
using Objective = std::function<double(const Vector& x, Vector* grad)>;

struct AdamOptions {
  double step = 0.05;
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Step halvings tried before an iteration is declared stalled.
  int max_backtracks = 12;
};

struct OptimizeResult {
  Vector x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after every accepted step, [0] = start
};

/// Full-batch Adam with a sufficient-decrease safeguard: a step is only
/// accepted when it does not increase the objective, otherwise the step is
/// halved. The accepted objective trace is therefore non-increasing.
OptimizeResult minimize_adam(const Objective& f, Vector x0,
                             const AdamOptions& options = {});

struct LbfgsOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-8;
  double function_tolerance = 1e-12;
};

/// Quasi-Newton minimization (Ceres line-search L-BFGS).
OptimizeResult minimize_lbfgs(const Objective& f, Vector x0,
                              const LbfgsOptions& options = {});

/// Maximum-likelihood hyperparameters of an exact GP on `data`, starting from
/// `init`. Used for the full-GP reference column.
Hyperparams fit_full_gp(const Dataset& data, const Hyperparams& init,
                        const LbfgsOptions& options = {},
                        OptimizeResult* details = nullptr);

/// Scale-aware default start: lengthscales = extent / 4 per coordinate,
/// sigma_f = std(y), sigma_eps = 0.1 std(y).
Hyperparams default_init(const Dataset& data);

}  // namespace pxpgp
