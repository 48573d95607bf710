#include "pxpgp/optimizer.hpp"

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>

#include <cmath>
#include <limits>

#include "pxpgp/errors.hpp"

namespace pxpgp {

namespace {

struct Evaluation {
  bool ok = false;
  double value = 0.0;
  Vector gradient;
};

Evaluation evaluate(const Objective& f, const Vector& x) {
  Evaluation e;
  e.gradient.resize(x.size());
  try {
    e.value = f(x, &e.gradient);
    e.ok = std::isfinite(e.value) && e.gradient.allFinite();
  } catch (const Error&) {
    e.ok = false;
  }
  return e;
}

class CeresObjective final : public ceres::FirstOrderFunction {
 public:
  CeresObjective(const Objective& f, int n) : f_(f), n_(n) {}

  bool Evaluate(const double* parameters, double* cost,
                double* gradient) const override {
    const Vector x = Eigen::Map<const Vector>(parameters, n_);
    Vector g(n_);
    try {
      *cost = f_(x, gradient != nullptr ? &g : nullptr);
    } catch (const Error&) {
      return false;
    }
    if (!std::isfinite(*cost)) return false;
    if (gradient != nullptr) {
      if (!g.allFinite()) return false;
      Eigen::Map<Vector>(gradient, n_) = g;
    }
    return true;
  }

  int NumParameters() const override { return n_; }

 private:
  const Objective& f_;
  int n_;
};

}  // namespace

OptimizeResult minimize_adam(const Objective& f, Vector x0,
                             const AdamOptions& options) {
  OptimizeResult result;
  Evaluation current = evaluate(f, x0);
  if (!current.ok) {
    throw IllConditioned("objective could not be evaluated at the start point");
  }
  result.x = std::move(x0);
  result.value = current.value;
  result.trace.push_back(current.value);

  Vector m = Vector::Zero(result.x.size());
  Vector v = Vector::Zero(result.x.size());
  int moment_age = 0;
  bool just_restarted = false;

  for (int it = 1; it <= options.max_iterations; ++it) {
    if (current.gradient.norm() <= options.gradient_tolerance) {
      result.converged = true;
      break;
    }
    ++moment_age;
    m = options.beta1 * m + (1.0 - options.beta1) * current.gradient;
    v = options.beta2 * v +
        (1.0 - options.beta2) * current.gradient.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(options.beta1, moment_age);
    const double bc2 = 1.0 - std::pow(options.beta2, moment_age);
    const Vector direction =
        ((m / bc1).array() / ((v / bc2).array().sqrt() + options.epsilon))
            .matrix();

    double step = options.step;
    bool accepted = false;
    for (int b = 0; b <= options.max_backtracks; ++b, step *= 0.5) {
      Vector trial = result.x - step * direction;
      Evaluation next = evaluate(f, trial);
      if (next.ok && next.value <= current.value) {
        result.x = std::move(trial);
        current = std::move(next);
        accepted = true;
        break;
      }
    }
    result.iterations = it;
    if (!accepted) {
      // Stale momentum can point uphill; restart the moments once. A fresh
      // start that still fails means the method has stalled.
      if (just_restarted) {
        result.converged = true;
        break;
      }
      m.setZero();
      v.setZero();
      moment_age = 0;
      just_restarted = true;
      continue;
    }
    just_restarted = false;
    result.value = current.value;
    result.trace.push_back(current.value);
  }
  result.value = current.value;
  return result;
}

OptimizeResult minimize_lbfgs(const Objective& f, Vector x0,
                              const LbfgsOptions& options) {
  const int n = static_cast<int>(x0.size());
  ceres::GradientProblem problem(new CeresObjective(f, n));
  ceres::GradientProblemSolver::Options solver_options;
  solver_options.line_search_direction_type = ceres::LBFGS;
  solver_options.max_num_iterations = options.max_iterations;
  solver_options.gradient_tolerance = options.gradient_tolerance;
  solver_options.function_tolerance = options.function_tolerance;
  solver_options.logging_type = ceres::SILENT;
  solver_options.minimizer_progress_to_stdout = false;
  solver_options.update_state_every_iteration = false;

  ceres::GradientProblemSolver::Summary summary;
  Vector x = std::move(x0);
  ceres::Solve(solver_options, problem, x.data(), &summary);

  OptimizeResult result;
  result.x = std::move(x);
  result.value = summary.final_cost;
  result.iterations = static_cast<int>(summary.iterations.size());
  result.converged = summary.termination_type == ceres::CONVERGENCE;
  for (const auto& it : summary.iterations) result.trace.push_back(it.cost);
  if (!std::isfinite(summary.final_cost)) {
    throw IllConditioned("L-BFGS failed: " + summary.message);
  }
  return result;
}

Hyperparams fit_full_gp(const Dataset& data, const Hyperparams& init,
                        const LbfgsOptions& options, OptimizeResult* details) {
  data.validate();
  // Per-datum objective; the minimizer is unchanged, tolerances become
  // independent of N.
  const double scale = 1.0 / static_cast<double>(data.size());
  const Objective objective = [&](const Vector& x, Vector* grad) {
    const Hyperparams theta(x);
    if (grad == nullptr) return scale * nll(data, theta);
    auto vg = nll_with_grad(data, theta);
    *grad = scale * vg.gradient;
    return scale * vg.value;
  };
  OptimizeResult result = minimize_lbfgs(objective, init.log_values(), options);
  Hyperparams fitted(result.x);
  if (details != nullptr) *details = std::move(result);
  return fitted;
}

Hyperparams default_init(const Dataset& data) {
  data.validate();
  const Vector extent =
      data.X.colwise().maxCoeff() - data.X.colwise().minCoeff();
  Vector lengthscales(data.dim());
  for (Index d = 0; d < data.dim(); ++d) {
    lengthscales(d) = extent(d) > 0.0 ? extent(d) / 4.0 : 1.0;
  }
  double sd = 0.0;
  if (data.size() > 1) {
    const double mean = data.y.mean();
    sd = std::sqrt((data.y.array() - mean).square().sum() /
                   static_cast<double>(data.size() - 1));
  }
  if (!(sd > 0.0)) sd = 1.0;
  return Hyperparams::from_natural(lengthscales, sd, 0.1 * sd);
}

}  // namespace pxpgp
