#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfm/metrics.hpp"
#include "sdfm/semidual.hpp"

namespace sdfm {

enum class Optimizer { SgdConstant, SgdDecay, Adagrad };

std::string to_string(Optimizer opt);
Optimizer parse_optimizer(const std::string& name);

inline constexpr double kAdagradFloor = 1e-10;

struct SolverConfig {
  Optimizer optimizer = Optimizer::Adagrad;
  std::optional<double> base_lr;       // AdaGrad step; defaults to sqrt(N)
  std::size_t constant_phase = 20000;  // AdaGrad iterations at base_lr
  std::size_t decay_phase = 10000;     // followed by inverse-sqrt decay
  std::size_t averaging_window = 5000; // 0 averages every iterate
  std::size_t batch = 256;
  double tau = 0.05;
  std::size_t check_interval = 2000;
  std::size_t max_iterations = 30000;
  std::optional<double> delta;       // F* - F(0) for the theory schedules
  std::optional<double> smoothness;  // L; defaults to smoothness_bound
  std::size_t chi2_samples = std::size_t{1} << 20;
  std::size_t chi2_batch = std::size_t{1} << 13;
  std::size_t value_samples = std::size_t{1} << 13;
  std::size_t delta_probe_samples = 10000;
  /// With an enumerable source, use exact expectations instead of sampled
  /// batches for the gradient.
  bool exact_gradient = false;

  /// AdaGrad with constant steps for 2/3 of `iterations`, inverse-sqrt decay
  /// for the rest, and averaging over the final 1/6.
  static SolverConfig recipe(std::size_t iterations);

  void validate() const;
};

/// Step size at iteration k (0-based). AdaGrad returns the scalar factor
/// that is later divided per coordinate by sqrt(accumulator).
double lr_schedule(const SolverConfig& cfg, std::size_t k, std::size_t n_atoms, double delta = 0.0,
                   double smoothness = 0.0);

/// L_eps: 1/eps for eps > 0; 4 d^{1/4} / delta_min at eps = 0.
double smoothness_bound(const TargetMeasure& target, double eps, std::size_t d, CostKind kind = CostKind::NegDot);

struct CheckRecord {
  std::size_t iteration = 0;
  double chi2 = 0.0;
  double chi2_std_error = 0.0;
  double semidual = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

/// Mutable solver state. `g_avg` holds the gauge-fixed average of the last
/// min(k, window) iterates as of the latest check.
struct SolverState {
  std::vector<double> g;
  std::vector<double> g_avg;
  std::vector<double> accumulator;
  std::size_t k = 0;
  std::vector<CheckRecord> history;
};

/// One ascent step g += lr * grad (AdaGrad: the accumulator is updated
/// first, then each coordinate is divided by sqrt(max(acc, floor))).
void apply_update(Optimizer opt, SolverState& state, std::span<const double> grad, double lr);

enum class StopReason { Converged, MaxIterations };

struct SolveResult {
  Potential potential;
  StopReason reason = StopReason::MaxIterations;
  std::vector<CheckRecord> history;
};

struct SolveHooks {
  /// Called after every check with the averaged potential evaluated there.
  std::function<void(const CheckRecord&, const Potential&)> on_check;
  RunMetrics* metrics = nullptr;
};

/// Stochastic semidual ascent with chi^2 stopping. Training batches and
/// stopping checks use independent child streams of `rng`.
SolveResult solve_sdot(const TargetMeasure& target, const CostConfig& cost, const SolverConfig& cfg,
                       const SourceMeasure& source, Rng rng, const SolveHooks& hooks = {});

/// Same, with the default N(0, I) source (conditions drawn from the target).
SolveResult solve_sdot(const TargetMeasure& target, const CostConfig& cost, const SolverConfig& cfg, Rng rng,
                       const SolveHooks& hooks = {});

}  // namespace sdfm
