#include "sdfm/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sdfm/error.hpp"

namespace sdfm {
namespace {

enum Streams : std::uint64_t { kTrainStream = 1, kCheckStream = 2, kProbeStream = 3 };

/// Exact sliding-window mean of iterates, kept as sums over fixed-size
/// blocks so the window can be read at any block boundary.
class WindowAverager {
 public:
  WindowAverager(std::size_t n, std::size_t window, std::size_t block) : n_(n), window_(window), block_(block) {
    partial_.assign(n, 0.0);
    if (window_ == 0) {
      total_.assign(n, 0.0);
      return;
    }
    const std::size_t blocks = window_ / block_;
    constexpr std::size_t kMaxDoubles = std::size_t{1} << 27;
    if (blocks * n_ > kMaxDoubles) {
      throw ConfigError("averaging window needs " + std::to_string(blocks) +
                        " blocks; align window and check interval to a larger common divisor");
    }
    ring_.assign(blocks, std::vector<double>(n, 0.0));
  }

  void push(std::span<const double> g) {
    for (std::size_t j = 0; j < n_; ++j) partial_[j] += g[j];
    ++count_;
    if (count_ % block_ != 0) return;
    if (window_ == 0) {
      for (std::size_t j = 0; j < n_; ++j) total_[j] += partial_[j];
    } else {
      ring_[head_].swap(partial_);
      head_ = (head_ + 1) % ring_.size();
    }
    std::fill(partial_.begin(), partial_.end(), 0.0);
  }

  /// Mean of the last min(count, window) iterates. count must sit on a
  /// block boundary.
  std::vector<double> mean() const {
    if (count_ == 0) return std::vector<double>(n_, 0.0);
    if (count_ % block_ != 0) throw ConfigError("averaging read off a block boundary");
    std::vector<double> out(n_, 0.0);
    std::size_t used = 0;
    if (window_ == 0) {
      out = total_;
      used = count_;
    } else {
      const std::size_t filled = std::min(count_ / block_, ring_.size());
      for (std::size_t b = 0; b < filled; ++b) {
        const auto& blk = ring_[(head_ + ring_.size() - 1 - b) % ring_.size()];
        for (std::size_t j = 0; j < n_; ++j) out[j] += blk[j];
      }
      used = filled * block_;
    }
    for (double& v : out) v /= static_cast<double>(used);
    return out;
  }

 private:
  std::size_t n_;
  std::size_t window_;
  std::size_t block_;
  std::size_t count_ = 0;
  std::size_t head_ = 0;
  std::vector<double> partial_;
  std::vector<double> total_;
  std::vector<std::vector<double>> ring_;
};

double now_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string to_string(Optimizer opt) {
  switch (opt) {
    case Optimizer::SgdConstant: return "sgd-constant";
    case Optimizer::SgdDecay: return "sgd-decay";
    case Optimizer::Adagrad: return "adagrad";
  }
  return "unknown";
}

Optimizer parse_optimizer(const std::string& name) {
  if (name == "sgd-constant") return Optimizer::SgdConstant;
  if (name == "sgd-decay") return Optimizer::SgdDecay;
  if (name == "adagrad") return Optimizer::Adagrad;
  throw ConfigError("unknown optimizer '" + name + "'");
}

SolverConfig SolverConfig::recipe(std::size_t iterations) {
  SolverConfig cfg;
  cfg.optimizer = Optimizer::Adagrad;
  cfg.max_iterations = iterations;
  cfg.constant_phase = iterations * 2 / 3;
  cfg.decay_phase = iterations - cfg.constant_phase;
  cfg.averaging_window = std::max<std::size_t>(iterations / 6, 1);
  cfg.check_interval = std::min<std::size_t>(cfg.check_interval, std::max<std::size_t>(iterations, 1));
  return cfg;
}

void SolverConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (check_interval == 0) throw ConfigError("check interval must be >= 1");
  if (optimizer == Optimizer::Adagrad) {
    if (base_lr && !(*base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (averaging_window > constant_phase + decay_phase) {
      throw ConfigError("averaging window exceeds constant_phase + decay_phase");
    }
  } else {
    if (averaging_window > max_iterations) throw ConfigError("averaging window exceeds max iterations");
    if (delta && !(*delta > 0.0)) throw ConfigError("Delta must be > 0");
    if (smoothness && !(*smoothness > 0.0)) throw ConfigError("L must be > 0");
  }
  if (chi2_batch < 2 || chi2_samples < chi2_batch) throw ConfigError("need chi2_samples >= chi2_batch >= 2");
  if (value_samples == 0 || delta_probe_samples == 0) throw ConfigError("probe sample counts must be >= 1");
}

double lr_schedule(const SolverConfig& cfg, std::size_t k, std::size_t n_atoms, double delta, double smoothness) {
  switch (cfg.optimizer) {
    case Optimizer::SgdConstant:
    case Optimizer::SgdDecay: {
      const double d = cfg.delta.value_or(delta);
      const double l = cfg.smoothness.value_or(smoothness);
      if (!(d > 0.0) || !(l > 0.0)) throw ConfigError("theory schedules need Delta > 0 and L > 0");
      if (cfg.optimizer == Optimizer::SgdConstant) {
        if (cfg.max_iterations == 0) throw ConfigError("sgd-constant needs max iterations K >= 1");
        return std::sqrt(d / (l * static_cast<double>(cfg.max_iterations)));
      }
      return std::sqrt(d / (l * static_cast<double>(std::max<std::size_t>(k, 1))));
    }
    case Optimizer::Adagrad: {
      const double base = cfg.base_lr.value_or(std::sqrt(static_cast<double>(n_atoms)));
      if (k < cfg.constant_phase) return base;
      const double c = static_cast<double>(std::max<std::size_t>(cfg.constant_phase, 1));
      return base * std::sqrt(c / static_cast<double>(std::max<std::size_t>(k, 1)));
    }
  }
  throw ConfigError("unknown optimizer");
}

void apply_update(Optimizer opt, SolverState& state, std::span<const double> grad, double lr) {
  if (grad.size() != state.g.size()) throw ConfigError("gradient length does not match the potential");
  if (opt == Optimizer::Adagrad && state.accumulator.size() != state.g.size()) {
    throw ConfigError("AdaGrad accumulator length does not match the potential");
  }
  for (std::size_t j = 0; j < grad.size(); ++j) {
    if (opt == Optimizer::Adagrad) {
      state.accumulator[j] += grad[j] * grad[j];
      state.g[j] += lr * grad[j] / std::sqrt(std::max(state.accumulator[j], kAdagradFloor));
    } else {
      state.g[j] += lr * grad[j];
    }
  }
}

double smoothness_bound(const TargetMeasure& target, double eps, std::size_t d, CostKind kind) {
  if (eps < 0.0) throw DomainError("eps must be >= 0");
  if (eps > 0.0) return 1.0 / eps;
  if (kind != CostKind::NegDot) throw ConfigError("eps = 0 smoothness bound requires the neg-dot cost");
  if (d == 0) throw ConfigError("dimension must be positive");
  const double delta = target.min_pairwise_distance();
  if (!(delta > 0.0)) throw DomainError("eps = 0 requires distinct target points (minimum distance is 0)");
  if (!std::isfinite(delta)) throw DomainError("eps = 0 smoothness bound needs at least two target points");
  return 4.0 * std::pow(static_cast<double>(d), 0.25) / delta;
}

SolveResult solve_sdot(const TargetMeasure& target, const CostConfig& cost, const SolverConfig& cfg,
                       const SourceMeasure& source, Rng rng, const SolveHooks& hooks) {
  cfg.validate();
  cost.validate();
  target.validate();
  if (cost.eps_effective == 0.0 && cost.kind != CostKind::NegDot) {
    throw ConfigError("eps = 0 requires the neg-dot cost");
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = target.size();
  const std::size_t kmax = cfg.max_iterations;

  Rng train_rng = rng.split(kTrainStream);
  Rng check_rng = rng.split(kCheckStream);
  Rng probe_rng = rng.split(kProbeStream);

  Potential pot = Potential::zeros(target, cost);
  const bool exact = cfg.exact_gradient && source.enumerable();
  auto value_of = [&](const Potential& p) {
    if (source.enumerable()) return semidual_value(target, p, source.enumerate());
    return semidual_value(target, p, source.sample(check_rng, cfg.value_samples));
  };

  double delta = 0.0;
  double smooth = 0.0;
  if (cfg.optimizer != Optimizer::Adagrad) {
    if (cfg.delta) {
      delta = *cfg.delta;
    } else {
      const WeightedBatch probe = source.enumerable() ? source.enumerate()
                                                      : source.sample(probe_rng, cfg.delta_probe_samples);
      delta = std::abs(semidual_value(target, pot, probe));
      if (!(delta > 0.0)) delta = 1.0;
    }
    smooth = cfg.smoothness ? *cfg.smoothness
                            : smoothness_bound(target, cost.eps_effective, cost.coupling_dim(source.dim()), cost.kind);
  }

  std::size_t block = cfg.check_interval;
  if (cfg.averaging_window > 0) block = std::gcd(block, cfg.averaging_window);
  if (kmax > 0) block = std::gcd(block, kmax);
  WindowAverager averager(n, cfg.averaging_window, std::max<std::size_t>(block, 1));

  SolverState state;
  state.g.assign(n, 0.0);
  state.accumulator.assign(n, 0.0);

  SolveResult result;
  double f0 = 0.0;
  double last_lr = 0.0;

  // Evaluates the averaged iterate and reports whether tau was reached.
  auto check = [&](std::size_t k) -> bool {
    Potential avg = pot;
    avg.g = averager.mean();
    gauge_fix(avg.g, target.weights);
    CheckRecord rec;
    rec.iteration = k;
    const Chi2Estimate chi = chi2_estimate(target, avg, source, check_rng, cfg.chi2_samples, cfg.chi2_batch);
    rec.chi2 = chi.value;
    rec.chi2_std_error = chi.std_error;
    rec.semidual = value_of(avg);
    rec.lr = last_lr;
    rec.wall_ms = now_ms(start);
    if (!std::isfinite(rec.chi2) || !std::isfinite(rec.semidual)) {
      throw NumericError("non-finite solver statistics at iteration " + std::to_string(k));
    }
    if (k == 0) {
      f0 = rec.semidual;
    } else if (rec.semidual < f0 - 10.0 * std::max(std::abs(f0), 1e-3)) {
      std::ostringstream os;
      os << "semidual diverged at iteration " << k << ": F=" << rec.semidual << " vs initial " << f0
         << " (chi2=" << rec.chi2 << ", lr=" << last_lr << ")";
      throw ConvergenceError(os.str(), rec.chi2);
    }
    state.g_avg = avg.g;
    state.history.push_back(rec);
    if (hooks.metrics) {
      hooks.metrics->record(k, "chi2", rec.chi2);
      hooks.metrics->record(k, "semidual", rec.semidual);
      hooks.metrics->record(k, "lr", rec.lr);
    }
    if (hooks.on_check) hooks.on_check(rec, avg);
    return rec.chi2 <= cfg.tau;
  };

  bool converged = check(0);
  std::vector<double> marginal;
  while (!converged && state.k < kmax) {
    const std::size_t k = state.k;
    pot.g = state.g;
    marginal = exact ? batch_marginal(target, pot, source.enumerate())
                     : batch_marginal(target, pot, source.sample(train_rng, cfg.batch));
    const double lr = lr_schedule(cfg, k, n, delta, smooth);
    last_lr = lr;
    for (std::size_t j = 0; j < n; ++j) marginal[j] = target.weights[j] - marginal[j];
    apply_update(cfg.optimizer, state, marginal, lr);
    for (double v : state.g) {
      if (!std::isfinite(v)) throw NumericError("potential became non-finite at iteration " + std::to_string(k + 1));
    }
    averager.push(state.g);
    state.k = k + 1;
    if (state.k % cfg.check_interval == 0 || state.k == kmax) converged = check(state.k);
  }

  result.potential = pot;
  result.potential.g = state.g_avg;
  result.reason = converged ? StopReason::Converged : StopReason::MaxIterations;
  result.history = state.history;
  auto& prov = result.potential.provenance;
  prov.optimizer = to_string(cfg.optimizer);
  prov.iterations = state.k;
  prov.final_chi2 = state.history.back().chi2;
  prov.averaging_window = cfg.averaging_window;
  prov.wall_ms = now_ms(start);
  return result;
}

SolveResult solve_sdot(const TargetMeasure& target, const CostConfig& cost, const SolverConfig& cfg, Rng rng,
                       const SolveHooks& hooks) {
  return solve_sdot(target, cost, cfg, default_source(target, cost), rng, hooks);
}

}  // namespace sdfm
