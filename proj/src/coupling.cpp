#include "sdfm/coupling.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "sdfm/detail/scores.hpp"
#include "sdfm/error.hpp"

namespace sdfm {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// Coupling-space x-parts of raw rows.
DenseMatrix project_rows(const CostConfig& cost, const DenseMatrix& x, std::size_t expected_dim) {
  const std::size_t raw_d = cost.projection ? cost.projection->d_in : expected_dim;
  if (x.cols() != raw_d) throw ConfigError("noise dimension does not match the coupling space");
  return cost.rows_to_coupling_space(x);
}

void check_noise_conditions(const TargetMeasure& target, const PointBatch& noise) {
  if ((noise.z ? noise.z->cols() : 0) != target.condition_dim()) {
    throw ConfigError("noise condition dimension does not match the target");
  }
}

/// Draws from s_{eps,g} given one row of scores.
std::size_t pick(std::span<const double> z, std::span<const double> b, double eps, Rng& rng,
                 std::vector<double>& scratch) {
  const std::size_t n = z.size();
  if (eps == 0.0) {
    const double hi = max_value(z);
    std::size_t ties = 0;
    std::size_t best = 0;
    double mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (z[j] >= hi - kTieTolerance) {
        ++ties;
        best = j;
        mass += b[j];
      }
    }
    if (ties == 1) return best;
    double u = rng.uniform() * mass;
    std::size_t last = best;
    for (std::size_t j = 0; j < n; ++j) {
      if (z[j] < hi - kTieTolerance) continue;
      last = j;
      u -= b[j];
      if (u < 0.0) return j;
    }
    return last;
  }
  const double inv = 1.0 / eps;
  double hi = kNegInf;
  scratch.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    scratch[j] = z[j] * inv + std::log(b[j]);
    hi = std::max(hi, scratch[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    scratch[j] = std::exp(scratch[j] - hi);
    total += scratch[j];
  }
  double u = rng.uniform() * total;
  std::size_t last = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (scratch[j] <= 0.0) continue;
    last = j;
    u -= scratch[j];
    if (u < 0.0) return j;
  }
  return last;
}

PairBatch assign_rows(const TargetMeasure& target, const Potential& pot, const PointBatch& noise,
                      const std::function<Rng(std::size_t)>& row_rng) {
  const auto t0 = Clock::now();
  check_noise_conditions(target, noise);
  const std::size_t m = noise.size();
  const std::size_t n = target.size();
  const detail::ScoreEngine engine(target, pot);
  const DenseMatrix xc = project_rows(pot.cost, noise.x, target.dim());
  PairBatch out;
  out.index.resize(m);
  const std::size_t rows = std::clamp<std::size_t>((std::size_t{1} << 21) / n, 1, 64);
  const std::size_t shards = (m + rows - 1) / rows;
  const double eps = pot.eps();
  for_each_shard(shards, [&](std::size_t s) {
    const std::size_t i0 = s * rows;
    const std::size_t i1 = std::min(m, i0 + rows);
    std::vector<double> scores((i1 - i0) * n);
    std::vector<double> scratch;
    engine.compute(xc.data() + i0 * xc.cols(), noise.z ? noise.z->data() + i0 * noise.z->cols() : nullptr, i1 - i0,
                   scores.data());
    for (std::size_t i = i0; i < i1; ++i) {
      Rng rng = row_rng(i);
      const std::span<const double> z(scores.data() + (i - i0) * n, n);
      out.index[i] = static_cast<std::uint32_t>(pick(z, target.weights, eps, rng, scratch));
    }
  });
  out.pairing_ms = ms_since(t0);
  out.noise = noise.x;
  out.noise_conditions = noise.z;
  out.provenance = PairProvenance::SemiDiscrete;
  resolve_pairs(target, out);
  return out;
}

}  // namespace

std::string to_string(PairProvenance p) {
  switch (p) {
    case PairProvenance::Independent: return "independent";
    case PairProvenance::SemiDiscrete: return "sd";
    case PairProvenance::MinibatchSinkhorn: return "minibatch-sinkhorn";
    case PairProvenance::MinibatchHungarian: return "minibatch-hungarian";
  }
  return "unknown";
}

std::string to_string(MinibatchMethod m) { return m == MinibatchMethod::Sinkhorn ? "sinkhorn" : "hungarian"; }

MinibatchMethod parse_minibatch_method(const std::string& name) {
  if (name == "sinkhorn") return MinibatchMethod::Sinkhorn;
  if (name == "hungarian") return MinibatchMethod::Hungarian;
  throw ConfigError("unknown minibatch method '" + name + "'");
}

void resolve_pairs(const TargetMeasure& target, PairBatch& batch) {
  const std::size_t m = batch.index.size();
  batch.data = DenseMatrix(m, target.dim());
  if (target.conditional()) {
    batch.conditions = DenseMatrix(m, target.condition_dim());
  } else {
    batch.conditions.reset();
  }
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = batch.index[i];
    if (j >= target.size()) throw ConfigError("pair index out of range");
    std::copy_n(target.points.row(j).begin(), target.dim(), batch.data.row(i).begin());
    if (batch.conditions) {
      std::copy_n(target.conditions->row(j).begin(), target.condition_dim(), batch.conditions->row(i).begin());
    }
  }
}

std::size_t assign(const TargetMeasure& target, const Potential& pot, AugmentedPoint x, Rng& rng) {
  if (x.z.size() != target.condition_dim()) throw ConfigError("assign: condition dimension mismatch");
  const detail::ScoreEngine engine(target, pot);
  std::vector<double> xc = pot.cost.projection ? std::vector<double>{} : std::vector<double>(x.x.begin(), x.x.end());
  if (pot.cost.projection) {
    if (x.x.size() != pot.cost.projection->d_in) throw ConfigError("assign: dimension mismatch");
    xc = pot.cost.projection->apply(x.x);
  } else if (xc.size() != target.dim()) {
    throw ConfigError("assign: dimension mismatch");
  }
  std::vector<double> scores(target.size());
  std::vector<double> scratch;
  engine.compute(xc.data(), x.z.empty() ? nullptr : x.z.data(), 1, scores.data());
  return pick(scores, target.weights, pot.eps(), rng, scratch);
}

PairBatch assign_batch(const TargetMeasure& target, const Potential& pot, const PointBatch& noise, const Rng& rng) {
  return assign_rows(target, pot, noise, [&](std::size_t i) { return rng.split(i); });
}

PairBatch assign_batch(const TargetMeasure& target, const Potential& pot, const PointBatch& noise,
                       std::span<const Rng> row_rngs) {
  if (row_rngs.size() != noise.size()) throw ConfigError("assign_batch: need one generator per noise row");
  return assign_rows(target, pot, noise, [&](std::size_t i) { return row_rngs[i]; });
}

bool laguerre_contains(const TargetMeasure& target, const Potential& pot, std::size_t j, std::span<const double> x) {
  if (pot.eps() != 0.0) throw UnsupportedError("Laguerre cells are defined for eps = 0 only");
  if (pot.cost.kind != CostKind::NegDot) throw UnsupportedError("Laguerre cells require the neg-dot cost");
  if (target.conditional()) throw UnsupportedError("Laguerre cells on conditional targets are not supported");
  if (j >= target.size()) throw ConfigError("cell index out of range");
  const detail::ScoreEngine engine(target, pot);
  std::vector<double> xc = pot.cost.to_coupling_space(x);
  if (xc.size() != target.dim()) throw ConfigError("laguerre_contains: dimension mismatch");
  std::vector<double> scores(target.size());
  engine.compute(xc.data(), nullptr, 1, scores.data());
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (k != j && scores[j] - scores[k] < -kTieTolerance) return false;
  }
  return true;
}

PairBatch couple_independent(const TargetMeasure& target, const PointBatch& noise, Rng& rng) {
  const auto t0 = Clock::now();
  check_noise_conditions(target, noise);
  const CategoricalTable table(target.weights);
  PairBatch out;
  out.index.resize(noise.size());
  for (auto& idx : out.index) idx = static_cast<std::uint32_t>(table.sample(rng));
  out.pairing_ms = ms_since(t0);
  out.noise = noise.x;
  out.noise_conditions = noise.z;
  out.provenance = PairProvenance::Independent;
  resolve_pairs(target, out);
  return out;
}

SinkhornResult sinkhorn_log(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b, double eps,
                            const SinkhornOptions& opts) {
  const std::size_t m = cost.rows();
  const std::size_t n = cost.cols();
  if (m == 0 || n == 0) throw DegenerateInputError("sinkhorn: empty cost matrix");
  if (a.size() != m || b.size() != n) throw ConfigError("sinkhorn: marginal length mismatch");
  if (!(eps > 0.0)) throw DomainError("sinkhorn requires eps > 0");
  std::vector<double> log_a(m);
  std::vector<double> log_b(n);
  for (std::size_t i = 0; i < m; ++i) {
    if (!(a[i] > 0.0)) throw DomainError("sinkhorn: marginals must be strictly positive");
    log_a[i] = std::log(a[i]);
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!(b[j] > 0.0)) throw DomainError("sinkhorn: marginals must be strictly positive");
    log_b[j] = std::log(b[j]);
  }

  const auto [cmin, cmax] = std::minmax_element(cost.flat().begin(), cost.flat().end());
  const double spread = *cmax - *cmin;
  SinkhornResult res;
  res.f.assign(m, 0.0);
  res.g.assign(n, 0.0);
  std::vector<double> col_max(n);
  std::vector<double> col_sum(n);

  // f_i = -e log sum_j b_j exp((g_j - C_ij) / e), exact row marginals.
  auto update_f = [&](double e) {
    const double inv = 1.0 / e;
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = cost.row(i);
      double hi = kNegInf;
      for (std::size_t j = 0; j < n; ++j) hi = std::max(hi, (res.g[j] - row[j]) * inv + log_b[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += std::exp((res.g[j] - row[j]) * inv + log_b[j] - hi);
      res.f[i] = -e * (hi + std::log(s));
    }
  };
  // g_j update; returns the L1 column-marginal error of the state before it.
  auto update_g = [&](double e) {
    const double inv = 1.0 / e;
    std::fill(col_max.begin(), col_max.end(), kNegInf);
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = cost.row(i);
      const double fi = res.f[i] * inv + log_a[i];
      for (std::size_t j = 0; j < n; ++j) col_max[j] = std::max(col_max[j], fi - row[j] * inv);
    }
    std::fill(col_sum.begin(), col_sum.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = cost.row(i);
      const double fi = res.f[i] * inv + log_a[i];
      for (std::size_t j = 0; j < n; ++j) col_sum[j] += std::exp(fi - row[j] * inv - col_max[j]);
    }
    double err = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double lse = col_max[j] + std::log(col_sum[j]);
      // Column mass before the update is b_j exp(g_j / e + lse).
      err += b[j] * std::abs(std::expm1(res.g[j] * inv + lse));
      col_sum[j] = -e * lse;
    }
    return err;
  };

  std::vector<double> stages;
  if (opts.eps_scaling && spread > eps) {
    for (double e = spread; e > eps; e *= 0.5) stages.push_back(e);
  }
  stages.push_back(eps);

  // Scaling iterations on K_ij = a_i b_j exp((f_i + g_j - C_ij) / e), with
  // u, v folded back into f, g whenever they drift far from 1.
  DenseMatrix kernel(m, n);
  std::vector<double> u(m, 1.0), v(n, 1.0), col(n);
  auto fold = [&](double e) {
    for (std::size_t i = 0; i < m; ++i) res.f[i] += e * std::log(u[i]);
    for (std::size_t j = 0; j < n; ++j) res.g[j] += e * std::log(v[j]);
    std::fill(u.begin(), u.end(), 1.0);
    std::fill(v.begin(), v.end(), 1.0);
  };
  auto rebuild = [&](double e) {
    update_f(e);
    const double inv = 1.0 / e;
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = cost.row(i);
      auto k = kernel.row(i);
      const double fi = res.f[i] * inv + log_a[i];
      for (std::size_t j = 0; j < n; ++j) k[j] = std::exp(fi + (res.g[j] - row[j]) * inv + log_b[j]);
    }
  };
  constexpr double kDrift = 30.0;

  for (std::size_t s = 0; s < stages.size(); ++s) {
    const double e = stages[s];
    const bool last = s + 1 == stages.size();
    const double stage_tol = last ? opts.tol : std::max(opts.tol, 1e-2);
    const std::size_t stage_cap = last ? opts.max_sweeps : 50;
    std::size_t stage_sweeps = 0;
    rebuild(e);
    while (true) {
      if (res.sweeps >= opts.max_sweeps) {
        fold(e);
        std::ostringstream os;
        os << "sinkhorn did not converge in " << opts.max_sweeps << " sweeps (residual " << res.residual
           << ", tol " << opts.tol << ")";
        throw ConvergenceError(os.str(), res.residual);
      }
      for (std::size_t i = 0; i < m; ++i) {
        const auto k = kernel.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += k[j] * v[j];
        u[i] = a[i] / acc;
      }
      std::fill(col.begin(), col.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        const auto k = kernel.row(i);
        const double ui = u[i];
        for (std::size_t j = 0; j < n; ++j) col[j] += ui * k[j];
      }
      double err = 0.0;
      bool finite = true;
      double drift = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        finite = finite && std::isfinite(u[i]) && u[i] > 0.0;
        drift = std::max(drift, std::abs(std::log(u[i])));
      }
      for (std::size_t j = 0; j < n; ++j) {
        err += std::abs(v[j] * col[j] - b[j]);
        const double nv = b[j] / col[j];
        finite = finite && std::isfinite(nv) && nv > 0.0;
        drift = std::max(drift, std::abs(std::log(nv)));
      }
      ++res.sweeps;
      ++stage_sweeps;
      if (!finite) {
        // Kernel underflow: redo this sweep in the log domain.
        std::fill(u.begin(), u.end(), 1.0);
        fold(e);
        update_f(e);
        err = update_g(e);
        res.residual = err;
        if (!std::isfinite(err)) throw NumericError("sinkhorn produced non-finite potentials");
        if (err <= stage_tol) break;
        std::copy(col_sum.begin(), col_sum.end(), res.g.begin());
        if (!last && stage_sweeps >= stage_cap) break;
        rebuild(e);
        continue;
      }
      res.residual = err;
      if (err <= stage_tol) break;  // keep v from before the update: rows exact, columns within tol
      for (std::size_t j = 0; j < n; ++j) v[j] = b[j] / col[j];
      if (!last && stage_sweeps >= stage_cap) break;
      if (drift > kDrift) {
        fold(e);
        rebuild(e);
      }
    }
    fold(e);
  }

  res.plan = DenseMatrix(m, n);
  const double inv = 1.0 / eps;
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = cost.row(i);
    auto out = res.plan.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] = std::exp((res.f[i] + res.g[j] - row[j]) * inv + log_a[i] + log_b[j]);
  }
  return res;
}

AssignmentResult hungarian(const DenseMatrix& cost) {
  const std::size_t n = cost.rows();
  if (n == 0) throw DegenerateInputError("hungarian: empty cost matrix");
  if (cost.cols() != n) throw ConfigError("hungarian: cost matrix must be square");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is a virtual start column.
  std::vector<double> u(n + 1, 0.0);
  std::vector<double> v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0);  // column -> row
  std::vector<std::size_t> way(n + 1, 0);
  std::vector<double> minv(n + 1);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      const auto row = cost.row(i0 - 1);
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentResult res;
  res.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) res.row_to_col[match[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) res.cost += cost(i, res.row_to_col[i]);
  res.u.assign(u.begin() + 1, u.end());
  res.v.assign(v.begin() + 1, v.end());
  return res;
}

PairBatch couple_minibatch_ot(const TargetMeasure& target, const PointBatch& noise, const CostConfig& cost, double eps,
                              Rng& rng, MinibatchMethod method, const SinkhornOptions& opts) {
  const auto t0 = Clock::now();
  check_noise_conditions(target, noise);
  const std::size_t n = noise.size();
  if (n == 0) throw DegenerateInputError("minibatch OT needs at least one noise row");
  if (method == MinibatchMethod::Sinkhorn && !(eps > 0.0)) throw ConfigError("minibatch Sinkhorn requires eps > 0");

  const CategoricalTable table(target.weights);
  std::vector<std::uint32_t> atoms(n);
  for (auto& a : atoms) a = static_cast<std::uint32_t>(table.sample(rng));

  const DenseMatrix xc = project_rows(cost, noise.x, target.dim());
  DenseMatrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const AugmentedPoint xi{xc.row(i), noise.z ? noise.z->row(i) : std::span<const double>{}};
    for (std::size_t k = 0; k < n; ++k) c(i, k) = coupling_cost(cost, xi, target.at(atoms[k]));
  }

  PairBatch out;
  out.index.resize(n);
  if (method == MinibatchMethod::Hungarian) {
    const AssignmentResult match = hungarian(c);
    for (std::size_t i = 0; i < n; ++i) out.index[i] = atoms[match.row_to_col[i]];
    out.provenance = PairProvenance::MinibatchHungarian;
  } else {
    // eps is relative to the mean absolute cost of the batch.
    double scale = 0.0;
    for (double v : c.flat()) scale += std::abs(v);
    scale /= static_cast<double>(n * n);
    if (!(scale > 0.0)) scale = 1.0;
    const std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    const SinkhornResult plan = sinkhorn_log(c, uniform, uniform, eps * scale, opts);
    for (std::size_t i = 0; i < n; ++i) out.index[i] = atoms[sample_categorical(rng, plan.plan.row(i))];
    out.provenance = PairProvenance::MinibatchSinkhorn;
  }
  out.pairing_ms = ms_since(t0);
  out.noise = noise.x;
  out.noise_conditions = noise.z;
  resolve_pairs(target, out);
  return out;
}

MinibatchOtCache::MinibatchOtCache(const TargetMeasure& target, const SourceMeasure& source, const CostConfig& cost,
                                   double eps, MinibatchMethod method, std::size_t batch, std::size_t n_batches,
                                   const Rng& rng, const SinkhornOptions& opts)
    : source_(source),
      batch_(batch),
      provenance_(method == MinibatchMethod::Sinkhorn ? PairProvenance::MinibatchSinkhorn
                                                      : PairProvenance::MinibatchHungarian) {
  if (batch == 0 || n_batches == 0) throw ConfigError("minibatch cache needs batch >= 1 and n_batches >= 1");
  const auto t0 = Clock::now();
  entries_.reserve(n_batches);
  for (std::size_t l = 0; l < n_batches; ++l) {
    Entry e{rng.split(2 * l), {}};
    Rng noise_rng = e.noise_rng;
    Rng pair_rng = rng.split(2 * l + 1);
    const WeightedBatch noise = source_.sample(noise_rng, batch_);
    e.index = couple_minibatch_ot(target, noise.points, cost, eps, pair_rng, method, opts).index;
    entries_.push_back(std::move(e));
  }
  precompute_ms_ = ms_since(t0);
}

PairBatch MinibatchOtCache::load(const TargetMeasure& target, std::size_t l) const {
  if (l >= entries_.size()) throw ConfigError("minibatch cache index out of range");
  Rng noise_rng = entries_[l].noise_rng;
  const WeightedBatch noise = source_.sample(noise_rng, batch_);
  PairBatch out;
  out.noise = noise.points.x;
  out.noise_conditions = noise.points.z;
  out.index = entries_[l].index;
  out.provenance = provenance_;
  out.pairing_ms = precompute_ms_ / static_cast<double>(entries_.size());
  resolve_pairs(target, out);
  return out;
}

namespace {

/// Exact transportation LP by successive shortest paths with Dijkstra on
/// reduced costs. Nodes: source S, rows, columns, sink T.
DiscreteOtSolution transport_lp(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b) {
  const std::size_t m = cost.rows();
  const std::size_t n = cost.cols();
  constexpr double kCap = 1e-14;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t S = 0;
  const std::size_t T = m + n + 1;
  const std::size_t V = m + n + 2;
  auto row_node = [](std::size_t i) { return 1 + i; };
  auto col_node = [m](std::size_t j) { return 1 + m + j; };

  DenseMatrix flow(m, n);
  std::vector<double> out_used(m, 0.0);
  std::vector<double> in_used(n, 0.0);
  std::vector<double> pot(V, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double lo = kInf;
    for (std::size_t i = 0; i < m; ++i) lo = std::min(lo, cost(i, j));
    pot[col_node(j)] = lo;
  }
  pot[T] = kInf;
  for (std::size_t j = 0; j < n; ++j) pot[T] = std::min(pot[T], pot[col_node(j)]);

  std::vector<double> dist(V);
  std::vector<std::size_t> prev(V);
  std::vector<char> done(V);
  double shipped = 0.0;
  std::size_t guard = 0;
  const std::size_t max_paths = 4 * (m + 1) * (n + 1) + 16;
  while (1.0 - shipped > 1e-12) {
    if (++guard > max_paths) throw ConvergenceError("transport LP: too many augmenting paths", 1.0 - shipped);
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(done.begin(), done.end(), 0);
    dist[S] = 0.0;
    auto relax = [&](std::size_t u, std::size_t v, double rc) {
      const double nd = dist[u] + std::max(rc, 0.0);
      if (nd < dist[v]) {
        dist[v] = nd;
        prev[v] = u;
      }
    };
    for (std::size_t iter = 0; iter < V; ++iter) {
      std::size_t u = V;
      double best = kInf;
      for (std::size_t k = 0; k < V; ++k) {
        if (!done[k] && dist[k] < best) {
          best = dist[k];
          u = k;
        }
      }
      if (u == V) break;
      done[u] = 1;
      if (u == S) {
        for (std::size_t i = 0; i < m; ++i) {
          if (a[i] - out_used[i] > kCap) relax(S, row_node(i), pot[S] - pot[row_node(i)]);
        }
      } else if (u <= m) {
        const std::size_t i = u - 1;
        for (std::size_t j = 0; j < n; ++j) relax(u, col_node(j), cost(i, j) + pot[u] - pot[col_node(j)]);
        if (out_used[i] > kCap) relax(u, S, pot[u] - pot[S]);
      } else if (u < T) {
        const std::size_t j = u - 1 - m;
        for (std::size_t i = 0; i < m; ++i) {
          if (flow(i, j) > kCap) relax(u, row_node(i), -cost(i, j) + pot[u] - pot[row_node(i)]);
        }
        if (b[j] - in_used[j] > kCap) relax(u, T, pot[u] - pot[T]);
      } else {
        for (std::size_t j = 0; j < n; ++j) {
          if (in_used[j] > kCap) relax(T, col_node(j), pot[T] - pot[col_node(j)]);
        }
      }
    }
    if (!std::isfinite(dist[T])) throw ConvergenceError("transport LP: no augmenting path", 1.0 - shipped);
    for (std::size_t k = 0; k < V; ++k) pot[k] += std::min(dist[k], dist[T]);

    // Bottleneck along the path.
    double amount = kInf;
    for (std::size_t v = T; v != S; v = prev[v]) {
      const std::size_t u = prev[v];
      if (u == S) {
        amount = std::min(amount, a[v - 1] - out_used[v - 1]);
      } else if (v == T) {
        amount = std::min(amount, b[u - 1 - m] - in_used[u - 1 - m]);
      } else if (u <= m && v > m) {
        // forward row -> column arc, unbounded
      } else if (u > m && v <= m && v >= 1) {
        amount = std::min(amount, flow(v - 1, u - 1 - m));
      } else if (v == S) {
        amount = std::min(amount, out_used[u - 1]);
      }
    }
    for (std::size_t v = T; v != S; v = prev[v]) {
      const std::size_t u = prev[v];
      if (u == S) {
        out_used[v - 1] += amount;
      } else if (v == T) {
        in_used[u - 1 - m] += amount;
      } else if (u <= m && v > m) {
        flow(u - 1, v - 1 - m) += amount;
      } else if (u > m && v <= m && v >= 1) {
        flow(v - 1, u - 1 - m) -= amount;
      }
    }
    shipped += amount;
  }

  DiscreteOtSolution sol;
  sol.plan = std::move(flow);
  sol.f.resize(m);
  sol.g.resize(n);
  for (std::size_t i = 0; i < m; ++i) sol.f[i] = -pot[row_node(i)];
  for (std::size_t j = 0; j < n; ++j) sol.g[j] = pot[col_node(j)];
  return sol;
}

}  // namespace

DiscreteOtSolution oracle_discrete_ot(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b,
                                      double eps) {
  const std::size_t m = cost.rows();
  const std::size_t n = cost.cols();
  if (m == 0 || n == 0) throw DegenerateInputError("oracle: empty cost matrix");
  if (a.size() != m || b.size() != n) throw ConfigError("oracle: marginal length mismatch");
  if (m > 512 || n > 512) throw ConfigError("oracle: problems are limited to 512 x 512");
  if (!cost.all_finite()) throw NumericError("oracle: non-finite costs");
  auto check_prob = [](std::span<const double> w) {
    double s = 0.0;
    for (double v : w) {
      if (!(v > 0.0)) throw DomainError("oracle: marginals must be strictly positive");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw DomainError("oracle: marginals must sum to 1");
  };
  check_prob(a);
  check_prob(b);
  if (eps < 0.0) throw DomainError("oracle: eps must be >= 0");

  DiscreteOtSolution sol;
  if (eps > 0.0) {
    SinkhornOptions opts;
    opts.tol = 1e-9;
    opts.max_sweeps = 1000000;
    SinkhornResult r = sinkhorn_log(cost, a, b, eps, opts);
    sol.plan = std::move(r.plan);
    sol.f = std::move(r.f);
    sol.g = std::move(r.g);
  } else {
    const bool square_uniform =
        m == n && std::all_of(a.begin(), a.end(), [&](double v) { return v == a[0]; }) &&
        std::all_of(b.begin(), b.end(), [&](double v) { return v == b[0]; });
    if (square_uniform) {
      const AssignmentResult match = hungarian(cost);
      sol.plan = DenseMatrix(m, n);
      for (std::size_t i = 0; i < m; ++i) sol.plan(i, match.row_to_col[i]) = 1.0 / static_cast<double>(m);
      sol.f = match.u;
      sol.g = match.v;
    } else {
      sol = transport_lp(cost, a, b);
    }
  }
  const double shift = dot(sol.g, b);
  for (double& v : sol.g) v -= shift;
  for (double& v : sol.f) v += shift;

  double value = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = sol.plan(i, j);
      value += p * cost(i, j);
      if (eps > 0.0 && p > 0.0) value += eps * p * std::log(p / (a[i] * b[j]));
    }
  }
  sol.value = value;
  return sol;
}

}  // namespace sdfm
