#include "sdfm/semidual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "sdfm/detail/scores.hpp"
#include "sdfm/error.hpp"

namespace sdfm {
namespace {

// Accumulated rounding of a length-n probability sum.
double sum_tolerance(std::size_t n) { return std::max(1e-12, 4.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon()); }

constexpr std::size_t kShardRows = 64;

enum StatFlags : unsigned {
  kSoftC = 1u << 0,
  kMarginal = 1u << 1,  // weighted sum of responsibilities
  kChi2 = 1u << 2,      // unweighted sums of s and s^2
  kCost = 1u << 3,
};

struct Stats {
  double weight = 0.0;
  double soft_c = 0.0;
  double cost = 0.0;
  double kl = 0.0;
  std::vector<double> marginal;
  std::vector<double> s_sum;
  std::vector<double> s_sq_sum;

  void init(unsigned flags, std::size_t n) {
    if (flags & kMarginal) marginal.assign(n, 0.0);
    if (flags & kChi2) {
      s_sum.assign(n, 0.0);
      s_sq_sum.assign(n, 0.0);
    }
  }

  void merge(const Stats& o) {
    weight += o.weight;
    soft_c += o.soft_c;
    cost += o.cost;
    kl += o.kl;
    for (std::size_t j = 0; j < marginal.size(); ++j) marginal[j] += o.marginal[j];
    for (std::size_t j = 0; j < s_sum.size(); ++j) {
      s_sum[j] += o.s_sum[j];
      s_sq_sum[j] += o.s_sq_sum[j];
    }
  }
};

/// Per-thread scratch for evaluating a block of source points.
struct Workspace {
  std::vector<double> xbuf;
  std::vector<double> zbuf;
  std::vector<double> scores;
  std::vector<double> s;
  std::vector<std::uint32_t> ties;
};

class Kernel {
 public:
  Kernel(const TargetMeasure& target, const Potential& pot) : target_(target), pot_(pot), engine_(target, pot) {
    log_b_.resize(target.size());
    for (std::size_t j = 0; j < target.size(); ++j) log_b_[j] = std::log(target.weights[j]);
  }

  std::size_t n() const { return target_.size(); }
  double eps() const { return pot_.eps(); }
  std::size_t block_rows() const { return std::clamp<std::size_t>((std::size_t{1} << 18) / n(), 1, kShardRows); }

  /// Projects raw rows [i0, i1) into coupling space and scores them into
  /// ws.scores.
  void score_rows(const PointBatch& pts, std::size_t i0, std::size_t i1, Workspace& ws) const {
    const auto& cost = pot_.cost;
    const std::size_t d = target_.dim();
    const std::size_t p = target_.condition_dim();
    const std::size_t raw_d = cost.projection ? cost.projection->d_in : d;
    if (pts.x.cols() != raw_d) throw ConfigError("source points: dimension mismatch");
    if ((pts.z ? pts.z->cols() : 0) != p) throw ConfigError("source points: condition dimension mismatch");
    const std::size_t count = i1 - i0;
    ws.xbuf.resize(count * d);
    for (std::size_t i = 0; i < count; ++i) {
      const std::span<double> dst(ws.xbuf.data() + i * d, d);
      if (cost.projection) {
        cost.projection->apply_into(pts.x.row(i0 + i), dst);
      } else {
        std::copy_n(pts.x.row(i0 + i).begin(), d, dst.begin());
      }
    }
    const double* z = nullptr;
    if (p > 0) {
      ws.zbuf.assign(pts.z->data() + i0 * p, pts.z->data() + i1 * p);
      z = ws.zbuf.data();
    }
    ws.scores.resize(count * n());
    engine_.compute(ws.xbuf.data(), z, count, ws.scores.data());
  }

  /// Evaluates s_{eps,g} from one score row. At eps = 0 the responsibilities
  /// are left sparse in (ws.ties, ws.s); otherwise ws.s is dense. Returns
  /// f(x) and, through `lse`, log sum_j b_j exp(z_j / eps).
  double evaluate(std::span<const double> z, Workspace& ws, double* lse = nullptr) const {
    const std::size_t nn = n();
    if (eps() == 0.0) {
      const double hi = max_value(z);
      ws.ties.clear();
      double mass = 0.0;
      for (std::size_t j = 0; j < nn; ++j) {
        if (z[j] >= hi - kTieTolerance) {
          ws.ties.push_back(static_cast<std::uint32_t>(j));
          mass += target_.weights[j];
        }
      }
      ws.s.resize(ws.ties.size());
      for (std::size_t t = 0; t < ws.ties.size(); ++t) ws.s[t] = target_.weights[ws.ties[t]] / mass;
      return -hi;
    }
    const double inv = 1.0 / eps();
    double hi = kNegInf;
    for (std::size_t j = 0; j < nn; ++j) hi = std::max(hi, z[j] * inv + log_b_[j]);
    ws.s.resize(nn);
    double total = 0.0;
    for (std::size_t j = 0; j < nn; ++j) {
      ws.s[j] = std::exp(z[j] * inv + log_b_[j] - hi);
      total += ws.s[j];
    }
    const double inv_total = 1.0 / total;
    for (std::size_t j = 0; j < nn; ++j) ws.s[j] *= inv_total;
    const double log_sum = hi + std::log(total);
    if (lse) *lse = log_sum;
    return -eps() * log_sum;
  }

  void accumulate(std::span<const double> z, double w, unsigned flags, Stats& st, Workspace& ws) const {
    double lse = 0.0;
    const double f = evaluate(z, ws, &lse);
    st.weight += w;
    if (flags & kSoftC) st.soft_c += w * f;
    const bool sparse = eps() == 0.0;
    auto visit = [&](auto&& fn) {
      if (sparse) {
        for (std::size_t t = 0; t < ws.ties.size(); ++t) fn(ws.ties[t], ws.s[t]);
      } else {
        for (std::size_t j = 0; j < ws.s.size(); ++j) fn(j, ws.s[j]);
      }
    };
    if (flags & kMarginal) visit([&](std::size_t j, double s) { st.marginal[j] += w * s; });
    if (flags & kChi2) {
      visit([&](std::size_t j, double s) {
        st.s_sum[j] += s;
        st.s_sq_sum[j] += s * s;
      });
    }
    if (flags & kCost) {
      // c_j = g_j - z_j; log(s_j / b_j) = z_j / eps - lse.
      double c = 0.0;
      double kl = 0.0;
      visit([&](std::size_t j, double s) {
        c += s * (pot_.g[j] - z[j]);
        if (!sparse && s > 0.0) kl += s * (z[j] / eps() - lse);
      });
      st.cost += w * c;
      st.kl += w * kl;
    }
  }

  /// Deterministic sharded pass over a weighted batch. Weights are used as
  /// given (callers normalize).
  Stats run(const WeightedBatch& batch, unsigned flags) const {
    const std::size_t m = batch.size();
    if (m == 0) throw DegenerateInputError("empty noise batch");
    if (batch.weights.size() != m) throw ConfigError("batch weights length mismatch");
    const std::size_t rows = block_rows();
    const std::size_t shards = (m + rows - 1) / rows;
    std::vector<Stats> partial(shards);
    for_each_shard(shards, [&](std::size_t s) {
      thread_local Workspace ws;
      Stats& st = partial[s];
      st.init(flags, n());
      const std::size_t i0 = s * rows;
      const std::size_t i1 = std::min(m, i0 + rows);
      score_rows(batch.points, i0, i1, ws);
      for (std::size_t i = i0; i < i1; ++i) {
        const std::span<const double> z(ws.scores.data() + (i - i0) * n(), n());
        accumulate(z, batch.weights[i], flags, st, ws);
      }
    });
    Stats out;
    out.init(flags, n());
    for (const auto& p : partial) out.merge(p);
    return out;
  }

  /// Scores and evaluates a single raw point; ws.scores keeps the scores.
  double evaluate_point(AugmentedPoint x, Workspace& ws) const {
    PointBatch one{DenseMatrix(1, x.x.size(), std::vector<double>(x.x.begin(), x.x.end())), std::nullopt};
    if (!x.z.empty()) one.z = DenseMatrix(1, x.z.size(), std::vector<double>(x.z.begin(), x.z.end()));
    score_rows(one, 0, 1, ws);
    return evaluate(ws.scores, ws);
  }

 private:
  const TargetMeasure& target_;
  const Potential& pot_;
  detail::ScoreEngine engine_;
  std::vector<double> log_b_;
};

double weight_total(const WeightedBatch& batch) {
  double t = 0.0;
  for (double w : batch.weights) t += w;
  if (!(t > 0.0)) throw DegenerateInputError("batch weights sum to zero");
  return t;
}

}  // namespace

TargetMeasure TargetMeasure::create(DenseMatrix points, std::optional<DenseMatrix> conditions,
                                    std::vector<double> weights) {
  TargetMeasure t;
  t.points = std::move(points);
  t.conditions = std::move(conditions);
  if (weights.empty() && t.points.rows() > 0) {
    weights.assign(t.points.rows(), 1.0 / static_cast<double>(t.points.rows()));
  }
  t.weights = std::move(weights);
  t.validate();
  t.fingerprint = t.compute_fingerprint();
  return t;
}

void TargetMeasure::validate() const {
  const std::size_t n = points.rows();
  if (n == 0) throw DegenerateInputError("target measure needs at least one point");
  if (points.cols() == 0) throw ConfigError("target points have zero dimension");
  if (!points.all_finite()) throw NumericError("target points contain non-finite values");
  if (weights.size() != n) throw ConfigError("target weights length does not match point count");
  if (conditions) {
    if (conditions->rows() != n) throw ConfigError("condition rows do not match point count");
    if (!conditions->all_finite()) throw NumericError("target conditions contain non-finite values");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw DomainError("target weights must be strictly positive");
    total += w;
  }
  if (std::abs(total - 1.0) > sum_tolerance(weights.size())) throw DomainError("target weights must sum to 1");
}

double TargetMeasure::min_pairwise_distance() const {
  const std::size_t n = size();
  if (n < 2) return std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = squared_distance(points.row(i), points.row(j));
      if (conditions) d2 += squared_distance(conditions->row(i), conditions->row(j));
      best = std::min(best, d2);
    }
  }
  return std::sqrt(best);
}

std::uint64_t TargetMeasure::compute_fingerprint() const {
  std::uint64_t h = fnv1a64(points.data(), points.flat().size() * sizeof(double));
  const std::uint64_t shape[3] = {points.rows(), points.cols(), condition_dim()};
  h = fnv1a64(shape, sizeof(shape), h);
  if (conditions) h = fnv1a64(conditions->data(), conditions->flat().size() * sizeof(double), h);
  return fnv1a64(weights.data(), weights.size() * sizeof(double), h);
}

TargetMeasure make_target(const DenseMatrix& raw_points, const std::optional<DenseMatrix>& conditions,
                          std::vector<double> weights, const CostConfig& cost) {
  if (cost.beta > 0.0 && !conditions) throw ConfigError("beta > 0 requires conditional data");
  return TargetMeasure::create(cost.rows_to_coupling_space(raw_points), conditions, std::move(weights));
}

Potential Potential::zeros(const TargetMeasure& target, CostConfig cost) {
  Potential p;
  p.g.assign(target.size(), 0.0);
  p.cost = std::move(cost);
  p.target_fingerprint = target.fingerprint;
  return p;
}

void gauge_fix(std::span<double> g, std::span<const double> b) {
  if (g.size() != b.size()) throw ConfigError("gauge_fix: length mismatch");
  const double shift = dot(g, b);
  for (double& v : g) v -= shift;
}

void check_binding(const TargetMeasure& target, const Potential& pot) {
  if (pot.g.size() != target.size()) {
    throw ConfigError("potential length " + std::to_string(pot.g.size()) + " does not match target size " +
                      std::to_string(target.size()));
  }
  if (pot.target_fingerprint != target.fingerprint) throw ConfigError("potential was fitted on a different target");
  if (pot.cost.beta > 0.0 && !target.conditional()) throw ConfigError("beta > 0 requires conditional data");
}

std::vector<double> Responsibilities::to_dense(std::size_t n) const {
  if (dense()) return mass;
  std::vector<double> out(n, 0.0);
  for (std::size_t t = 0; t < index.size(); ++t) out[index[t]] = mass[t];
  return out;
}

double Responsibilities::total() const { return std::accumulate(mass.begin(), mass.end(), 0.0); }

SourceMeasure SourceMeasure::gaussian(std::size_t dim) {
  if (dim == 0) throw ConfigError("source dimension must be positive");
  SourceMeasure s;
  s.dim_ = dim;
  return s;
}

SourceMeasure SourceMeasure::gaussian_conditional(std::size_t dim, const DenseMatrix& conditions,
                                                  std::span<const double> weights) {
  SourceMeasure s = gaussian(dim);
  if (conditions.rows() != weights.size()) throw ConfigError("condition rows do not match weights");
  s.conditions_ = std::make_shared<const DenseMatrix>(conditions);
  s.condition_table_ = std::make_shared<const CategoricalTable>(weights);
  return s;
}

SourceMeasure SourceMeasure::discrete(PointBatch atoms, std::vector<double> weights) {
  const std::size_t m = atoms.size();
  if (m == 0) throw DegenerateInputError("discrete source needs at least one atom");
  if (weights.empty()) weights.assign(m, 1.0 / static_cast<double>(m));
  if (weights.size() != m) throw ConfigError("source weights length does not match atom count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw DomainError("source weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > sum_tolerance(weights.size())) throw DomainError("source weights must sum to 1");
  SourceMeasure s;
  s.dim_ = atoms.x.cols();
  s.atom_table_ = std::make_shared<const CategoricalTable>(weights);
  s.atoms_ = std::make_shared<const WeightedBatch>(WeightedBatch{std::move(atoms), std::move(weights)});
  return s;
}

WeightedBatch SourceMeasure::sample(Rng& rng, std::size_t m) const {
  if (m == 0) throw DomainError("source sample size must be positive");
  WeightedBatch out;
  out.weights.assign(m, 1.0 / static_cast<double>(m));
  if (atoms_) {
    const auto& src = atoms_->points;
    out.points.x = DenseMatrix(m, src.x.cols());
    if (src.z) out.points.z = DenseMatrix(m, src.z->cols());
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t a = atom_table_->sample(rng);
      std::copy_n(src.x.row(a).begin(), src.x.cols(), out.points.x.row(i).begin());
      if (src.z) std::copy_n(src.z->row(a).begin(), src.z->cols(), out.points.z->row(i).begin());
    }
    return out;
  }
  out.points.x = sample_gaussian(rng, m, dim_);
  if (conditions_) {
    out.points.z = DenseMatrix(m, conditions_->cols());
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = condition_table_->sample(rng);
      std::copy_n(conditions_->row(j).begin(), conditions_->cols(), out.points.z->row(i).begin());
    }
  }
  return out;
}

const WeightedBatch& SourceMeasure::enumerate() const {
  if (!atoms_) throw UnsupportedError("only discrete source measures can be enumerated");
  return *atoms_;
}

SourceMeasure default_source(const TargetMeasure& target, const CostConfig& cost,
                             const std::optional<DenseMatrix>& raw_conditions) {
  const std::size_t d = cost.projection ? cost.projection->d_in : target.dim();
  if (!target.conditional()) return SourceMeasure::gaussian(d);
  return SourceMeasure::gaussian_conditional(d, raw_conditions ? *raw_conditions : *target.conditions, target.weights);
}

void scores_into(const TargetMeasure& target, const Potential& pot, AugmentedPoint x, std::span<double> out) {
  if (out.size() != target.size()) throw ConfigError("scores_into: output length mismatch");
  if (x.x.size() != target.dim() || x.z.size() != target.condition_dim()) {
    throw ConfigError("scores_into: point dimension mismatch");
  }
  const detail::ScoreEngine engine(target, pot);
  engine.compute(x.x.data(), x.z.empty() ? nullptr : x.z.data(), 1, out.data());
}

double soft_c_transform(const TargetMeasure& target, const Potential& pot, AugmentedPoint x) {
  Kernel k(target, pot);
  Workspace ws;
  return k.evaluate_point(x, ws);
}

Responsibilities responsibilities(const TargetMeasure& target, const Potential& pot, AugmentedPoint x) {
  Kernel k(target, pot);
  Workspace ws;
  k.evaluate_point(x, ws);
  Responsibilities r;
  if (pot.eps() == 0.0) {
    if (ws.ties.size() > 1) {
      // Dense on a tie.
      r.mass.assign(target.size(), 0.0);
      for (std::size_t t = 0; t < ws.ties.size(); ++t) r.mass[ws.ties[t]] = ws.s[t];
    } else {
      r.index = ws.ties;
      r.mass = ws.s;
    }
  } else {
    r.mass = ws.s;
  }
  return r;
}

double semidual_value(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch) {
  const Stats st = Kernel(target, pot).run(batch, kSoftC);
  return st.soft_c / weight_total(batch) + dot(target.weights, pot.g);
}

std::vector<double> batch_marginal(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch) {
  Stats st = Kernel(target, pot).run(batch, kMarginal);
  const double total = weight_total(batch);
  for (double& v : st.marginal) v /= total;
  return st.marginal;
}

std::vector<double> stochastic_gradient(const TargetMeasure& target, const Potential& pot,
                                        const WeightedBatch& batch) {
  std::vector<double> grad = batch_marginal(target, pot, batch);
  for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = target.weights[j] - grad[j];
  return grad;
}

MarginalEstimate marginal_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source,
                                   Rng& rng, std::size_t total_samples, std::size_t batch) {
  MarginalEstimate out;
  if (source.enumerable()) {
    out.m = batch_marginal(target, pot, source.enumerate());
    out.samples = source.enumerate().size();
    return out;
  }
  if (batch == 0 || total_samples < batch) throw DomainError("marginal_estimate: need total_samples >= batch >= 1");
  const std::size_t n = target.size();
  const std::size_t batches = total_samples / batch;
  std::vector<double> sum(n, 0.0);
  std::vector<double> sum_sq(n, 0.0);
  for (std::size_t k = 0; k < batches; ++k) {
    const auto m = batch_marginal(target, pot, source.sample(rng, batch));
    for (std::size_t j = 0; j < n; ++j) {
      sum[j] += m[j];
      sum_sq[j] += m[j] * m[j];
    }
  }
  const auto nb = static_cast<double>(batches);
  out.m.resize(n);
  double se = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out.m[j] = sum[j] / nb;
    if (batches > 1) {
      const double var = std::max(0.0, (sum_sq[j] - nb * out.m[j] * out.m[j]) / (nb - 1.0));
      se = std::max(se, std::sqrt(var / nb));
    }
  }
  out.samples = batches * batch;
  out.std_error = batches > 1 ? se : std::numeric_limits<double>::infinity();
  return out;
}

double chi2_exact(std::span<const double> m, std::span<const double> b) {
  if (m.size() != b.size()) throw ConfigError("chi2_exact: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (!(b[j] > 0.0)) throw DomainError("chi2_exact: b must be strictly positive");
    s += m[j] * m[j] / b[j];
  }
  return s - 1.0;
}

double chi2_estimator(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch) {
  const std::size_t bsz = batch.size();
  if (bsz < 2) throw DomainError("chi2_estimator: batch size must be >= 2");
  const Stats st = Kernel(target, pot).run(batch, kChi2);
  double acc = 0.0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    acc += (st.s_sum[j] * st.s_sum[j] - st.s_sq_sum[j]) / target.weights[j];
  }
  const auto b = static_cast<double>(bsz);
  return acc / (b * (b - 1.0)) - 1.0;
}

Chi2Estimate chi2_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source, Rng& rng,
                           std::size_t total_samples, std::size_t batch) {
  Chi2Estimate out;
  if (source.enumerable()) {
    out.value = chi2_exact(batch_marginal(target, pot, source.enumerate()), target.weights);
    out.batches = 0;
    return out;
  }
  if (batch < 2 || total_samples < batch) throw DomainError("chi2_estimate: need total_samples >= batch >= 2");
  const std::size_t batches = total_samples / batch;
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t k = 0; k < batches; ++k) {
    const double v = chi2_estimator(target, pot, source.sample(rng, batch));
    sum += v;
    sum_sq += v * v;
  }
  const auto nb = static_cast<double>(batches);
  out.value = sum / nb;
  out.batches = batches;
  out.std_error = batches > 1 ? std::sqrt(std::max(0.0, (sum_sq - nb * out.value * out.value) / (nb - 1.0)) / nb)
                              : std::numeric_limits<double>::infinity();
  return out;
}

TransportCost transport_cost(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch) {
  const Stats st = Kernel(target, pot).run(batch, kCost);
  const double total = weight_total(batch);
  return {st.cost / total, st.kl / total};
}

TransportCost transport_cost_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source,
                                      Rng& rng, std::size_t samples) {
  if (source.enumerable()) return transport_cost(target, pot, source.enumerate());
  if (samples == 0) throw DomainError("transport_cost_estimate: samples must be >= 1");
  constexpr std::size_t kChunk = 4096;
  TransportCost acc;
  std::size_t done = 0;
  while (done < samples) {
    const std::size_t m = std::min(kChunk, samples - done);
    const TransportCost part = transport_cost(target, pot, source.sample(rng, m));
    acc.cost += part.cost * static_cast<double>(m);
    acc.kl += part.kl * static_cast<double>(m);
    done += m;
  }
  acc.cost /= static_cast<double>(samples);
  acc.kl /= static_cast<double>(samples);
  return acc;
}

void calibrate_eps(CostConfig& cost, const TargetMeasure& target, const SourceMeasure& source, Rng rng,
                   std::size_t n_ref) {
  if (cost.eps_raw == 0.0) {
    cost.eps_effective = 0.0;
    cost.cost_std = 1.0;
    cost.rescaled = false;
    return;
  }
  WeightedBatch noise = source.sample(rng, n_ref);
  // Targets live in coupling space already, so compare in that space.
  CostConfig plain = cost;
  plain.projection.reset();
  PointBatch noise_c{cost.rows_to_coupling_space(noise.points.x), noise.points.z};
  PointBatch data{DenseMatrix(n_ref, target.dim()), std::nullopt};
  if (target.conditional()) data.z = DenseMatrix(n_ref, target.condition_dim());
  const CategoricalTable table(target.weights);
  for (std::size_t i = 0; i < n_ref; ++i) {
    const std::size_t j = table.sample(rng);
    std::copy_n(target.points.row(j).begin(), target.dim(), data.x.row(i).begin());
    if (data.z) std::copy_n(target.conditions->row(j).begin(), target.condition_dim(), data.z->row(i).begin());
  }
  const double sd = estimate_cost_std(plain, noise_c, data);
  if (sd > 0.0) {
    cost.cost_std = sd;
    cost.eps_effective = cost.eps_raw * sd;
    cost.rescaled = true;
  } else {
    cost.cost_std = 1.0;
    cost.eps_effective = cost.eps_raw;
    cost.rescaled = false;
  }
}

}  // namespace sdfm
