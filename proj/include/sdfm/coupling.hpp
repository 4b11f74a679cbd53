#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfm/semidual.hpp"

namespace sdfm {

enum class PairProvenance { Independent, SemiDiscrete, MinibatchSinkhorn, MinibatchHungarian };

std::string to_string(PairProvenance p);

/// Noise rows paired with target atoms. `data` and `conditions` are the
/// resolved target rows (coupling space).
struct PairBatch {
  DenseMatrix noise;
  std::optional<DenseMatrix> noise_conditions;
  std::vector<std::uint32_t> index;
  DenseMatrix data;
  std::optional<DenseMatrix> conditions;
  PairProvenance provenance = PairProvenance::Independent;
  double pairing_ms = 0.0;  // wall time spent forming the pairs

  std::size_t size() const { return index.size(); }
  double time_per_pair_ms() const { return index.empty() ? 0.0 : pairing_ms / static_cast<double>(index.size()); }
};

/// Fills data/conditions from the target rows named by `index`.
void resolve_pairs(const TargetMeasure& target, PairBatch& batch);

/// Draws k ~ s_{eps,g}(x) for a raw source point. At eps = 0 this is the
/// argmax of g_k - c(x, y_k) with ties broken at random by b.
std::size_t assign(const TargetMeasure& target, const Potential& pot, AugmentedPoint x, Rng& rng);

/// Row-wise assign with row i drawing from rng.split(i).
PairBatch assign_batch(const TargetMeasure& target, const Potential& pot, const PointBatch& noise, const Rng& rng);

/// Row-wise assign with one generator per row.
PairBatch assign_batch(const TargetMeasure& target, const Potential& pot, const PointBatch& noise,
                       std::span<const Rng> row_rngs);

/// True iff x lies in the Laguerre cell of atom j (neg-dot cost, eps = 0),
/// with tolerance 1e-12. x is a raw point; conditions are not supported.
bool laguerre_contains(const TargetMeasure& target, const Potential& pot, std::size_t j, std::span<const double> x);

/// Indices drawn i.i.d. from b.
PairBatch couple_independent(const TargetMeasure& target, const PointBatch& noise, Rng& rng);

enum class MinibatchMethod { Sinkhorn, Hungarian };

std::string to_string(MinibatchMethod m);
MinibatchMethod parse_minibatch_method(const std::string& name);

struct SinkhornOptions {
  double tol = 1e-6;              // L1 error of the row marginal
  std::size_t max_sweeps = 10000;
  bool eps_scaling = true;
};

struct SinkhornResult {
  DenseMatrix plan;       // M x N, rows sum to a, columns to b
  std::vector<double> f;  // P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)
  std::vector<double> g;
  std::size_t sweeps = 0;
  double residual = 0.0;
};

/// Log-domain Sinkhorn with optional eps-scaling warm start. Throws
/// ConvergenceError (carrying the residual) when `max_sweeps` is exhausted.
SinkhornResult sinkhorn_log(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b, double eps,
                            const SinkhornOptions& opts = {});

struct AssignmentResult {
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;
  std::vector<double> u;  // row duals, u_i + v_j <= C_ij with equality on the matching
  std::vector<double> v;
};

/// Min-cost perfect matching on a square cost matrix, O(n^3).
AssignmentResult hungarian(const DenseMatrix& cost);

/// Minibatch OT pairing: n data atoms are drawn from b, matched to the n
/// noise rows, and each noise row is paired with its matched atom
/// (Hungarian) or with an atom drawn from its row of the plan (Sinkhorn).
/// For Sinkhorn, eps is relative to the mean absolute cost of the batch.
PairBatch couple_minibatch_ot(const TargetMeasure& target, const PointBatch& noise, const CostConfig& cost, double eps,
                              Rng& rng, MinibatchMethod method, const SinkhornOptions& opts = {});

/// Precomputed minibatch pairings. Stores, per batch, the generator state
/// that reproduces its noise plus the paired atom indices.
class MinibatchOtCache {
 public:
  MinibatchOtCache(const TargetMeasure& target, const SourceMeasure& source, const CostConfig& cost, double eps,
                   MinibatchMethod method, std::size_t batch, std::size_t n_batches, const Rng& rng,
                   const SinkhornOptions& opts = {});

  std::size_t batches() const { return entries_.size(); }
  /// Regenerates batch `l` with its cached pairing.
  PairBatch load(const TargetMeasure& target, std::size_t l) const;
  double precompute_ms() const { return precompute_ms_; }

 private:
  struct Entry {
    Rng noise_rng;
    std::vector<std::uint32_t> index;
  };
  SourceMeasure source_;
  std::size_t batch_;
  PairProvenance provenance_;
  std::vector<Entry> entries_;
  double precompute_ms_ = 0.0;
};

struct DiscreteOtSolution {
  DenseMatrix plan;
  std::vector<double> f;  // gauge: <b, g> = 0
  std::vector<double> g;
  double value = 0.0;     // <P, C> + eps KL(P | a x b)
};

/// Exact discrete OT between (a, cost rows) and (b, cost columns), M, N <= 512.
/// eps > 0: log-domain Sinkhorn to marginal error 1e-9; eps = 0: Hungarian on
/// square uniform problems, successive shortest paths otherwise.
DiscreteOtSolution oracle_discrete_ot(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b,
                                      double eps);

}  // namespace sdfm
