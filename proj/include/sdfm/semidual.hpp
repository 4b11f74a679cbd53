#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfm/costs.hpp"
#include "sdfm/numerics.hpp"

namespace sdfm {

/// Discrete target measure nu = sum_j b_j delta_{y_j}, stored in coupling
/// space (after any projection).
struct TargetMeasure {
  DenseMatrix points;
  std::optional<DenseMatrix> conditions;
  std::vector<double> weights;
  std::uint64_t fingerprint = 0;

  /// Builds a validated measure; empty `weights` means uniform.
  static TargetMeasure create(DenseMatrix points, std::optional<DenseMatrix> conditions = std::nullopt,
                              std::vector<double> weights = {});

  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
  std::size_t condition_dim() const { return conditions ? conditions->cols() : 0; }
  bool conditional() const { return conditions.has_value(); }
  AugmentedPoint at(std::size_t j) const {
    return {points.row(j), conditions ? conditions->row(j) : std::span<const double>{}};
  }

  void validate() const;
  /// Smallest pairwise distance between (point, condition) rows; O(N^2).
  double min_pairwise_distance() const;
  std::uint64_t compute_fingerprint() const;
};

/// Raw data measure projected into the coupling space of `cost`.
TargetMeasure make_target(const DenseMatrix& raw_points, const std::optional<DenseMatrix>& conditions,
                          std::vector<double> weights, const CostConfig& cost);

struct SolverProvenance {
  std::string optimizer;
  std::size_t iterations = 0;
  double final_chi2 = 0.0;
  std::size_t averaging_window = 0;
  double wall_ms = 0.0;
};

/// Dual vector g bound to the cost configuration and target it was fitted on.
struct Potential {
  std::vector<double> g;
  CostConfig cost;
  std::uint64_t target_fingerprint = 0;
  SolverProvenance provenance;

  double eps() const { return cost.eps_effective; }
  static Potential zeros(const TargetMeasure& target, CostConfig cost);
};

/// Shifts g so that <b, g> = 0.
void gauge_fix(std::span<double> g, std::span<const double> b);

/// Throws ConfigError unless the potential was built for this target.
void check_binding(const TargetMeasure& target, const Potential& pot);

/// Conditional distribution over target atoms for one source point. Stored
/// sparsely at eps = 0 (argmax set only) and densely otherwise.
struct Responsibilities {
  std::vector<std::uint32_t> index;  // empty when dense
  std::vector<double> mass;

  bool dense() const { return index.empty(); }
  std::vector<double> to_dense(std::size_t n) const;
  double total() const;
};

/// Samples of the source measure plus their probability weights. Uniform
/// weights for Monte-Carlo batches, atom weights for an enumerated measure.
struct WeightedBatch {
  PointBatch points;
  std::vector<double> weights;

  std::size_t size() const { return points.size(); }
};

/// Source measure mu in raw space: standard Gaussian (optionally augmented
/// with conditions drawn from the target's condition marginal) or a finite
/// weighted atom list whose expectations can be enumerated exactly.
class SourceMeasure {
 public:
  static SourceMeasure gaussian(std::size_t dim);
  static SourceMeasure gaussian_conditional(std::size_t dim, const DenseMatrix& conditions,
                                            std::span<const double> weights);
  static SourceMeasure discrete(PointBatch atoms, std::vector<double> weights = {});

  std::size_t dim() const { return dim_; }
  bool enumerable() const { return atoms_ != nullptr; }

  /// m i.i.d. draws with uniform weights.
  WeightedBatch sample(Rng& rng, std::size_t m) const;
  /// Whole atom list with atom weights. Only for discrete measures.
  const WeightedBatch& enumerate() const;

 private:
  std::size_t dim_ = 0;
  std::shared_ptr<const WeightedBatch> atoms_;
  std::shared_ptr<const CategoricalTable> atom_table_;
  std::shared_ptr<const DenseMatrix> conditions_;
  std::shared_ptr<const CategoricalTable> condition_table_;
};

/// Default noise for a target: N(0, I) in raw space, augmented with
/// conditions when the target is conditional.
SourceMeasure default_source(const TargetMeasure& target, const CostConfig& cost,
                             const std::optional<DenseMatrix>& raw_conditions = std::nullopt);

/// Scores g_j - c(x, y_j) for a source point already in coupling space.
void scores_into(const TargetMeasure& target, const Potential& pot, AugmentedPoint x, std::span<double> out);

/// f_{g,eps}(x) for a raw source point.
double soft_c_transform(const TargetMeasure& target, const Potential& pot, AugmentedPoint x);

/// s_{eps,g}(x) for a raw source point.
Responsibilities responsibilities(const TargetMeasure& target, const Potential& pot, AugmentedPoint x);

/// F_eps(g) = sum_i w_i f(x_i) + <b, g>.
double semidual_value(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch);

/// b - sum_i w_i s(x_i).
std::vector<double> stochastic_gradient(const TargetMeasure& target, const Potential& pot,
                                        const WeightedBatch& batch);

struct MarginalEstimate {
  std::vector<double> m;
  std::size_t samples = 0;
  double std_error = 0.0;  // max over atoms of the batch-mean standard error
};

/// sum_i w_i s(x_i); exact when the batch enumerates a discrete source.
std::vector<double> batch_marginal(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch);

/// Streamed Monte-Carlo m(g) over `total_samples` draws in chunks of `batch`.
/// Enumerable sources return the exact marginal.
MarginalEstimate marginal_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source,
                                   Rng& rng, std::size_t total_samples, std::size_t batch);

/// chi^2(m || b) = sum_j m_j^2 / b_j - 1.
double chi2_exact(std::span<const double> m, std::span<const double> b);

/// Unbiased O(NB) estimator of chi^2(m(g) || b) from one batch of i.i.d.
/// source samples (batch weights are ignored). May be negative.
double chi2_estimator(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch);

struct Chi2Estimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t batches = 0;
};

/// Mean of chi2_estimator over total_samples / batch batches. Enumerable
/// sources return chi2_exact of the enumerated marginal.
Chi2Estimate chi2_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source, Rng& rng,
                           std::size_t total_samples = std::size_t{1} << 20,
                           std::size_t batch = std::size_t{1} << 13);

struct TransportCost {
  double cost = 0.0;  // E[c(X, Y)] under pi_{eps,g}
  double kl = 0.0;    // KL(pi_{eps,g} | mu x nu); 0 at eps = 0
  double total(double eps) const { return cost + eps * kl; }
};

/// C_eps(pi_{eps,g}) over a weighted batch.
TransportCost transport_cost(const TargetMeasure& target, const Potential& pot, const WeightedBatch& batch);

/// Monte-Carlo C_eps(pi_{eps,g}); exact for enumerable sources.
TransportCost transport_cost_estimate(const TargetMeasure& target, const Potential& pot, const SourceMeasure& source,
                                      Rng& rng, std::size_t samples);

/// eps_effective = eps_raw * std of the cost over a reference batch of
/// `n_ref` noise/data pairs (data drawn from b).
void calibrate_eps(CostConfig& cost, const TargetMeasure& target, const SourceMeasure& source, Rng rng,
                   std::size_t n_ref = 1024);

}  // namespace sdfm
