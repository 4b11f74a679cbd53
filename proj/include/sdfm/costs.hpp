#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfm/numerics.hpp"

namespace sdfm {

enum class CostKind { NegDot, SqEuclidean };

std::string to_string(CostKind kind);
CostKind parse_cost_kind(const std::string& name);

/// Orthonormal k x d_in basis plus the data mean it was fitted around.
/// Maps x to basis * (x - mean).
struct ProjectionMatrix {
  std::size_t d_in = 0;
  std::size_t k = 0;
  DenseMatrix basis;                       // k x d_in, orthonormal rows
  std::vector<double> mean;                // d_in
  std::vector<double> explained_variance;  // k, non-increasing
  bool padded = false;                     // true when k exceeded the numerical rank

  std::vector<double> apply(std::span<const double> x) const;
  void apply_into(std::span<const double> x, std::span<double> out) const;
  DenseMatrix apply_rows(const DenseMatrix& x) const;
};

/// Point of the augmented space (x, z). An empty `z` means the owning
/// dataset carries no conditions.
struct AugmentedPoint {
  std::span<const double> x;
  std::span<const double> z = {};
};

struct CostConfig {
  CostKind kind = CostKind::NegDot;
  double beta = 0.0;           // weight of the squared-Euclidean condition term
  double eps_raw = 0.0;
  double eps_effective = 0.0;  // eps_raw * cost_std when rescaled
  double cost_std = 1.0;
  bool rescaled = false;
  std::optional<ProjectionMatrix> projection;

  /// Dimension of the x-part in coupling space.
  std::size_t coupling_dim(std::size_t d_in) const { return projection ? projection->k : d_in; }
  /// Maps an x-part into coupling space (identity without projection).
  std::vector<double> to_coupling_space(std::span<const double> x) const;
  DenseMatrix rows_to_coupling_space(const DenseMatrix& x) const;
  void validate() const;
};

/// c_X on x-parts already in coupling space.
double cost_x(CostKind kind, std::span<const double> x, std::span<const double> y);

/// Augmented cost for points already in coupling space.
double coupling_cost(const CostConfig& cfg, AugmentedPoint a, AugmentedPoint b);

/// c_X(P x, P x') + beta * |z - z'|^2 on raw points; the projection (if any)
/// is applied to the x-parts first. `a` is the source side, `b` the target side.
double cost(const CostConfig& cfg, AugmentedPoint a, AugmentedPoint b);

/// Batch of augmented points stored as matrices (conditions optional).
struct PointBatch {
  DenseMatrix x;
  std::optional<DenseMatrix> z;

  std::size_t size() const { return x.rows(); }
  AugmentedPoint at(std::size_t i) const {
    return {x.row(i), z ? z->row(i) : std::span<const double>{}};
  }
};

/// Sample standard deviation (ddof = 1) over the n_noise x n_data raw cost
/// matrix. Zero when all costs coincide; callers must then disable rescaling.
double estimate_cost_std(const CostConfig& cfg, const PointBatch& noise, const PointBatch& data);

/// Top-k principal basis of the rows of `data` by randomized subspace
/// iteration (8 power iterations, oversampling 8) with a Rayleigh-Ritz
/// finish.
ProjectionMatrix fit_pca(const DenseMatrix& data, std::size_t k, Rng& rng);

}  // namespace sdfm
