#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace sdfm {

inline constexpr double kTieTolerance = 1e-12;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Counter-based random generator.
///
/// The i-th draw of a stream is a pure function of (seed, stream, i), so a
/// generator can be split into independent child streams and handed to other
/// threads without affecting the parent's sequence.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng() = default;
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Child generator on a stream derived from this one and `id`. Does not
  /// advance this generator.
  Rng split(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  // UniformRandomBitGenerator
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

/// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// n x d matrix of i.i.d. standard normal draws.
DenseMatrix sample_gaussian(Rng& rng, std::size_t n, std::size_t d);

/// log sum_j exp(z_j + logw_j) with max-shift. -inf when every term is -inf.
double logsumexp_weighted(std::span<const double> z, std::span<const double> logw);

/// Largest entry of a non-empty span.
double max_value(std::span<const double> z);

/// Indices of entries within `tol` of the maximum.
std::vector<std::size_t> argmax_set(std::span<const double> z, double tol = kTieTolerance);

/// b-weighted softmax at temperature eps; at eps = 0 the b-weighted uniform
/// distribution over the argmax set.
std::vector<double> softmax_b_eps(std::span<const double> z, std::span<const double> b, double eps);

/// Index drawn from unnormalized nonnegative weights.
std::size_t sample_categorical(Rng& rng, std::span<const double> weights);

/// Inverse-CDF sampler over a fixed probability vector.
class CategoricalTable {
 public:
  explicit CategoricalTable(std::span<const double> probs);
  std::size_t sample(Rng& rng) const;
  std::size_t size() const { return cdf_.size(); }

 private:
  std::vector<double> cdf_;
};

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Stable 64-bit FNV-1a hash over raw bytes.
std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h = 1469598103934665603ULL);

/// Worker count from SDFM_THREADS (default 1).
unsigned thread_count();

/// Runs fn(shard) for shard in [0, n_shards) across thread_count() workers.
/// Callers reduce per-shard results in shard order, so results never depend
/// on the worker count.
template <class Fn>
void for_each_shard(std::size_t n_shards, Fn&& fn);

}  // namespace sdfm

#include "sdfm/detail/parallel.hpp"
