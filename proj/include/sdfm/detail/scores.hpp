#pragma once

#include <cstddef>
#include <vector>

#include "sdfm/semidual.hpp"

namespace sdfm::detail {

/// Computes score rows z_ij = g_j - c(x_i, y_j) for blocks of coupling-space
/// points. Target coordinates are stored in tiles of 8 atoms, coordinate-major
/// within a tile; every score is accumulated in coordinate order, so a point's
/// scores do not depend on which block it was evaluated in.
class ScoreEngine {
 public:
  ScoreEngine(const TargetMeasure& target, const Potential& pot);

  std::size_t size() const { return n_; }
  std::size_t dim() const { return d_; }

  /// x: `count` rows of length dim(); z: `count` condition rows or nullptr.
  /// out: count x size() row-major.
  void compute(const double* x, const double* z, std::size_t count, double* out) const;

 private:
  std::vector<double> tiles_;  // ceil(N / 8) tiles of d x 8
  const TargetMeasure* target_;
  const Potential* pot_;
  std::size_t n_;
  std::size_t d_;
  std::size_t p_;
};

}  // namespace sdfm::detail
