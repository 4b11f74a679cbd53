#include "sdfm/detail/scores.hpp"

#include <algorithm>
#include <cstring>

#include "sdfm/error.hpp"

namespace sdfm::detail {

namespace {

constexpr std::size_t kLanes = 8;
constexpr std::size_t kRows = 4;

// Two doubles, the narrowest native vector on x86-64 and AArch64.
typedef double Pair __attribute__((vector_size(2 * sizeof(double))));
constexpr std::size_t kPairs = kLanes / 2;

// out[r][l] = g[l] -/+ sum_c op(x[r][c], tile[c][l]), summed in coordinate order.
template <std::size_t R, bool NegDot>
void score_tile(const double* x, std::size_t d, const double* tile, const double* g, std::size_t lanes, double* out,
                std::size_t out_stride) {
  Pair acc[R][kPairs] = {};
  for (std::size_t c = 0; c < d; ++c) {
#pragma GCC unroll 4
    for (std::size_t p = 0; p < kPairs; ++p) {
      Pair y;
      std::memcpy(&y, tile + c * kLanes + 2 * p, sizeof y);
#pragma GCC unroll 4
      for (std::size_t r = 0; r < R; ++r) {
        if constexpr (NegDot) {
          acc[r][p] += x[r * d + c] * y;
        } else {
          const Pair diff = x[r * d + c] - y;
          acc[r][p] += diff * diff;
        }
      }
    }
  }
  double flat[R][kLanes];
  std::memcpy(flat, acc, sizeof flat);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t l = 0; l < lanes; ++l) out[r * out_stride + l] = NegDot ? g[l] + flat[r][l] : g[l] - flat[r][l];
  }
}

template <bool NegDot>
void score_rows(const double* x, std::size_t count, std::size_t d, const std::vector<double>& tiles, const double* g,
                std::size_t n, double* out) {
  constexpr std::size_t kBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t j1 = std::min(n, j0 + kBlock);
    std::size_t i = 0;
    for (; i + kRows <= count; i += kRows) {
      for (std::size_t j = j0; j < j1; j += kLanes) {
        score_tile<kRows, NegDot>(x + i * d, d, tiles.data() + j * d, g + j, std::min(kLanes, n - j), out + i * n + j, n);
      }
    }
    for (; i < count; ++i) {
      for (std::size_t j = j0; j < j1; j += kLanes) {
        score_tile<1, NegDot>(x + i * d, d, tiles.data() + j * d, g + j, std::min(kLanes, n - j), out + i * n + j, n);
      }
    }
  }
}

}  // namespace

ScoreEngine::ScoreEngine(const TargetMeasure& target, const Potential& pot)
    : target_(&target), pot_(&pot), n_(target.size()), d_(target.dim()), p_(target.condition_dim()) {
  check_binding(target, pot);
  const std::size_t padded = (n_ + kLanes - 1) / kLanes * kLanes;
  tiles_.assign(padded * d_, 0.0);
  for (std::size_t j = 0; j < n_; ++j) {
    const auto row = target.points.row(j);
    double* tile = tiles_.data() + (j / kLanes) * kLanes * d_ + j % kLanes;
    for (std::size_t c = 0; c < d_; ++c) tile[c * kLanes] = row[c];
  }
}

void ScoreEngine::compute(const double* x, const double* z, std::size_t count, double* out) const {
  const double* g = pot_->g.data();
  if (pot_->cost.kind == CostKind::NegDot) {
    score_rows<true>(x, count, d_, tiles_, g, n_, out);
  } else {
    score_rows<false>(x, count, d_, tiles_, g, n_, out);
  }
  const double beta = pot_->cost.beta;
  if (beta > 0.0 && z != nullptr && p_ > 0) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::span<const double> zi(z + i * p_, p_);
      for (std::size_t j = 0; j < n_; ++j) out[i * n_ + j] -= beta * squared_distance(zi, target_->conditions->row(j));
    }
  }
}

}  // namespace sdfm::detail
