#pragma once

#include "common/oracles.hpp"
#include "sdfm/semidual.hpp"

namespace fx {

inline sdfm::CostConfig negdot_cost(double eps) {
  sdfm::CostConfig c;
  c.kind = sdfm::CostKind::NegDot;
  c.eps_raw = eps;
  c.eps_effective = eps;
  return c;
}

inline sdfm::TargetMeasure target(const oracle::Instance& in) {
  return sdfm::TargetMeasure::create(in.y, std::nullopt, in.b);
}

inline sdfm::SourceMeasure source(const oracle::Instance& in) {
  return sdfm::SourceMeasure::discrete(sdfm::PointBatch{in.x, std::nullopt}, in.a);
}

inline sdfm::Potential potential(const sdfm::TargetMeasure& t, std::vector<double> g, double eps) {
  sdfm::Potential p = sdfm::Potential::zeros(t, negdot_cost(eps));
  p.g = std::move(g);
  return p;
}

inline sdfm::DenseMatrix mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return sdfm::DenseMatrix(r, c, std::move(v));
}

}  // namespace fx
