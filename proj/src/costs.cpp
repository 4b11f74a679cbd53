#include "sdfm/costs.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "sdfm/error.hpp"

namespace sdfm {

std::string to_string(CostKind kind) {
  return kind == CostKind::NegDot ? "negdot" : "sqeuclid";
}

CostKind parse_cost_kind(const std::string& name) {
  if (name == "negdot" || name == "neg-dot") return CostKind::NegDot;
  if (name == "sqeuclid" || name == "sq-euclidean") return CostKind::SqEuclidean;
  throw ConfigError("unknown cost kind '" + name + "'");
}

void ProjectionMatrix::apply_into(std::span<const double> x, std::span<double> out) const {
  if (x.size() != d_in || out.size() != k) throw ConfigError("projection: dimension mismatch");
  for (std::size_t r = 0; r < k; ++r) {
    const auto row = basis.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < d_in; ++c) s += row[c] * (x[c] - mean[c]);
    out[r] = s;
  }
}

std::vector<double> ProjectionMatrix::apply(std::span<const double> x) const {
  std::vector<double> out(k);
  apply_into(x, out);
  return out;
}

DenseMatrix ProjectionMatrix::apply_rows(const DenseMatrix& x) const {
  DenseMatrix out(x.rows(), k);
  for (std::size_t i = 0; i < x.rows(); ++i) apply_into(x.row(i), out.row(i));
  return out;
}

std::vector<double> CostConfig::to_coupling_space(std::span<const double> x) const {
  if (projection) return projection->apply(x);
  return {x.begin(), x.end()};
}

DenseMatrix CostConfig::rows_to_coupling_space(const DenseMatrix& x) const {
  return projection ? projection->apply_rows(x) : x;
}

void CostConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
  if (!(eps_raw >= 0.0) || !std::isfinite(eps_raw)) throw ConfigError("eps must be finite and >= 0");
  if (!(eps_effective >= 0.0) || !std::isfinite(eps_effective)) {
    throw ConfigError("effective eps must be finite and >= 0");
  }
  if ((eps_raw == 0.0) != (eps_effective == 0.0)) {
    throw ConfigError("eps rescaling cannot turn a zero eps positive or vice versa");
  }
  if (projection) {
    const auto& p = *projection;
    if (p.basis.rows() != p.k || p.basis.cols() != p.d_in || p.mean.size() != p.d_in) {
      throw ConfigError("projection: inconsistent shapes");
    }
  }
}

double cost_x(CostKind kind, std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("cost: x-part dimension mismatch");
  return kind == CostKind::NegDot ? -dot(x, y) : squared_distance(x, y);
}

double coupling_cost(const CostConfig& cfg, AugmentedPoint a, AugmentedPoint b) {
  double c = cost_x(cfg.kind, a.x, b.x);
  if (a.z.size() != b.z.size()) throw ConfigError("cost: condition dimension mismatch");
  if (cfg.beta > 0.0 && !a.z.empty()) c += cfg.beta * squared_distance(a.z, b.z);
  return c;
}

double cost(const CostConfig& cfg, AugmentedPoint a, AugmentedPoint b) {
  if (!cfg.projection) return coupling_cost(cfg, a, b);
  if (a.x.size() != cfg.projection->d_in || b.x.size() != cfg.projection->d_in) {
    throw ConfigError("cost: point dimension does not match projection input");
  }
  const auto pa = cfg.projection->apply(a.x);
  const auto pb = cfg.projection->apply(b.x);
  return coupling_cost(cfg, {pa, a.z}, {pb, b.z});
}

double estimate_cost_std(const CostConfig& cfg, const PointBatch& noise, const PointBatch& data) {
  const std::size_t n = noise.size();
  const std::size_t m = data.size();
  if (n < 2 || m < 2) throw DomainError("estimate_cost_std: need at least 2 points per batch");
  const DenseMatrix nx = cfg.rows_to_coupling_space(noise.x);
  const DenseMatrix dx = cfg.rows_to_coupling_space(data.x);
  // Two passes in long double keep the result insensitive to point order.
  std::vector<double> costs(n * m);
  long double sum = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    const AugmentedPoint a{nx.row(i), noise.z ? noise.z->row(i) : std::span<const double>{}};
    for (std::size_t j = 0; j < m; ++j) {
      const AugmentedPoint b{dx.row(j), data.z ? data.z->row(j) : std::span<const double>{}};
      costs[i * m + j] = coupling_cost(cfg, a, b);
      sum += costs[i * m + j];
    }
  }
  const long double mean = sum / static_cast<long double>(costs.size());
  long double ss = 0.0L;
  for (double c : costs) ss += (c - mean) * (c - mean);
  const long double var = ss / static_cast<long double>(costs.size() - 1);
  if (var <= 0.0L) return 0.0;
  return static_cast<double>(std::sqrt(var));
}

ProjectionMatrix fit_pca(const DenseMatrix& data, std::size_t k, Rng& rng) {
  using Eigen::MatrixXd;
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  if (k == 0 || k > std::min(n, d)) throw DomainError("fit_pca: need 1 <= k <= min(N, d)");

  ProjectionMatrix out;
  out.d_in = d;
  out.k = k;
  out.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) out.mean[c] += data(i, c);
  }
  for (double& v : out.mean) v /= static_cast<double>(n);

  MatrixXd xc(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) xc(i, c) = data(i, c) - out.mean[c];
  }

  constexpr std::size_t kOversample = 8;
  constexpr int kPowerIterations = 8;
  const std::size_t width = std::min(k + kOversample, d);

  MatrixXd omega(d, width);
  for (Eigen::Index c = 0; c < omega.cols(); ++c) {
    for (Eigen::Index r = 0; r < omega.rows(); ++r) omega(r, c) = rng.normal();
  }
  auto orthonormal = [](const MatrixXd& m) -> MatrixXd {
    Eigen::HouseholderQR<MatrixXd> qr(m);
    return qr.householderQ() * MatrixXd::Identity(m.rows(), m.cols());
  };
  MatrixXd q = orthonormal(xc * omega);  // n x width
  for (int it = 0; it < kPowerIterations; ++it) {
    MatrixXd z = orthonormal(xc.transpose() * q);  // d x width
    q = orthonormal(xc * z);
  }
  // Rayleigh-Ritz on the captured subspace.
  const MatrixXd small = q.transpose() * xc;  // width x d
  Eigen::JacobiSVD<MatrixXd> svd(small, Eigen::ComputeThinV);
  const MatrixXd v = svd.matrixV();  // d x width, columns sorted by singular value
  const auto sv = svd.singularValues();

  out.basis = DenseMatrix(k, d);
  out.explained_variance.resize(k);
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  const double top = sv.size() > 0 ? sv(0) : 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < d; ++c) out.basis(r, c) = v(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(r));
    const double s = sv(static_cast<Eigen::Index>(r));
    out.explained_variance[r] = s * s / denom;
    if (s <= 1e-10 * std::max(top, 1e-300)) out.padded = true;
  }
  return out;
}

}  // namespace sdfm
