#include "sdfm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <string>

#include "sdfm/error.hpp"

namespace sdfm {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed + kGolden) ^ mix64(stream * 0xd1b54a32d192ed03ULL + 0x8bb84b93962eacc9ULL));
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(derive_key(seed, stream)) {}

Rng Rng::split(std::uint64_t id) const {
  return Rng(seed_, mix64(stream_ ^ mix64(id + 0x632be59bd9b4e019ULL)));
}

std::uint64_t Rng::next_u64() {
  // Weyl sequence position `counter_` on the stream keyed by key_, finalized
  // twice so that nearby keys do not produce correlated outputs.
  const std::uint64_t x = key_ + (counter_++) * kGolden;
  return mix64(mix64(x) ^ key_);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw DomainError("Rng::below: n must be positive");
  // Lemire's nearly-divisionless rejection.
  while (true) {
    const std::uint64_t x = next_u64();
    const __uint128_t m = static_cast<__uint128_t>(x) * n;
    const auto low = static_cast<std::uint64_t>(m);
    if (low >= n || low >= (-n) % n) return static_cast<std::uint64_t>(m >> 64);
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  // Box-Muller; u1 in (0, 1] avoids log(0).
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ConfigError("DenseMatrix: data length " + std::to_string(data_.size()) + " != " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
}

bool DenseMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix sample_gaussian(Rng& rng, std::size_t n, std::size_t d) {
  if (n == 0 || d == 0) throw DomainError("sample_gaussian: n and d must be >= 1");
  DenseMatrix out(n, d);
  for (double& v : out.flat()) v = rng.normal();
  return out;
}

double logsumexp_weighted(std::span<const double> z, std::span<const double> logw) {
  if (z.empty()) throw DegenerateInputError("logsumexp_weighted: empty support");
  if (z.size() != logw.size()) throw ConfigError("logsumexp_weighted: length mismatch");
  double hi = kNegInf;
  for (std::size_t j = 0; j < z.size(); ++j) hi = std::max(hi, z[j] + logw[j]);
  if (hi == kNegInf) return kNegInf;
  double acc = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) acc += std::exp(z[j] + logw[j] - hi);
  return hi + std::log(acc);
}

double max_value(std::span<const double> z) {
  const std::size_t n = z.size();
  double m[4] = {z[0], z[0], z[0], z[0]};
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    for (std::size_t l = 0; l < 4; ++l) m[l] = std::max(m[l], z[j + l]);
  }
  for (; j < n; ++j) m[0] = std::max(m[0], z[j]);
  return std::max(std::max(m[0], m[1]), std::max(m[2], m[3]));
}

std::vector<std::size_t> argmax_set(std::span<const double> z, double tol) {
  std::vector<std::size_t> out;
  if (z.empty()) return out;
  const double hi = max_value(z);
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (z[j] >= hi - tol) out.push_back(j);
  }
  return out;
}

std::vector<double> softmax_b_eps(std::span<const double> z, std::span<const double> b, double eps) {
  if (z.size() != b.size()) throw ConfigError("softmax_b_eps: length mismatch");
  if (z.empty()) throw DegenerateInputError("softmax_b_eps: empty input");
  if (eps < 0.0) throw DomainError("softmax_b_eps: eps must be >= 0");
  std::vector<double> out(z.size(), 0.0);
  if (eps == 0.0) {
    const auto ties = argmax_set(z);
    double mass = 0.0;
    for (auto j : ties) mass += b[j];
    if (mass <= 0.0) throw DegenerateInputError("softmax_b_eps: argmax set carries no weight");
    for (auto j : ties) out[j] = b[j] / mass;
    return out;
  }
  double hi = kNegInf;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (b[j] > 0.0) hi = std::max(hi, z[j] / eps);
  }
  if (hi == kNegInf) throw DegenerateInputError("softmax_b_eps: all weights vanish");
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = b[j] > 0.0 ? b[j] * std::exp(z[j] / eps - hi) : 0.0;
    total += out[j];
  }
  for (double& v : out) v /= total;
  return out;
}

std::size_t sample_categorical(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw DegenerateInputError("sample_categorical: weights sum to zero");
  const double u = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] <= 0.0) continue;
    acc += weights[j];
    last = j;
    if (u < acc) return j;
  }
  return last;
}

CategoricalTable::CategoricalTable(std::span<const double> probs) : cdf_(probs.size()) {
  if (probs.empty()) throw DegenerateInputError("CategoricalTable: empty distribution");
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] < 0.0) throw DomainError("CategoricalTable: negative probability");
    acc += probs[j];
    cdf_[j] = acc;
  }
  if (!(acc > 0.0)) throw DegenerateInputError("CategoricalTable: probabilities sum to zero");
  for (double& c : cdf_) c /= acc;
  cdf_.back() = 1.0;
}

std::size_t CategoricalTable::sample(Rng& rng) const {
  const double u = rng.uniform();
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  auto j = static_cast<std::size_t>(it - cdf_.begin());
  if (j >= cdf_.size()) j = cdf_.size() - 1;
  // Skip zero-probability entries that share the same cdf value.
  while (j > 0 && cdf_[j - 1] == cdf_[j]) --j;
  return j;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

unsigned thread_count() {
  if (const char* env = std::getenv("SDFM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return 1u;
}

}  // namespace sdfm
