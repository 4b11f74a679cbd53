#include "sdfm/flow.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "sdfm/error.hpp"

namespace sdfm {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

void check_field_inputs(const VelocityField& f, std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z) {
  if (x.cols() != f.dim()) throw ConfigError("velocity field: state dimension mismatch");
  if (t.size() != x.rows()) throw ConfigError("velocity field: need one time per row");
  const std::size_t p = z ? z->cols() : 0;
  if (p != f.condition_dim()) throw ConfigError("velocity field: condition dimension mismatch");
  if (z && z->rows() != x.rows()) throw ConfigError("velocity field: condition rows mismatch");
}

/// Advances every row of x by one fixed step, calling `observe` with the
/// first-stage velocity.
template <class Observe>
void step_all(const VelocityField& field, IntegratorKind kind, double t, double h, DenseMatrix& x,
              const DenseMatrix* z, Observe&& observe) {
  const std::size_t b = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> times(b, t);
  DenseMatrix k1(b, d);
  field.eval(times, x, z, k1);
  observe(k1);
  if (kind == IntegratorKind::Euler) {
    auto xs = x.flat();
    const auto v = k1.flat();
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += h * v[i];
    return;
  }
  DenseMatrix k2(b, d);
  DenseMatrix k3(b, d);
  DenseMatrix k4(b, d);
  DenseMatrix tmp(b, d);
  auto stage = [&](const DenseMatrix& k, double scale, double tt, DenseMatrix& out) {
    auto ts = tmp.flat();
    const auto xs = x.flat();
    const auto ks = k.flat();
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = xs[i] + scale * ks[i];
    std::fill(times.begin(), times.end(), tt);
    field.eval(times, tmp, z, out);
  };
  stage(k1, 0.5 * h, t + 0.5 * h, k2);
  stage(k2, 0.5 * h, t + 0.5 * h, k3);
  stage(k3, h, t + h, k4);
  auto xs = x.flat();
  const auto a = k1.flat();
  const auto b2 = k2.flat();
  const auto c = k3.flat();
  const auto e = k4.flat();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += h / 6.0 * (a[i] + 2.0 * b2[i] + 2.0 * c[i] + e[i]);
}

double grid_time(std::size_t k, std::size_t steps, double t_end) {
  return t_end * static_cast<double>(k) / static_cast<double>(steps);
}

void validate_integrator(const IntegratorConfig& cfg) {
  if (cfg.steps == 0) throw DomainError("integrator needs at least one step");
  if (!(cfg.t_end > 0.0) || cfg.t_end > 1.0) throw DomainError("integration end time must lie in (0, 1]");
}

}  // namespace

std::vector<double> VelocityField::at(double t, std::span<const double> x, std::span<const double> z) const {
  DenseMatrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
  std::optional<DenseMatrix> zm;
  if (!z.empty()) zm = DenseMatrix(1, z.size(), std::vector<double>(z.begin(), z.end()));
  DenseMatrix out(1, dim());
  const double ts[1] = {t};
  eval(ts, xm, zm ? &*zm : nullptr, out);
  return {out.flat().begin(), out.flat().end()};
}

void FunctionField::eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z,
                         DenseMatrix& out) const {
  check_field_inputs(*this, t, x, z);
  if (out.rows() != x.rows() || out.cols() != dim_) out = DenseMatrix(x.rows(), dim_);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    fn_(t[i], x.row(i), z ? z->row(i) : std::span<const double>{}, out.row(i));
  }
}

MixedField::MixedField(const VelocityField& v1, const VelocityField& v2, double a) : v1_(v1), v2_(v2), a_(a) {
  if (v1.dim() != v2.dim() || v1.condition_dim() != v2.condition_dim()) {
    throw ConfigError("mixed field: models must share dimensions");
  }
}

void MixedField::eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const {
  DenseMatrix o1(x.rows(), dim());
  DenseMatrix o2(x.rows(), dim());
  v1_.eval(t, x, z, o1);
  v2_.eval(t, x, z, o2);
  if (out.rows() != x.rows() || out.cols() != dim()) out = DenseMatrix(x.rows(), dim());
  auto dst = out.flat();
  const auto a = o1.flat();
  const auto b = o2.flat();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a_ * a[i] + (1.0 - a_) * b[i];
}

FlowModel::FlowModel(MlpConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  build_layers();
  for (const auto& layer : layers_) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (std::size_t k = 0; k < layer.in * layer.out; ++k) theta_[layer.offset + k] = scale * rng.normal();
  }
}

FlowModel::FlowModel(MlpConfig cfg, std::vector<double> theta) : cfg_(std::move(cfg)) {
  build_layers();
  if (theta.size() != theta_.size()) {
    throw ConfigError("model parameter vector has length " + std::to_string(theta.size()) + ", expected " +
                      std::to_string(theta_.size()));
  }
  theta_ = std::move(theta);
}

void FlowModel::build_layers() {
  if (cfg_.dim == 0) throw ConfigError("model dimension must be positive");
  std::size_t in = cfg_.dim + 1 + cfg_.condition_dim;
  std::size_t offset = 0;
  layers_.clear();
  std::vector<std::size_t> widths = cfg_.hidden;
  widths.push_back(cfg_.dim);
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("hidden layer width must be positive");
    layers_.push_back({in, w, offset});
    offset += in * w + w;
    in = w;
  }
  theta_.assign(offset, 0.0);
}

void FlowModel::eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const {
  check_field_inputs(*this, t, x, z);
  const std::size_t b = x.rows();
  const std::size_t d = cfg_.dim;
  const std::size_t p = cfg_.condition_dim;
  RowMat a(b, d + 1 + p);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < d; ++c) a(i, c) = x(i, c);
    a(i, d) = t[i];
    for (std::size_t c = 0; c < p; ++c) a(i, d + 1 + c) = (*z)(i, c);
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const ConstMap w(theta_.data() + layer.offset, layer.out, layer.in);
    const Eigen::Map<const Eigen::RowVectorXd> bias(theta_.data() + layer.offset + layer.in * layer.out, layer.out);
    // Coefficient-wise product: a row's output does not depend on the batch size.
    RowMat zl = a.lazyProduct(w.transpose());
    zl.rowwise() += bias;
    if (l + 1 < layers_.size()) zl = zl.unaryExpr([](double v) { return v * sigmoid(v); });
    a = std::move(zl);
  }
  if (out.rows() != b || out.cols() != d) out = DenseMatrix(b, d);
  MutMap(out.data(), b, d) = a;
}

double FlowModel::loss_and_grad(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z,
                                const DenseMatrix& target, std::vector<double>& grad) const {
  check_field_inputs(*this, t, x, z);
  const std::size_t b = x.rows();
  const std::size_t d = cfg_.dim;
  const std::size_t p = cfg_.condition_dim;
  if (b == 0) throw DegenerateInputError("loss on an empty batch");
  if (target.rows() != b || target.cols() != d) throw ConfigError("regression target shape mismatch");

  std::vector<RowMat> acts;  // inputs of each layer
  std::vector<RowMat> pre;   // pre-activations of hidden layers
  acts.reserve(layers_.size());
  pre.reserve(layers_.size());
  RowMat a(b, d + 1 + p);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < d; ++c) a(i, c) = x(i, c);
    a(i, d) = t[i];
    for (std::size_t c = 0; c < p; ++c) a(i, d + 1 + c) = (*z)(i, c);
  }
  acts.push_back(a);
  RowMat outm;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const ConstMap w(theta_.data() + layer.offset, layer.out, layer.in);
    const Eigen::Map<const Eigen::RowVectorXd> bias(theta_.data() + layer.offset + layer.in * layer.out, layer.out);
    RowMat zl = acts.back() * w.transpose();
    zl.rowwise() += bias;
    if (l + 1 < layers_.size()) {
      pre.push_back(zl);
      acts.push_back(zl.unaryExpr([](double v) { return v * sigmoid(v); }));
    } else {
      outm = std::move(zl);
    }
  }

  const ConstMap tgt(target.data(), b, d);
  RowMat delta = outm - tgt;  // pred - target
  const double loss = delta.squaredNorm() / static_cast<double>(b);
  delta *= 2.0 / static_cast<double>(b);

  grad.assign(theta_.size(), 0.0);
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Layer& layer = layers_[l];
    const RowMat& input = acts[l];
    MutMap gw(grad.data() + layer.offset, layer.out, layer.in);
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + layer.offset + layer.in * layer.out, layer.out);
    gw.noalias() = delta.transpose() * input;
    gb = delta.colwise().sum();
    if (l == 0) break;
    const ConstMap w(theta_.data() + layer.offset, layer.out, layer.in);
    RowMat up = delta * w;
    const RowMat& zprev = pre[l - 1];
    // d/dz [z * sigmoid(z)] = s + z s (1 - s)
    delta = up.binaryExpr(zprev, [](double g, double v) {
      const double s = sigmoid(v);
      return g * (s + v * s * (1.0 - s));
    });
  }
  return loss;
}

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  if (x0.size() != x1.size()) throw ConfigError("interpolate: dimension mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t must lie in [0, 1]");
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

FmLoss fm_loss_and_grad(const FlowModel& model, const PairBatch& pairs, std::span<const double> t) {
  const std::size_t b = pairs.size();
  const std::size_t d = model.dim();
  if (pairs.noise.rows() != b || pairs.data.rows() != b) throw ConfigError("pair batch is not resolved");
  if (pairs.noise.cols() != d || pairs.data.cols() != d) throw ConfigError("pair dimension does not match the model");
  if (t.size() != b) throw ConfigError("need one time per pair");
  DenseMatrix xt(b, d);
  DenseMatrix target(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    if (!(t[i] >= 0.0 && t[i] < 1.0)) throw DomainError("training times must lie in [0, 1)");
    const auto x0 = pairs.noise.row(i);
    const auto x1 = pairs.data.row(i);
    for (std::size_t c = 0; c < d; ++c) {
      xt(i, c) = (1.0 - t[i]) * x0[c] + t[i] * x1[c];
      target(i, c) = x1[c] - x0[c];
    }
  }
  const DenseMatrix* z = pairs.conditions ? &*pairs.conditions : nullptr;
  FmLoss out;
  out.loss = model.loss_and_grad(t, xt, z, target, out.grad);
  return out;
}

void Adam::step(std::span<double> theta, std::span<const double> grad) {
  if (theta.size() != m_.size() || grad.size() != m_.size()) throw ConfigError("Adam: parameter size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    theta[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
  }
}

double fm_step(FlowModel& model, Adam& opt, const PairBatch& pairs, std::span<const double> t) {
  const FmLoss l = fm_loss_and_grad(model, pairs, t);
  if (!std::isfinite(l.loss)) throw NumericError("flow-matching loss is not finite");
  opt.step(model.parameters(), l.grad);
  return l.loss;
}

std::string to_string(CouplingKind k) {
  switch (k) {
    case CouplingKind::Independent: return "independent";
    case CouplingKind::SemiDiscrete: return "sd";
    case CouplingKind::MinibatchOt: return "minibatch-ot";
  }
  return "unknown";
}

CouplingSource CouplingSource::independent() { return {}; }

CouplingSource CouplingSource::semidiscrete(const Potential& pot) {
  CouplingSource s;
  s.kind = CouplingKind::SemiDiscrete;
  s.potential = &pot;
  return s;
}

CouplingSource CouplingSource::minibatch(CostConfig cost, double eps, MinibatchMethod method) {
  CouplingSource s;
  s.kind = CouplingKind::MinibatchOt;
  s.cost = std::move(cost);
  s.eps = eps;
  s.method = method;
  return s;
}

PairBatch draw_pairs(const CouplingSource& source, const TargetMeasure& target, const PointBatch& noise, Rng& rng) {
  switch (source.kind) {
    case CouplingKind::Independent: return couple_independent(target, noise, rng);
    case CouplingKind::SemiDiscrete:
      if (!source.potential) throw ConfigError("semidiscrete coupling needs a potential");
      return assign_batch(target, *source.potential, noise, rng);
    case CouplingKind::MinibatchOt:
      return couple_minibatch_ot(target, noise, source.cost, source.eps, rng, source.method, source.sinkhorn);
  }
  throw ConfigError("unknown coupling kind");
}

FlowModel train_flow(FlowModel model, const TargetMeasure& target, const SourceMeasure& noise,
                     const CouplingSource& coupling, const TrainConfig& cfg, Rng rng, RunMetrics* metrics) {
  if (cfg.batch == 0) throw ConfigError("training batch must be >= 1");
  if (!(cfg.t_max > 0.0 && cfg.t_max < 1.0)) throw ConfigError("t_max must lie in (0, 1)");
  if (noise.dim() != model.dim() || target.dim() != model.dim()) {
    throw ConfigError("noise, target and model dimensions must agree");
  }
  Adam opt(model.num_parameters(), cfg.adam);
  double loss_acc = 0.0;
  double pair_ms_acc = 0.0;
  std::size_t window = 0;
  std::vector<double> t(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Rng step_rng = rng.split(step);
    Rng noise_rng = step_rng.split(0);
    Rng pair_rng = step_rng.split(1);
    Rng t_rng = step_rng.split(2);
    const WeightedBatch x0 = noise.sample(noise_rng, cfg.batch);
    const PairBatch pairs = draw_pairs(coupling, target, x0.points, pair_rng);
    for (double& ti : t) ti = cfg.t_max * t_rng.uniform();
    double loss = 0.0;
    try {
      loss = fm_step(model, opt, pairs, t);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at training step " + std::to_string(step));
    }
    loss_acc += loss;
    pair_ms_acc += pairs.time_per_pair_ms();
    ++window;
    if (metrics && cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      metrics->record(step + 1, "loss", loss_acc / static_cast<double>(window));
      metrics->record(step + 1, "time_per_pair_ms", pair_ms_acc / static_cast<double>(window));
      loss_acc = 0.0;
      pair_ms_acc = 0.0;
      window = 0;
    }
  }
  return model;
}

std::string to_string(IntegratorKind k) { return k == IntegratorKind::Euler ? "euler" : "rk4"; }

IntegratorKind parse_integrator(const std::string& name) {
  if (name == "euler") return IntegratorKind::Euler;
  if (name == "rk4") return IntegratorKind::Rk4;
  throw ConfigError("unknown integrator '" + name + "'");
}

Trajectory integrate(const VelocityField& field, std::span<const double> x0, std::span<const double> cond,
                     const IntegratorConfig& cfg) {
  validate_integrator(cfg);
  const std::size_t d = field.dim();
  if (x0.size() != d) throw ConfigError("integrate: initial state dimension mismatch");
  DenseMatrix x(1, d, std::vector<double>(x0.begin(), x0.end()));
  std::optional<DenseMatrix> z;
  if (!cond.empty()) z = DenseMatrix(1, cond.size(), std::vector<double>(cond.begin(), cond.end()));
  Trajectory traj;
  traj.times.resize(cfg.steps + 1);
  traj.states = DenseMatrix(cfg.steps + 1, d);
  traj.velocities = DenseMatrix(cfg.steps, d);
  std::copy(x0.begin(), x0.end(), traj.states.row(0).begin());
  traj.times[0] = 0.0;
  const double h = cfg.t_end / static_cast<double>(cfg.steps);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    step_all(field, cfg.kind, grid_time(k, cfg.steps, cfg.t_end), h, x, z ? &*z : nullptr,
             [&](const DenseMatrix& v) { std::copy_n(v.row(0).begin(), d, traj.velocities.row(k).begin()); });
    std::copy_n(x.row(0).begin(), d, traj.states.row(k + 1).begin());
    traj.times[k + 1] = grid_time(k + 1, cfg.steps, cfg.t_end);
  }
  return traj;
}

BatchIntegration integrate_batch(const VelocityField& field, const DenseMatrix& x0, const DenseMatrix* cond,
                                 const IntegratorConfig& cfg) {
  validate_integrator(cfg);
  const std::size_t b = x0.rows();
  const std::size_t d = field.dim();
  if (x0.cols() != d) throw ConfigError("integrate: initial state dimension mismatch");
  DenseMatrix x = x0;
  std::vector<DenseMatrix> vel;
  vel.reserve(cfg.steps);
  const double h = cfg.t_end / static_cast<double>(cfg.steps);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    step_all(field, cfg.kind, grid_time(k, cfg.steps, cfg.t_end), h, x, cond,
             [&](const DenseMatrix& v) { vel.push_back(v); });
  }
  BatchIntegration out;
  out.curvature.assign(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg.steps; ++k) {
      for (std::size_t c = 0; c < d; ++c) {
        const double chord = (x(i, c) - x0(i, c)) / cfg.t_end;
        const double diff = vel[k](i, c) - chord;
        acc += diff * diff;
      }
    }
    out.curvature[i] = acc / static_cast<double>(cfg.steps);
  }
  out.endpoints = std::move(x);
  return out;
}

double curvature(const Trajectory& traj) {
  const std::size_t s = traj.velocities.rows();
  if (s < 2) throw DomainError("curvature needs at least two steps");
  if (traj.states.rows() != s + 1 || traj.times.size() != s + 1) throw ConfigError("malformed trajectory");
  const std::size_t d = traj.states.cols();
  const double span_t = traj.times.back() - traj.times.front();
  if (!(span_t > 0.0)) throw DomainError("trajectory has zero duration");
  std::vector<double> chord(d);
  for (std::size_t c = 0; c < d; ++c) chord[c] = (traj.states(s, c) - traj.states(0, c)) / span_t;
  double acc = 0.0;
  for (std::size_t k = 0; k < s; ++k) acc += squared_distance(traj.velocities.row(k), chord);
  return acc / static_cast<double>(s);
}

std::vector<double> score_from_velocity(const VelocityField& field, std::span<const double> x, double t,
                                        std::span<const double> cond, std::span<const double> delta) {
  if (!(t < 1.0)) throw DomainError("score_from_velocity requires t < 1");
  if (t < 0.0) throw DomainError("score_from_velocity requires t >= 0");
  if (!delta.empty() && delta.size() != x.size()) throw ConfigError("delta correction dimension mismatch");
  const std::vector<double> v = field.at(t, x, cond);
  std::vector<double> out(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double corr = delta.empty() ? 0.0 : delta[c];
    out[c] = (t * v[c] - x[c] + corr) / (1.0 - t);
  }
  return out;
}

DeltaEstimate delta_eps_toy(const TargetMeasure& target, const Potential& pot, std::span<const double> x, double t,
                            std::size_t samples, Rng& rng) {
  if (!(pot.eps() > 0.0)) throw DomainError("delta_eps requires eps > 0");
  if (pot.cost.kind != CostKind::NegDot) throw UnsupportedError("delta_eps is implemented for the neg-dot cost");
  if (pot.cost.projection || target.conditional()) {
    throw UnsupportedError("delta_eps supports unprojected unconditional targets only");
  }
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("delta_eps requires t in [0, 1)");
  const std::size_t d = target.dim();
  const std::size_t n = target.size();
  if (x.size() != d) throw ConfigError("delta_eps: point dimension mismatch");
  if (samples < 2) throw DomainError("delta_eps needs at least two samples");

  const DenseMatrix x0 = sample_gaussian(rng, samples, d);
  std::vector<std::vector<double>> resp(samples);
  for (std::size_t i = 0; i < samples; ++i) resp[i] = responsibilities(target, pot, {x0.row(i)}).to_dense(n);

  // Bandwidth from simulated X_t with J drawn from the responsibilities.
  const std::size_t probe = std::min<std::size_t>(samples, 400);
  DenseMatrix xt(probe, d);
  for (std::size_t i = 0; i < probe; ++i) {
    const std::size_t j = sample_categorical(rng, resp[i]);
    for (std::size_t c = 0; c < d; ++c) xt(i, c) = (1.0 - t) * x0(i, c) + t * target.points(j, c);
  }
  std::vector<double> dists;
  dists.reserve(probe * (probe - 1) / 2);
  for (std::size_t i = 0; i < probe; ++i) {
    for (std::size_t k = i + 1; k < probe; ++k) dists.push_back(std::sqrt(squared_distance(xt.row(i), xt.row(k))));
  }
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2), dists.end());
  const double h = 0.2 * dists[dists.size() / 2];
  if (!(h > 0.0)) throw DegenerateInputError("delta_eps: simulated states collapse to a point");

  std::vector<double> num(samples * d, 0.0);
  std::vector<double> den(samples, 0.0);
  std::vector<double> ybar(d);
  std::vector<double> pt(d);
  const double inv_eps = 1.0 / pot.eps();
  for (std::size_t i = 0; i < samples; ++i) {
    std::fill(ybar.begin(), ybar.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < d; ++c) ybar[c] += resp[i][j] * target.points(j, c);
    }
    // Sum over J given X0 in closed form.
    for (std::size_t j = 0; j < n; ++j) {
      if (resp[i][j] == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) pt[c] = (1.0 - t) * x0(i, c) + t * target.points(j, c);
      const double w = resp[i][j] * std::exp(-squared_distance(pt, x) / (2.0 * h * h));
      den[i] += w;
      for (std::size_t c = 0; c < d; ++c) num[i * d + c] += w * (target.points(j, c) - ybar[c]) * inv_eps;
    }
  }
  const double total = std::accumulate(den.begin(), den.end(), 0.0);
  double sq = 0.0;
  for (double w : den) sq += w * w;
  DeltaEstimate out;
  out.bandwidth = h;
  out.ess = sq > 0.0 ? total * total / sq : 0.0;
  if (out.ess < 10.0) {
    throw DegenerateInputError("delta_eps: effective sample size " + std::to_string(out.ess) + " is below 10");
  }
  out.delta.assign(d, 0.0);
  out.std_error.assign(d, 0.0);
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t c = 0; c < d; ++c) out.delta[c] += num[i * d + c];
  }
  for (double& v : out.delta) v /= total;
  for (std::size_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
      const double r = num[i * d + c] - out.delta[c] * den[i];
      acc += r * r;
    }
    out.std_error[c] = std::sqrt(acc) / total;
  }
  return out;
}

void GuidanceConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be finite and >= 0");
  if (replicas == 0) throw ConfigError("guidance needs at least one replica");
  if (steps == 0) throw ConfigError("guidance needs at least one step");
  if (!(t_clip > 0.0 && t_clip < 1.0)) throw ConfigError("t_clip must lie in (0, 1)");
}

GuidedSample guided_sample(const VelocityField& v1, const VelocityField& v2, const GuidanceConfig& cfg,
                           Rng& noise_rng, Rng& select_rng, std::span<const double> cond) {
  cfg.validate();
  const MixedField mix(v1, v2, cfg.gamma);
  const std::size_t r = cfg.replicas;
  const std::size_t d = v1.dim();
  if (cond.size() != v1.condition_dim()) throw ConfigError("guidance: condition dimension mismatch");
  DenseMatrix x = sample_gaussian(noise_rng, r, d);
  std::optional<DenseMatrix> z;
  if (!cond.empty()) {
    z = DenseMatrix(r, cond.size());
    for (std::size_t i = 0; i < r; ++i) std::copy(cond.begin(), cond.end(), z->row(i).begin());
  }
  const DenseMatrix* zp = z ? &*z : nullptr;

  GuidedSample out;
  out.weights.assign(r, 0.0);
  const double coef = cfg.gamma * (cfg.gamma - 1.0);
  const double h = 1.0 / static_cast<double>(cfg.steps);
  DenseMatrix o1(r, d);
  DenseMatrix o2(r, d);
  std::vector<double> times(r);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double tk = grid_time(k, cfg.steps, 1.0);
    if (coef != 0.0 && tk < cfg.t_clip) {
      std::fill(times.begin(), times.end(), tk);
      v1.eval(times, x, zp, o1);
      v2.eval(times, x, zp, o2);
      const double factor = coef * h * tk / (1.0 - tk);
      for (std::size_t i = 0; i < r; ++i) out.weights[i] += factor * squared_distance(o1.row(i), o2.row(i));
    }
    step_all(mix, cfg.integrator, tk, h, x, zp, [](const DenseMatrix&) {});
  }
  const double hi = *std::max_element(out.weights.begin(), out.weights.end());
  std::vector<double> probs(r);
  for (std::size_t i = 0; i < r; ++i) probs[i] = std::exp(out.weights[i] - hi);
  out.chosen = sample_categorical(select_rng, probs);
  out.sample.assign(x.row(out.chosen).begin(), x.row(out.chosen).end());
  return out;
}

GuidedSample guided_sample(const VelocityField& v1, const VelocityField& v2, const GuidanceConfig& cfg, Rng& rng) {
  Rng select = rng.split(0x5e1ec7);
  return guided_sample(v1, v2, cfg, rng, select);
}

}  // namespace sdfm
