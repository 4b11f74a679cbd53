#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfm/coupling.hpp"
#include "sdfm/metrics.hpp"
#include "sdfm/semidual.hpp"

namespace sdfm {

/// Time-dependent velocity field v(t, x [, z]).
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t condition_dim() const { return 0; }

  /// Row i of `out` receives v(t[i], x.row(i), z.row(i)). `z` may be null
  /// for unconditional fields.
  virtual void eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const = 0;

  std::vector<double> at(double t, std::span<const double> x, std::span<const double> z = {}) const;
};

/// Velocity field backed by a per-point callable.
class FunctionField : public VelocityField {
 public:
  using Fn = std::function<void(double t, std::span<const double> x, std::span<const double> z, std::span<double> out)>;

  FunctionField(std::size_t dim, Fn fn, std::size_t condition_dim = 0)
      : dim_(dim), cond_dim_(condition_dim), fn_(std::move(fn)) {}

  std::size_t dim() const override { return dim_; }
  std::size_t condition_dim() const override { return cond_dim_; }
  void eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const override;

 private:
  std::size_t dim_;
  std::size_t cond_dim_;
  Fn fn_;
};

/// Weighted combination a * v1 + (1 - a) * v2.
class MixedField : public VelocityField {
 public:
  MixedField(const VelocityField& v1, const VelocityField& v2, double a);
  std::size_t dim() const override { return v1_.dim(); }
  std::size_t condition_dim() const override { return v1_.condition_dim(); }
  void eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const override;

 private:
  const VelocityField& v1_;
  const VelocityField& v2_;
  double a_;
};

struct MlpConfig {
  std::size_t dim = 2;
  std::size_t condition_dim = 0;
  std::vector<std::size_t> hidden = {128, 128, 128};
};

/// MLP velocity field: input [x, t, z], SiLU hidden layers, linear output.
/// Parameters live in one flat vector, layer by layer (weights row-major
/// out x in, then biases).
class FlowModel : public VelocityField {
 public:
  FlowModel(MlpConfig cfg, Rng& rng);
  FlowModel(MlpConfig cfg, std::vector<double> theta);

  const MlpConfig& config() const { return cfg_; }
  std::size_t dim() const override { return cfg_.dim; }
  std::size_t condition_dim() const override { return cfg_.condition_dim; }
  std::size_t num_parameters() const { return theta_.size(); }
  std::span<double> parameters() { return theta_; }
  std::span<const double> parameters() const { return theta_; }

  void eval(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z, DenseMatrix& out) const override;

  /// mean_i ||target_i - v(t_i, x_i, z_i)||^2; the gradient with respect to
  /// the parameters is written to `grad`.
  double loss_and_grad(std::span<const double> t, const DenseMatrix& x, const DenseMatrix* z,
                       const DenseMatrix& target, std::vector<double>& grad) const;

  friend bool operator==(const FlowModel& a, const FlowModel& b) { return a.theta_ == b.theta_; }

 private:
  struct Layer {
    std::size_t in;
    std::size_t out;
    std::size_t offset;  // weights at offset, biases at offset + in * out
  };
  void build_layers();

  MlpConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<double> theta_;
};

/// phi_t(x0, x1) = (1 - t) x0 + t x1.
std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t);

struct FmLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Flow-matching regression loss of `model` on the pairs at times t.
FmLoss fm_loss_and_grad(const FlowModel& model, const PairBatch& pairs, std::span<const double> t);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}
  void step(std::span<double> theta, std::span<const double> grad);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

/// One optimizer step on a pair batch; returns the loss before the step.
/// Independent of how the pairs were produced.
double fm_step(FlowModel& model, Adam& opt, const PairBatch& pairs, std::span<const double> t);

enum class CouplingKind { Independent, SemiDiscrete, MinibatchOt };

std::string to_string(CouplingKind k);

/// Where training pairs come from.
struct CouplingSource {
  CouplingKind kind = CouplingKind::Independent;
  const Potential* potential = nullptr;  // SemiDiscrete
  CostConfig cost;                       // MinibatchOt
  double eps = 0.0;                      // MinibatchOt
  MinibatchMethod method = MinibatchMethod::Hungarian;
  SinkhornOptions sinkhorn;

  static CouplingSource independent();
  static CouplingSource semidiscrete(const Potential& pot);
  static CouplingSource minibatch(CostConfig cost, double eps, MinibatchMethod method);
};

/// Pairs `noise` with target atoms according to `source`.
PairBatch draw_pairs(const CouplingSource& source, const TargetMeasure& target, const PointBatch& noise, Rng& rng);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 256;
  AdamConfig adam;
  double t_max = 1.0 - 1e-3;
  std::size_t log_every = 100;
};

/// Flow-matching training. Each step draws noise from `noise`, pairs it via
/// `coupling`, draws t ~ U[0, t_max] and takes one Adam step.
FlowModel train_flow(FlowModel model, const TargetMeasure& target, const SourceMeasure& noise,
                     const CouplingSource& coupling, const TrainConfig& cfg, Rng rng, RunMetrics* metrics = nullptr);

enum class IntegratorKind { Euler, Rk4 };

std::string to_string(IntegratorKind k);
IntegratorKind parse_integrator(const std::string& name);

struct IntegratorConfig {
  IntegratorKind kind = IntegratorKind::Euler;
  std::size_t steps = 16;
  double t_end = 1.0;
};

struct Trajectory {
  std::vector<double> times;  // S + 1
  DenseMatrix states;         // (S + 1) x d
  DenseMatrix velocities;     // S x d, v(t_k, x_k)
};

Trajectory integrate(const VelocityField& field, std::span<const double> x0, std::span<const double> cond,
                     const IntegratorConfig& cfg);

struct BatchIntegration {
  DenseMatrix endpoints;           // B x d
  std::vector<double> curvature;   // per row
};

/// Integrates every row of x0 at once; per-row curvature is computed from
/// the same evaluations.
BatchIntegration integrate_batch(const VelocityField& field, const DenseMatrix& x0, const DenseMatrix* cond,
                                 const IntegratorConfig& cfg);

/// Mean over the grid of ||v(t_k, x_k) - (x_S - x_0) / T||^2.
double curvature(const Trajectory& traj);

/// (t v(t, x) - x + delta) / (1 - t); `delta` defaults to zero.
std::vector<double> score_from_velocity(const VelocityField& field, std::span<const double> x, double t,
                                        std::span<const double> cond = {}, std::span<const double> delta = {});

struct DeltaEstimate {
  std::vector<double> delta;
  std::vector<double> std_error;
  double ess = 0.0;
  double bandwidth = 0.0;
};

/// Kernel-weighted Monte-Carlo estimate of
/// delta_eps(x) = (1/eps) E[y_J - sum_k s_k(X0) y_k | X_t = x]
/// for the neg-dot cost and a N(0, I) source.
DeltaEstimate delta_eps_toy(const TargetMeasure& target, const Potential& pot, std::span<const double> x, double t,
                            std::size_t samples, Rng& rng);

struct GuidanceConfig {
  double gamma = 1.0;
  std::size_t replicas = 16;
  std::size_t steps = 32;
  double t_clip = 0.99;
  IntegratorKind integrator = IntegratorKind::Euler;

  void validate() const;
};

struct GuidedSample {
  std::vector<double> sample;
  std::vector<double> weights;
  std::size_t chosen = 0;
};

/// Replicas start from N(0, I) draws taken in order from `noise_rng`; the
/// replica index is drawn from softmax(weights) using `select_rng`.
GuidedSample guided_sample(const VelocityField& v1, const VelocityField& v2, const GuidanceConfig& cfg,
                           Rng& noise_rng, Rng& select_rng, std::span<const double> cond = {});

/// guided_sample with both generators split from `rng`.
GuidedSample guided_sample(const VelocityField& v1, const VelocityField& v2, const GuidanceConfig& cfg, Rng& rng);

}  // namespace sdfm
