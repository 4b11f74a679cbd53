#include "sdfm/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "sdfm/container.hpp"
#include "sdfm/coupling.hpp"
#include "sdfm/error.hpp"
#include "sdfm/flow.hpp"
#include "sdfm/solver.hpp"

namespace sdfm {
namespace {

using nlohmann::json;

struct Context {
  std::ostream& out;
};

void write_json(const std::string& path, const json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + tmp + "' for writing");
    f << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedTarget {
  Dataset raw;
  TargetMeasure target;
  SourceMeasure source;
};

LoadedTarget load_target(const std::string& path, const CostConfig& cost) {
  Dataset raw = dataset_from_container(read_container(path, ContainerKind::Dataset));
  TargetMeasure target = make_target(raw.points, raw.conditions, raw.weights, cost);
  SourceMeasure source = default_source(target, cost, raw.conditions);
  return {std::move(raw), std::move(target), std::move(source)};
}

std::vector<std::size_t> parse_hidden(const std::string& spec) {
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("--hidden expects comma-separated positive widths, got '" + spec + "'");
    }
  }
  if (out.empty()) throw ConfigError("--hidden needs at least one width");
  return out;
}

/// Rows of `cond` repeated cyclically to `count` rows.
std::optional<DenseMatrix> cycle_conditions(const std::string& path, std::size_t count, std::size_t cdim) {
  if (cdim == 0) {
    if (!path.empty()) throw ConfigError("--conditions given for an unconditional model");
    return std::nullopt;
  }
  if (path.empty()) throw ConfigError("conditional model needs --conditions");
  const Dataset d = dataset_from_container(read_container(path, ContainerKind::Dataset));
  if (d.points.cols() != cdim || d.points.rows() == 0) throw ConfigError("--conditions has the wrong width");
  DenseMatrix z(count, cdim);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = d.points.row(i % d.points.rows());
    std::copy(row.begin(), row.end(), z.row(i).begin());
  }
  return z;
}

// ---- solve ----

struct SolveArgs {
  std::string data, out, metrics, optimizer = "adagrad", cost = "negdot";
  double eps = -1.0, tau = 0.05, beta = 0.0;
  std::optional<double> lr;
  std::size_t iters = 30000, batch = 256, pca = 0, check_interval = 2000, chi2_samples = std::size_t{1} << 20;
  std::uint64_t seed = 0;
  bool no_rescale = false;
};

int cmd_solve(const SolveArgs& a, Context& ctx) {
  CostConfig cost;
  cost.kind = parse_cost_kind(a.cost);
  cost.beta = a.beta;
  cost.eps_raw = a.eps;
  cost.eps_effective = a.eps;
  cost.validate();
  if (a.eps == 0.0 && cost.kind != CostKind::NegDot) {
    throw ConfigError("eps = 0 requires the negdot cost");
  }
  const Rng rng(a.seed);
  Dataset raw = dataset_from_container(read_container(a.data, ContainerKind::Dataset));
  if (a.beta > 0.0 && !raw.conditions) throw ConfigError("--beta needs a dataset with conditions");
  if (a.pca > 0) {
    Rng pca_rng = rng.split(10);
    cost.projection = fit_pca(raw.points, a.pca, pca_rng);
  }
  TargetMeasure target = make_target(raw.points, raw.conditions, raw.weights, cost);
  SourceMeasure source = default_source(target, cost, raw.conditions);
  if (!a.no_rescale) calibrate_eps(cost, target, source, rng.split(11));

  SolverConfig cfg = SolverConfig::recipe(a.iters);
  cfg.optimizer = parse_optimizer(a.optimizer);
  cfg.base_lr = a.lr;
  cfg.batch = a.batch;
  cfg.tau = a.tau;
  cfg.check_interval = a.check_interval;
  cfg.chi2_samples = a.chi2_samples;
  cfg.chi2_batch = std::min(cfg.chi2_batch, a.chi2_samples);
  cfg.validate();

  RunMetrics metrics;
  SolveHooks hooks;
  hooks.metrics = &metrics;
  hooks.on_check = [&](const CheckRecord&, const Potential& pot) { write_container(a.out, potential_container(pot)); };
  const SolveResult res = solve_sdot(target, cost, cfg, source, rng.split(12), hooks);
  write_container(a.out, potential_container(res.potential));
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  metrics.write_csv(metrics_path);

  const bool converged = res.reason == StopReason::Converged;
  json summary = {{"command", "solve"},
                  {"config",
                   {{"data", a.data},
                    {"optimizer", a.optimizer},
                    {"iters", a.iters},
                    {"batch", a.batch},
                    {"tau", a.tau},
                    {"seed", a.seed},
                    {"pca", a.pca},
                    {"cost", cost_to_json(res.potential.cost)}}},
                  {"status", converged ? "converged" : "max_iterations"},
                  {"iterations", res.potential.provenance.iterations},
                  {"final_chi2", res.potential.provenance.final_chi2},
                  {"metrics", metrics_path}};
  write_json(a.out + ".json", summary);
  ctx.out << summary.dump() << "\n";
  return converged ? kExitOk : kExitBudget;
}

// ---- assign ----

struct AssignArgs {
  std::string potential, data, noise, out;
  std::size_t sample = 0;
  std::uint64_t seed = 0;
  bool resolve = false;
};

int cmd_assign(const AssignArgs& a, Context& ctx) {
  if (a.noise.empty() == (a.sample == 0)) throw ConfigError("give exactly one of --noise or --sample");
  const Potential pot = potential_from_container(read_container(a.potential, ContainerKind::Potential));
  const LoadedTarget lt = load_target(a.data, pot.cost);
  check_binding(lt.target, pot);
  const Rng rng(a.seed);
  PointBatch noise;
  if (!a.noise.empty()) {
    const Dataset d = dataset_from_container(read_container(a.noise, ContainerKind::Dataset));
    noise = PointBatch{d.points, d.conditions};
  } else {
    Rng noise_rng = rng.split(0);
    noise = lt.source.sample(noise_rng, a.sample).points;
  }
  PairBatch pairs = assign_batch(lt.target, pot, noise, rng.split(1));

  Container c;
  c.kind = ContainerKind::Dataset;
  c.add("index", {pairs.size()}, std::vector<double>(pairs.index.begin(), pairs.index.end()));
  if (a.resolve) {
    c.add("noise", pairs.noise);
    c.add("data", pairs.data);
    if (pairs.conditions) c.add("conditions", *pairs.conditions);
  }
  c.meta["provenance"] = to_string(pairs.provenance);
  write_container(a.out, c);
  json summary = {{"command", "assign"},
                  {"pairs", pairs.size()},
                  {"pairing_ms", pairs.pairing_ms},
                  {"time_per_pair_ms", pairs.time_per_pair_ms()},
                  {"eps", pot.eps()}};
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string data, coupling = "independent", potential, method = "hungarian", cost = "sqeuclid", hidden = "128,128,128",
                    out, metrics;
  double eps = 0.0, lr = 1e-3;
  std::size_t steps = 2000, batch = 256, log_every = 100;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, Context& ctx) {
  CostConfig cost;
  std::optional<Potential> pot;
  CouplingSource coupling;
  if (a.coupling == "sd") {
    if (a.potential.empty()) throw ConfigError("--coupling sd needs --potential");
    pot = potential_from_container(read_container(a.potential, ContainerKind::Potential));
    if (pot->cost.projection) throw UnsupportedError("flows are trained in raw space; the potential is projected");
    cost = pot->cost;
  } else if (a.coupling == "minibatch-ot") {
    cost.kind = parse_cost_kind(a.cost);
    cost.eps_raw = a.eps;
    cost.eps_effective = a.eps;
    cost.validate();
    coupling = CouplingSource::minibatch(cost, a.eps, parse_minibatch_method(a.method));
  } else if (a.coupling != "independent") {
    throw ConfigError("unknown coupling '" + a.coupling + "'");
  }
  const LoadedTarget lt = load_target(a.data, cost);
  if (pot) {
    check_binding(lt.target, *pot);
    coupling = CouplingSource::semidiscrete(*pot);
  }
  const Rng rng(a.seed);
  MlpConfig mcfg;
  mcfg.dim = lt.target.dim();
  mcfg.condition_dim = lt.target.condition_dim();
  mcfg.hidden = parse_hidden(a.hidden);
  Rng init_rng = rng.split(0);
  FlowModel model(mcfg, init_rng);
  TrainConfig tcfg;
  tcfg.steps = a.steps;
  tcfg.batch = a.batch;
  tcfg.adam.lr = a.lr;
  tcfg.log_every = a.log_every;
  RunMetrics metrics;
  model = train_flow(std::move(model), lt.target, lt.source, coupling, tcfg, rng.split(1), &metrics);

  json meta = {{"coupling", a.coupling}, {"steps", a.steps}, {"batch", a.batch}, {"seed", a.seed}, {"lr", a.lr}};
  write_container(a.out, model_container(model, meta));
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  metrics.write_csv(metrics_path);
  const auto loss = metrics.series("loss");
  json summary = {{"command", "train"},
                  {"config", meta},
                  {"final_loss", loss.empty() ? 0.0 : loss.back()},
                  {"metrics", metrics_path}};
  write_json(a.out + ".json", summary);
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- sample ----

struct SampleArgs {
  std::string model, out, integrator = "euler", conditions;
  std::size_t count = 512, steps = 16;
  std::uint64_t seed = 0;
};

/// Noise row i is drawn from rng.split(i).
DenseMatrix per_row_noise(const Rng& rng, std::size_t count, std::size_t d) {
  DenseMatrix x(count, d);
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = rng.split(i);
    const DenseMatrix row = sample_gaussian(r, 1, d);
    std::copy_n(row.row(0).begin(), d, x.row(i).begin());
  }
  return x;
}

int cmd_sample(const SampleArgs& a, Context& ctx) {
  const FlowModel model = model_from_container(read_container(a.model, ContainerKind::Model));
  const auto z = cycle_conditions(a.conditions, a.count, model.condition_dim());
  const DenseMatrix x0 = per_row_noise(Rng(a.seed), a.count, model.dim());
  IntegratorConfig icfg;
  icfg.kind = parse_integrator(a.integrator);
  icfg.steps = a.steps;
  const BatchIntegration res = integrate_batch(model, x0, z ? &*z : nullptr, icfg);
  write_container(a.out, dataset_container({res.endpoints, z, {}}));
  const double mean_curv =
      std::accumulate(res.curvature.begin(), res.curvature.end(), 0.0) / static_cast<double>(a.count);
  json summary = {{"command", "sample"},
                  {"shape", {a.count, model.dim()}},
                  {"integrator", a.integrator},
                  {"steps", a.steps},
                  {"seed", a.seed},
                  {"mean_curvature", mean_curv}};
  write_json(a.out + ".json", summary);
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- guide ----

struct GuideArgs {
  std::string model1, model2, out, integrator = "euler", conditions;
  double gamma = 1.0, t_clip = 0.99;
  std::size_t count = 512, replicas = 16, steps = 16;
  std::uint64_t seed = 0;
};

int cmd_guide(const GuideArgs& a, Context& ctx) {
  const FlowModel m1 = model_from_container(read_container(a.model1, ContainerKind::Model));
  const FlowModel m2 = model_from_container(read_container(a.model2, ContainerKind::Model));
  if (m1.dim() != m2.dim() || m1.condition_dim() != m2.condition_dim()) {
    throw ConfigError("guidance models have different dimensions");
  }
  GuidanceConfig gcfg;
  gcfg.gamma = a.gamma;
  gcfg.replicas = a.replicas;
  gcfg.steps = a.steps;
  gcfg.t_clip = a.t_clip;
  gcfg.integrator = parse_integrator(a.integrator);
  gcfg.validate();
  const auto z = cycle_conditions(a.conditions, a.count, m1.condition_dim());
  const Rng rng(a.seed);
  DenseMatrix samples(a.count, m1.dim());
  DenseMatrix weights(a.count, a.replicas);
  std::vector<double> chosen(a.count);
  for (std::size_t i = 0; i < a.count; ++i) {
    // Same noise stream as `sample` uses for row i.
    Rng noise = rng.split(i);
    Rng select = rng.split(i).split(1);
    const GuidedSample g =
        guided_sample(m1, m2, gcfg, noise, select, z ? z->row(i) : std::span<const double>{});
    std::copy(g.sample.begin(), g.sample.end(), samples.row(i).begin());
    std::copy(g.weights.begin(), g.weights.end(), weights.row(i).begin());
    chosen[i] = static_cast<double>(g.chosen);
  }
  Container c = dataset_container({samples, z, {}});
  c.add("log_weights", weights);
  c.add("chosen", {a.count}, chosen);
  write_container(a.out, c);
  json summary = {{"command", "guide"},
                  {"shape", {a.count, m1.dim()}},
                  {"gamma", a.gamma},
                  {"replicas", a.replicas},
                  {"steps", a.steps},
                  {"t_clip", a.t_clip},
                  {"seed", a.seed}};
  write_json(a.out + ".json", summary);
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- chisq ----

struct ChisqArgs {
  std::string potential, data;
  std::size_t samples = std::size_t{1} << 20, batch = std::size_t{1} << 13;
  std::uint64_t seed = 0;
};

int cmd_chisq(const ChisqArgs& a, Context& ctx) {
  const Potential pot = potential_from_container(read_container(a.potential, ContainerKind::Potential));
  const LoadedTarget lt = load_target(a.data, pot.cost);
  check_binding(lt.target, pot);
  Rng rng(a.seed);
  const Chi2Estimate est = chi2_estimate(lt.target, pot, lt.source, rng, a.samples, std::min(a.batch, a.samples));
  json summary = {{"command", "chisq"},
                  {"chi2", est.value},
                  {"std_error", est.std_error},
                  {"batches", est.batches},
                  {"samples", a.samples}};
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  std::string samples, target, model, integrator = "euler", conditions;
  std::size_t count = 512, steps = 16;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a, Context& ctx) {
  if (a.samples.empty() && a.model.empty()) throw ConfigError("eval needs --samples and --target, or --model");
  json summary = {{"command", "eval"}};
  if (!a.samples.empty()) {
    if (a.target.empty()) throw ConfigError("--samples needs --target");
    const Dataset s = dataset_from_container(read_container(a.samples, ContainerKind::Dataset));
    const Dataset t = dataset_from_container(read_container(a.target, ContainerKind::Dataset));
    if (s.points.rows() != t.points.rows()) {
      throw ConfigError("W2 needs clouds of equal size (" + std::to_string(s.points.rows()) + " vs " +
                        std::to_string(t.points.rows()) + ")");
    }
    summary["w2"] = empirical_w2(s.points, t.points);
  }
  if (!a.model.empty()) {
    const FlowModel model = model_from_container(read_container(a.model, ContainerKind::Model));
    const auto z = cycle_conditions(a.conditions, a.count, model.condition_dim());
    IntegratorConfig icfg;
    icfg.kind = parse_integrator(a.integrator);
    icfg.steps = a.steps;
    const BatchIntegration res =
        integrate_batch(model, per_row_noise(Rng(a.seed), a.count, model.dim()), z ? &*z : nullptr, icfg);
    summary["mean_curvature"] =
        std::accumulate(res.curvature.begin(), res.curvature.end(), 0.0) / static_cast<double>(a.count);
    summary["curvature_definition"] = "mean_k |v(t_k, x_k) - (x_S - x_0)|^2";
  }
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

// ---- make-toy ----

struct ToyArgs {
  std::string kind = "eight-gaussians", out;
  std::size_t n = 4096;
  std::uint64_t seed = 0;
};

int cmd_make_toy(const ToyArgs& a, Context& ctx) {
  Dataset d;
  if (a.kind == "eight-gaussians") {
    Rng rng(a.seed);
    d.points = eight_gaussians(a.n, rng);
  } else if (a.kind == "two-atom") {
    d.points = DenseMatrix(2, 1, std::vector<double>{-1.0, 1.0});
    d.weights = {0.25, 0.75};
  } else if (a.kind == "gaussian-noise") {
    Rng rng(a.seed);
    d.points = sample_gaussian(rng, a.n, 2);
  } else {
    throw ConfigError("unknown toy '" + a.kind + "'");
  }
  write_container(a.out, dataset_container(d));
  ctx.out << json{{"command", "make-toy"}, {"kind", a.kind}, {"rows", d.points.rows()}}.dump() << "\n";
  return kExitOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int report(std::ostream& err, int code, const std::string& kind, const std::string& msg) {
  err << "error: code=" << code << " kind=" << kind << " message=" << json(one_line(msg)).dump() << "\n";
  return code;
}

}  // namespace

DenseMatrix eight_gaussians(std::size_t n, Rng& rng, double radius, double spread) {
  DenseMatrix x(n, 2);
  const double pi = std::acos(-1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.below(8);
    const double angle = 2.0 * pi * static_cast<double>(c) / 8.0;
    x(i, 0) = radius * std::cos(angle) + spread * rng.normal();
    x(i, 1) = radius * std::sin(angle) + spread * rng.normal();
  }
  return x;
}

double empirical_w2(const DenseMatrix& a, const DenseMatrix& b) {
  const std::size_t n = a.rows();
  if (n == 0 || b.rows() != n) throw ConfigError("empirical_w2: clouds must be non-empty and of equal size");
  if (a.cols() != b.cols()) throw ConfigError("empirical_w2: dimension mismatch");
  DenseMatrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c(i, j) = squared_distance(a.row(i), b.row(j));
  }
  const AssignmentResult r = hungarian(c);
  return std::sqrt(std::max(0.0, r.cost / static_cast<double>(n)));
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semidiscrete OT couplings for flow matching"};
  app.require_subcommand(1);
  Context ctx{out};

  SolveArgs solve;
  auto* s = app.add_subcommand("solve", "fit a semidiscrete potential");
  s->add_option("--data", solve.data, "target dataset container")->required();
  s->add_option("--eps", solve.eps, "entropic regularization (before rescaling)")->required()->check(
      CLI::NonNegativeNumber);
  s->add_option("--tau", solve.tau, "chi^2 stopping threshold");
  s->add_option("--out", solve.out, "potential container")->required();
  s->add_option("--metrics", solve.metrics, "metrics CSV (default <out>.metrics.csv)");
  s->add_option("--optimizer", solve.optimizer)->check(CLI::IsMember({"adagrad", "sgd-constant", "sgd-decay"}));
  s->add_option("--lr", solve.lr, "base step size");
  s->add_option("--iters", solve.iters, "iteration budget");
  s->add_option("--batch", solve.batch);
  s->add_option("--seed", solve.seed);
  s->add_option("--pca", solve.pca, "project x onto k principal components");
  s->add_option("--beta", solve.beta, "condition cost weight")->check(CLI::NonNegativeNumber);
  s->add_option("--cost", solve.cost)->check(CLI::IsMember({"negdot", "sqeuclid"}));
  s->add_option("--check-interval", solve.check_interval);
  s->add_option("--chi2-samples", solve.chi2_samples);
  s->add_flag("--no-eps-rescale", solve.no_rescale, "use eps as given");

  AssignArgs assign;
  auto* as = app.add_subcommand("assign", "pair noise with target atoms");
  as->add_option("--potential", assign.potential)->required();
  as->add_option("--data", assign.data)->required();
  as->add_option("--noise", assign.noise, "noise dataset container");
  as->add_option("--sample", assign.sample, "draw this many noise points");
  as->add_option("--seed", assign.seed);
  as->add_option("--out", assign.out)->required();
  as->add_flag("--resolve", assign.resolve, "also store the paired points");

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "train a flow-matching model");
  tr->add_option("--data", train.data)->required();
  tr->add_option("--coupling", train.coupling)->check(CLI::IsMember({"independent", "sd", "minibatch-ot"}));
  tr->add_option("--potential", train.potential);
  tr->add_option("--eps", train.eps, "minibatch OT eps")->check(CLI::NonNegativeNumber);
  tr->add_option("--method", train.method)->check(CLI::IsMember({"hungarian", "sinkhorn"}));
  tr->add_option("--cost", train.cost)->check(CLI::IsMember({"negdot", "sqeuclid"}));
  tr->add_option("--hidden", train.hidden, "comma-separated hidden widths");
  tr->add_option("--steps", train.steps);
  tr->add_option("--batch", train.batch);
  tr->add_option("--lr", train.lr);
  tr->add_option("--log-every", train.log_every);
  tr->add_option("--seed", train.seed);
  tr->add_option("--out", train.out)->required();
  tr->add_option("--metrics", train.metrics);

  SampleArgs sample;
  auto* sa = app.add_subcommand("sample", "integrate a model from noise");
  sa->add_option("--model", sample.model)->required();
  sa->add_option("--count", sample.count);
  sa->add_option("--steps", sample.steps);
  sa->add_option("--integrator", sample.integrator)->check(CLI::IsMember({"euler", "rk4"}));
  sa->add_option("--conditions", sample.conditions);
  sa->add_option("--seed", sample.seed);
  sa->add_option("--out", sample.out)->required();

  GuideArgs guide;
  auto* gu = app.add_subcommand("guide", "sample a geometric mixture of two models");
  gu->add_option("--model1", guide.model1)->required();
  gu->add_option("--model2", guide.model2)->required();
  gu->add_option("--gamma", guide.gamma)->check(CLI::NonNegativeNumber);
  gu->add_option("--replicas", guide.replicas);
  gu->add_option("--steps", guide.steps);
  gu->add_option("--t-clip", guide.t_clip);
  gu->add_option("--integrator", guide.integrator)->check(CLI::IsMember({"euler", "rk4"}));
  gu->add_option("--count", guide.count);
  gu->add_option("--conditions", guide.conditions);
  gu->add_option("--seed", guide.seed);
  gu->add_option("--out", guide.out)->required();

  ChisqArgs chisq;
  auto* cq = app.add_subcommand("chisq", "estimate chi^2(m(g) | b) of a stored potential");
  cq->add_option("--potential", chisq.potential)->required();
  cq->add_option("--data", chisq.data)->required();
  cq->add_option("--samples", chisq.samples);
  cq->add_option("--batch", chisq.batch);
  cq->add_option("--seed", chisq.seed);

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "W2 against a target cloud and trajectory curvature");
  ev->add_option("--samples", eval.samples);
  ev->add_option("--target", eval.target);
  ev->add_option("--model", eval.model);
  ev->add_option("--count", eval.count);
  ev->add_option("--steps", eval.steps);
  ev->add_option("--integrator", eval.integrator)->check(CLI::IsMember({"euler", "rk4"}));
  ev->add_option("--conditions", eval.conditions);
  ev->add_option("--seed", eval.seed);

  ToyArgs toy;
  auto* mt = app.add_subcommand("make-toy", "write a toy dataset");
  mt->add_option("--kind", toy.kind)->check(CLI::IsMember({"eight-gaussians", "two-atom", "gaussian-noise"}));
  mt->add_option("--n", toy.n);
  mt->add_option("--seed", toy.seed);
  mt->add_option("--out", toy.out)->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, kExitUsage, "usage", e.what());
  }

  try {
    if (*s) return cmd_solve(solve, ctx);
    if (*as) return cmd_assign(assign, ctx);
    if (*tr) return cmd_train(train, ctx);
    if (*sa) return cmd_sample(sample, ctx);
    if (*gu) return cmd_guide(guide, ctx);
    if (*cq) return cmd_chisq(chisq, ctx);
    if (*ev) return cmd_eval(eval, ctx);
    if (*mt) return cmd_make_toy(toy, ctx);
  } catch (const ConvergenceError& e) {
    return report(err, kExitBudget, "convergence", e.what());
  } catch (const NumericError& e) {
    return report(err, kExitNumeric, "numeric", e.what());
  } catch (const FormatError& e) {
    return report(err, kExitUsage, "format", e.what());
  } catch (const Error& e) {
    return report(err, kExitUsage, "config", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report(err, kExitUsage, "io", e.what());
  } catch (const std::exception& e) {
    return report(err, kExitNumeric, "internal", e.what());
  }
  return report(err, kExitUsage, "usage", "no subcommand");
}

}  // namespace sdfm
