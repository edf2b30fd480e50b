#pragma once

#include <array>
#include <vector>

#include "meil/camera.hpp"
#include "meil/mlp.hpp"
#include "meil/optim.hpp"

namespace meil {

struct RgnConfig {
  std::array<int, 3> hidden = {16, 64, 32};
  int bands = 2;  // positional encoding of the scalar input
  int steps = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 7;

  std::size_t input_dim() const { return 1 + 2 * static_cast<std::size_t>(bands); }

  std::vector<LayerShape> layout() const {
    std::vector<LayerShape> shapes;
    std::size_t in = input_dim();
    for (int h : hidden) {
      shapes.push_back({static_cast<std::size_t>(h), in});
      in = static_cast<std::size_t>(h);
    }
    shapes.push_back({6, in});
    return shapes;
  }
};

/// Ray generator: maps x in [0, 1] to a principal ray (origin, direction).
/// Weights live in double precision; the layout never changes with the task count.
struct RgnState {
  RgnConfig config;
  ParamSet<double> net;
  int tasks = 0;  // tasks distilled into the generator so far
  int views_per_task = 0;
  double last_loss = 0.0;

  static RgnState fresh(const RgnConfig& cfg) {
    RgnState s;
    s.config = cfg;
    s.net = ParamSet<double>(cfg.layout());
    init_uniform(s.net, cfg.seed);
    return s;
  }

  std::size_t bytes() const { return net.bytes(); }
};

namespace detail {

inline MatrixX<double> rgn_inputs(const RgnConfig& cfg, std::span<const double> xs) {
  MatrixX<double> in(static_cast<Eigen::Index>(cfg.input_dim()), static_cast<Eigen::Index>(xs.size()));
  for (std::size_t j = 0; j < xs.size(); ++j) {
    double x = xs[j];
    encode_into<double>(&x, 1, cfg.bands, true, in.col(static_cast<Eigen::Index>(j)).data());
  }
  return in;
}

inline Ray rgn_decode(const Eigen::Ref<const Eigen::VectorXd>& out) {
  const Vec3 dir = out.segment<3>(3);
  const double n = dir.norm();
  if (!(n >= 1e-8)) throw NumericError("ray generator produced a degenerate direction");
  return {out.head<3>(), dir / n};
}

}  // namespace detail

inline std::vector<Ray> rgn_forward_batch(const RgnState& rgn, std::span<const double> xs) {
  for (double x : xs)
    if (!(x >= 0.0 && x <= 1.0)) throw DomainError("rgn_forward: input outside [0, 1]");
  ChainCache<double> cache;
  const MatrixX<double>& out = chain_forward(rgn.net, detail::rgn_inputs(rgn.config, xs), cache);
  std::vector<Ray> rays;
  rays.reserve(xs.size());
  for (Eigen::Index j = 0; j < out.cols(); ++j) rays.push_back(detail::rgn_decode(out.col(j)));
  return rays;
}

inline Ray rgn_forward(const RgnState& rgn, double x) {
  const double xs[1] = {x};
  return rgn_forward_batch(rgn, xs).front();
}

/// [0, 1/(TN-1), ..., 1]: one slot per principal ray, oldest first.
inline std::vector<double> equally_spaced_inputs(int tasks, int views) {
  if (tasks < 1 || views < 1 || tasks * views < 2) throw DomainError("equally_spaced_inputs: need at least two rays");
  const int n = tasks * views;
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i)] = static_cast<double>(i) / static_cast<double>(n - 1);
  xs.back() = 1.0;
  return xs;
}

/// Mean over rays of |(o, d) - f(x)|^2 plus its gradient; directions compared raw.
inline double rgn_loss(const RgnState& rgn, const MatrixX<double>& inputs, const MatrixX<double>& targets, ParamSet<double>* grad) {
  ChainCache<double> cache;
  const MatrixX<double>& out = chain_forward(rgn.net, inputs, cache);
  const MatrixX<double> diff = out - targets;
  const double n = static_cast<double>(targets.cols());
  if (grad) chain_backward(rgn.net, cache, MatrixX<double>((2.0 / n) * diff), *grad);
  return diff.squaredNorm() / n;
}

/// Distills the previous generator's past rays plus the current task's
/// principal rays into a new generator over the T*N grid.
inline RgnState rgn_update(const RgnState& prev, std::span<const Ray> current, int task, int views) {
  if (static_cast<int>(current.size()) != views) throw DomainError("rgn_update: expected one principal ray per view");
  if (task < 1) throw DomainError("rgn_update: task index starts at 1");
  if (task > 1 && (prev.tasks != task - 1 || prev.views_per_task != views))
    throw DomainError("rgn_update: generator has not seen exactly the previous tasks");

  std::vector<Ray> targets;
  if (task > 1) targets = rgn_forward_batch(prev, equally_spaced_inputs(task - 1, views));
  targets.insert(targets.end(), current.begin(), current.end());
  const std::vector<double> xs = equally_spaced_inputs(task, views);

  MatrixX<double> y(6, static_cast<Eigen::Index>(targets.size()));
  for (std::size_t j = 0; j < targets.size(); ++j) {
    y.col(static_cast<Eigen::Index>(j)).head<3>() = targets[j].origin;
    y.col(static_cast<Eigen::Index>(j)).tail<3>() = targets[j].direction;
  }
  const MatrixX<double> inputs = detail::rgn_inputs(prev.config, xs);

  RgnState next = task == 1 ? RgnState::fresh(prev.config) : prev;
  next.net = next.net.thawed();
  Adam<double> opt({prev.config.lr});
  ParamSet<double> grad = next.net.zeros_like();
  double loss = 0.0;
  for (int step = 0; step < prev.config.steps; ++step) {
    grad.set_zero();
    loss = rgn_loss(next, inputs, y, &grad);
    if (!std::isfinite(loss)) throw NumericError("ray generator loss diverged at step " + std::to_string(step));
    opt.step(next.net, grad);
  }
  next.last_loss = rgn_loss(next, inputs, y, nullptr);
  next.tasks = task;
  next.views_per_task = views;
  next.net.set_version(task);
  return next;
}

/// m independent past rays: x ~ U[0,1] through the generator, then a cone
/// sample around the generated principal ray.
inline std::vector<Ray> generate_past_rays(const RgnState& rgn, const Intrinsics& intr, std::size_t count, Rng& rng) {
  if (count == 0) throw DomainError("generate_past_rays: need at least one ray");
  std::vector<double> xs(count), radius(count), theta(count);
  for (std::size_t i = 0; i < count; ++i) {
    xs[i] = rng.uniform();
    radius[i] = rng.uniform(0.0, intr.half_diagonal());
    theta[i] = rng.uniform(0.0, 2.0 * kPi);
  }
  std::vector<Ray> principals = rgn_forward_batch(rgn, xs);
  for (std::size_t i = 0; i < count; ++i) principals[i] = sample_nonprincipal(principals[i], intr, radius[i], theta[i]);
  return principals;
}

}  // namespace meil
