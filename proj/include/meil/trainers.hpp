#pragma once

#include <chrono>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "meil/metrics.hpp"
#include "meil/optim.hpp"
#include "meil/rgn.hpp"
#include "meil/scenes.hpp"

namespace meil {

// ---------------------------------------------------------------------------
// Past-term weight schedules over the task progress r in [0, 1].
// ---------------------------------------------------------------------------

struct LambdaSchedule {
  enum class Kind { S1, S2, S3, S4, S5, Constant };
  Kind kind = Kind::S2;
  double value = 1.0;  // used by Constant

  static LambdaSchedule constant(double v) { return {Kind::Constant, v}; }
};

inline double lambda_p(const LambdaSchedule& s, double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw DomainError("lambda_p: progress outside [0, 1]");
  switch (s.kind) {
    case LambdaSchedule::Kind::S1:
      return std::cos(0.5 * kPi * (1.0 - r));
    case LambdaSchedule::Kind::S2:
      return 0.5 * (1.0 + std::cos(kPi * (1.0 + r)));
    case LambdaSchedule::Kind::S3:
      return 0.5 * (1.0 + std::cos(kPi * (1.0 + 3.0 * r)));
    case LambdaSchedule::Kind::S4:
      return std::pow(10.0, std::cos(kPi * (1.0 + 1.5 * r)));
    case LambdaSchedule::Kind::S5:
      return std::pow(10.0, std::cos(kPi * (1.0 + 3.5 * r)));
    case LambdaSchedule::Kind::Constant:
      return s.value;
  }
  return 0.0;
}

/// (1/m_c) sum |C_hat^c - C^c|^2 + (lambda_p/m_p) sum rho(C_hat^p - C^p).
/// The past term is skipped when its batch is empty.
inline double meil_loss(std::span<const Vec3> pred_c, std::span<const Vec3> gt_c, std::span<const Vec3> pred_p,
                        std::span<const Vec3> distilled_p, double lambda, double eps) {
  if (pred_c.empty() || pred_c.size() != gt_c.size() || pred_p.size() != distilled_p.size())
    throw DomainError("meil_loss: mismatched or empty batches");
  double current = 0.0;
  for (std::size_t i = 0; i < pred_c.size(); ++i) current += (pred_c[i] - gt_c[i]).squaredNorm();
  current /= static_cast<double>(pred_c.size());
  if (pred_p.empty()) return current;
  double past = 0.0;
  for (std::size_t i = 0; i < pred_p.size(); ++i) past += charbonnier(pred_p[i] - distilled_p[i], eps);
  return current + lambda * past / static_cast<double>(pred_p.size());
}

// ---------------------------------------------------------------------------
// Configuration and per-method state
// ---------------------------------------------------------------------------

enum class Method { Meil, Incre, Joint, Ewc, PackNet, Replay };
enum class PastRaySource { Generator, GroundTruth, Random };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Meil: return "meil";
    case Method::Incre: return "incre";
    case Method::Joint: return "joint";
    case Method::Ewc: return "ewc";
    case Method::PackNet: return "packnet";
    case Method::Replay: return "replay";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::Meil, Method::Incre, Method::Joint, Method::Ewc, Method::PackNet, Method::Replay})
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct TrainConfig {
  NerfArchitecture arch;
  SampleSpec samples = reference_samples();
  RgnConfig rgn;
  int m_c = 128;
  int m_p = 64;
  int iterations_per_view = 500;
  AdamConfig adam{5e-4};
  double eps = 1e-3;  // Charbonnier
  LambdaSchedule schedule;
  LossKind past_loss = LossKind::Charbonnier;
  PastRaySource past_rays = PastRaySource::Generator;
  Aabb random_ray_bounds;  // origins of uniformly random past rays
  std::uint64_t seed = 0;
  unsigned threads = 1;

  // baselines
  double ewc_weight = -1.0;  // < 0: calibrate so the penalty is ~10% of the rendering loss
  int ewc_fisher_batches = 32;
  double packnet_prune_rate = 0.5;
  double packnet_retrain_fraction = 1.0 / 3.0;
  std::size_t replay_capacity = 0;  // exemplars stored per task

  void validate() const {
    if (m_c < 1) throw ConfigError("m_c must be >= 1");
    if (m_p < 0) throw ConfigError("m_p must be >= 0");
    if (!(eps > 0.0)) throw ConfigError("Charbonnier eps must be > 0");
    if (iterations_per_view < 1) throw ConfigError("iterations_per_view must be >= 1");
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(packnet_prune_rate > 0.0 && packnet_prune_rate < 1.0)) throw ConfigError("PackNet prune rate must be in (0, 1)");
    if (!(packnet_retrain_fraction >= 0.0 && packnet_retrain_fraction < 1.0)) throw ConfigError("PackNet retrain fraction must be in [0, 1)");
    if (ewc_fisher_batches < 1) throw ConfigError("EWC needs at least one Fisher batch");
    samples.validate();
  }
};

struct MeilAux {
  ParamSet<float> teacher;  // frozen copy of the previous task's network
  RgnState rgn;
  std::vector<Pose> past_poses;  // ground-truth ablation only; not part of the method's memory
};

struct EwcAux {
  std::vector<float> fisher;
  ParamSet<float> anchor;
  float weight = 0.0f;
};

struct PackNetAux {
  std::vector<std::uint8_t> owner;  // 0 = free, t = frozen by task t
};

struct ReplayRecord {
  float origin[3];
  float direction[3];
  float color[3];
};
static_assert(sizeof(ReplayRecord) == 36);

struct ReplayAux {
  std::vector<ReplayRecord> records;
  std::size_t capacity_per_task = 0;
};

struct MethodState {
  Method kind = Method::Incre;
  ParamSet<float> nerf;
  int tasks_trained = 0;
  std::variant<std::monostate, MeilAux, EwcAux, PackNetAux, ReplayAux> aux;

  template <class T>
  T& get() {
    return std::get<T>(aux);
  }
  template <class T>
  const T& get() const {
    return std::get<T>(aux);
  }
};

inline MethodState make_state(Method kind, const TrainConfig& cfg) {
  MethodState s;
  s.kind = kind;
  s.nerf = cfg.arch.make_params<float>(derive_seed(cfg.seed, 0, 100));
  switch (kind) {
    case Method::Meil: {
      MeilAux a;
      a.teacher = s.nerf.snapshot(0);
      RgnConfig rc = cfg.rgn;
      rc.seed = derive_seed(cfg.seed, 0, 101);
      a.rgn = RgnState::fresh(rc);
      s.aux = std::move(a);
      break;
    }
    case Method::Ewc: {
      EwcAux a;
      a.fisher.assign(s.nerf.scalar_count(), 0.0f);
      a.anchor = s.nerf;
      s.aux = std::move(a);
      break;
    }
    case Method::PackNet:
      s.aux = PackNetAux{std::vector<std::uint8_t>(s.nerf.scalar_count(), 0)};
      break;
    case Method::Replay:
      s.aux = ReplayAux{{}, cfg.replay_capacity};
      break;
    default:
      break;
  }
  return s;
}

/// Auxiliary memory a method carries between tasks.
inline std::size_t aux_bytes(const MethodState& s) {
  switch (s.kind) {
    case Method::Meil: {
      const auto& a = s.get<MeilAux>();
      return a.teacher.bytes() + a.rgn.bytes();
    }
    case Method::Ewc: {
      const auto& a = s.get<EwcAux>();
      return a.fisher.size() * sizeof(float) + a.anchor.bytes() + sizeof(a.weight);
    }
    case Method::PackNet:
      return s.get<PackNetAux>().owner.size() * sizeof(std::uint8_t);
    case Method::Replay:
      return s.get<ReplayAux>().records.size() * sizeof(ReplayRecord);
    case Method::Incre:
    case Method::Joint:
      return 0;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct RayBatch {
  std::vector<Ray> rays;
  std::vector<Vec3> colors;
};

/// Uniform pixels over every view of `tasks` (i.i.d., or a without-replacement
/// draw when `without_replacement` is set).
inline RayBatch sample_current_batch(std::span<const Task> tasks, std::size_t count, Rng& rng, bool without_replacement = false) {
  if (tasks.empty()) throw DomainError("sample_current_batch: no task data");
  std::vector<std::size_t> prefix;
  std::size_t total = 0;
  for (const Task& t : tasks) {
    if (t.views.empty()) throw DomainError("sample_current_batch: task without views");
    prefix.push_back(total);
    total += t.pixel_count();
  }
  std::vector<std::size_t> picks(count);
  if (without_replacement) {
    if (count > total) throw DomainError("sample_current_batch: batch larger than the pixel pool");
    std::vector<std::size_t> pool(total);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.index(total - i));
      std::swap(pool[i], pool[j]);
      picks[i] = pool[i];
    }
  } else {
    for (auto& p : picks) p = static_cast<std::size_t>(rng.index(total));
  }
  RayBatch b;
  b.rays.reserve(count);
  b.colors.reserve(count);
  for (std::size_t idx : picks) {
    const auto it = std::upper_bound(prefix.begin(), prefix.end(), idx) - 1;
    const Task& t = tasks[static_cast<std::size_t>(it - prefix.begin())];
    std::size_t local = idx - *it;
    const std::size_t per_view = static_cast<std::size_t>(t.intr.width) * static_cast<std::size_t>(t.intr.height);
    const View& view = t.views[local / per_view];
    local %= per_view;
    const int v = static_cast<int>(local / static_cast<std::size_t>(t.intr.width));
    const int u = static_cast<int>(local % static_cast<std::size_t>(t.intr.width));
    b.rays.push_back(pixel_ray(t.intr, view.pose, u, v));
    b.colors.push_back(view.image.pixel(v, u));
  }
  return b;
}

/// Origins uniform in `bounds`, directions uniform on the sphere.
inline std::vector<Ray> random_rays(const Aabb& bounds, std::size_t count, Rng& rng) {
  std::vector<Ray> rays(count);
  for (Ray& r : rays) {
    for (int k = 0; k < 3; ++k) r.origin(k) = rng.uniform(bounds.lo(k), bounds.hi(k));
    const double z = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * kPi);
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    r.direction = Vec3(rho * std::cos(phi), rho * std::sin(phi), z).normalized();
  }
  return rays;
}

/// Uniform pixel rays of previously seen camera poses (ground-truth past rays).
inline std::vector<Ray> past_pixel_rays(std::span<const Pose> poses, const Intrinsics& intr, std::size_t count, Rng& rng) {
  if (poses.empty()) throw DomainError("past_pixel_rays: no past poses");
  std::vector<Ray> rays(count);
  for (Ray& r : rays) {
    const Pose& p = poses[static_cast<std::size_t>(rng.index(poses.size()))];
    const int u = static_cast<int>(rng.index(static_cast<std::uint64_t>(intr.width)));
    const int v = static_cast<int>(rng.index(static_cast<std::uint64_t>(intr.height)));
    r = pixel_ray(intr, p, u, v);
  }
  return rays;
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys);
/// inclusion order follows decreasing key.
inline std::vector<std::size_t> weighted_sample_without_replacement(std::span<const double> weights, std::size_t k, Rng& rng) {
  k = std::min(k, weights.size());
  using Keyed = std::pair<double, std::size_t>;
  std::priority_queue<Keyed, std::vector<Keyed>, std::greater<>> heap;  // min-heap of the k largest keys
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double w = std::max(weights[i], 1e-12);
    double u = rng.uniform();
    if (u <= 0.0) u = 0x1.0p-53;
    const double key = std::log(u) / w;
    if (heap.size() < k)
      heap.emplace(key, i);
    else if (k > 0 && key > heap.top().first) {
      heap.pop();
      heap.emplace(key, i);
    }
  }
  std::vector<std::size_t> out;
  out.reserve(heap.size());
  while (!heap.empty()) {
    out.push_back(heap.top().second);
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Independent random streams per task, so that optional terms never perturb
// the draws of the terms every method shares.
enum Stream : std::uint64_t {
  kStreamCurrent = 1,
  kStreamCurrentDepths = 2,
  kStreamPastRays = 3,
  kStreamPastDepths = 4,
  kStreamTeacherDepths = 5,
  kStreamFisher = 6,
  kStreamReplaySelect = 7,
  kStreamReplaySample = 8,
  kStreamEval = 9,
  kStreamFisherDepths = 10,
};

inline Rng task_rng(const TrainConfig& cfg, int task, Stream s) { return Rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(task), s)); }

struct TaskReport {
  double final_loss = 0.0;
  double rgn_loss = 0.0;
  double ewc_weight = 0.0;
  std::size_t packnet_free = 0;
};

struct IterationInfo {
  int task = 0;
  int iteration = 0;
  int total = 0;
  double loss = 0.0;
};
using ProgressFn = std::function<void(const IterationInfo&)>;

namespace detail {

inline void check_finite(double loss, int task, int it) {
  if (!std::isfinite(loss))
    throw NumericError("training diverged: task " + std::to_string(task) + ", iteration " + std::to_string(it) + ", loss " +
                       std::to_string(loss));
}

inline std::vector<Ray> principal_rays(const Task& task) {
  std::vector<Ray> out;
  for (const View& v : task.views) out.push_back(principal_ray(task.intr, v.pose));
  return out;
}

inline double ewc_penalty(const EwcAux& a, const ParamSet<float>& params, ParamSet<float>* grad, double weight) {
  const auto p = params.values();
  const auto anchor = a.anchor.values();
  double pen = 0.0;
  std::span<float> g;
  if (grad) g = grad->mutable_values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(anchor[i]);
    pen += static_cast<double>(a.fisher[i]) * d * d;
    if (grad) g[i] += static_cast<float>(2.0 * weight * static_cast<double>(a.fisher[i]) * d);
  }
  return weight * pen;
}

/// Parameters visible when evaluating task t under PackNet: owned by tasks <= t.
inline ParamSet<float> packnet_view(const ParamSet<float>& params, const PackNetAux& a, int t) {
  ParamSet<float> out = params.thawed();
  auto v = out.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (a.owner[i] == 0 || a.owner[i] > t) v[i] = 0.0f;
  return out;
}

}  // namespace detail

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), renderer_(cfg_.arch, cfg_.samples, cfg_.threads) { cfg_.validate(); }

  const TrainConfig& config() const { return cfg_; }
  const NerfRenderer<float>& renderer() const { return renderer_; }
  void set_progress(ProgressFn fn) { progress_ = std::move(fn); }

  /// Trains `state` on `current`. Joint additionally receives every task seen
  /// so far in `history` (including `current`); other methods ignore it.
  TaskReport train_task(MethodState& state, const Task& current, std::span<const Task> history = {}) const {
    current.validate();
    const int task = state.tasks_trained + 1;
    if (current.index != task) throw DomainError("train_task: expected task " + std::to_string(task) + ", got " + std::to_string(current.index));
    TaskReport report;
    switch (state.kind) {
      case Method::Incre:
        report = train_plain(state, std::span<const Task>(&current, 1), task);
        break;
      case Method::Joint:
        if (history.empty() || history.back().index != current.index) throw DomainError("joint training needs the full task history");
        report = train_plain(state, history, task);
        break;
      case Method::Meil:
        report = train_meil(state, current, task);
        break;
      case Method::Ewc:
        report = train_ewc(state, current, task);
        break;
      case Method::PackNet:
        report = train_packnet(state, current, task);
        break;
      case Method::Replay:
        report = train_replay(state, current, task);
        break;
    }
    state.tasks_trained = task;
    return report;
  }

  /// Renders every view of `task` with the parameters the method uses for it.
  std::vector<ImageBuffer> render_task(const MethodState& state, const Task& task) const {
    SampleSpec eval_spec = cfg_.samples;
    eval_spec.stratified = false;
    NerfRenderer<float> r(cfg_.arch, eval_spec, cfg_.threads);
    std::optional<ParamSet<float>> masked;
    if (state.kind == Method::PackNet) masked = detail::packnet_view(state.nerf, state.get<PackNetAux>(), task.index);
    const ParamSet<float>& params = masked ? *masked : state.nerf;
    std::vector<ImageBuffer> out;
    Rng rng(0);  // unused with midpoint samples
    for (const View& v : task.views) out.push_back(render_image(r, params, task.intr, v.pose, rng));
    return out;
  }

 private:
  int total_iterations(const Task& t) const { return cfg_.iterations_per_view * static_cast<int>(t.views.size()); }

  void notify(int task, int it, int total, double loss) const {
    if (progress_) progress_({task, it, total, loss});
  }

  double current_term(const ParamSet<float>& params, std::span<const Task> data, Rng& batch_rng, Rng& depth_rng,
                      ParamSet<float>& grad) const {
    const RayBatch b = sample_current_batch(data, static_cast<std::size_t>(cfg_.m_c), batch_rng);
    return renderer_.accumulate(params, b.rays, b.colors, {LossKind::L2, 1.0, cfg_.eps}, depth_rng, grad);
  }

  TaskReport train_plain(MethodState& s, std::span<const Task> data, int task) const {
    Adam<float> opt(cfg_.adam);
    Rng batch = task_rng(cfg_, task, kStreamCurrent), depths = task_rng(cfg_, task, kStreamCurrentDepths);
    ParamSet<float> grad = s.nerf.zeros_like();
    const int total = total_iterations(data.back());
    double loss = 0.0;
    for (int it = 0; it < total; ++it) {
      grad.set_zero();
      loss = current_term(s.nerf, data, batch, depths, grad);
      detail::check_finite(loss, task, it);
      opt.step(s.nerf, grad);
      notify(task, it, total, loss);
    }
    return {loss};
  }

  TaskReport train_meil(MethodState& s, const Task& current, int task) const {
    auto& aux = s.get<MeilAux>();
    aux.teacher = s.nerf.snapshot(task - 1);
    const std::uint64_t teacher_sum = aux.teacher.checksum();
    const bool has_past = task > 1 && cfg_.m_p > 0;

    Adam<float> opt(cfg_.adam);
    Rng batch = task_rng(cfg_, task, kStreamCurrent), depths = task_rng(cfg_, task, kStreamCurrentDepths);
    Rng past_rng = task_rng(cfg_, task, kStreamPastRays), past_depths = task_rng(cfg_, task, kStreamPastDepths);
    Rng teacher_depths = task_rng(cfg_, task, kStreamTeacherDepths);
    ParamSet<float> grad = s.nerf.zeros_like();
    const int total = total_iterations(current);
    double loss = 0.0;
    for (int it = 0; it < total; ++it) {
      grad.set_zero();
      loss = current_term(s.nerf, std::span<const Task>(&current, 1), batch, depths, grad);
      if (has_past) {
        const double progress = total > 1 ? static_cast<double>(it) / static_cast<double>(total - 1) : 1.0;
        const double lambda = lambda_p(cfg_.schedule, progress);
        if (lambda != 0.0) {
          const std::vector<Ray> past = past_rays(aux, current.intr, past_rng);
          // pseudo ground truth comes only from the frozen snapshot of the previous task
          if (!(aux.teacher.frozen() && aux.teacher.version() < task)) throw std::logic_error("distillation target is not a past snapshot");
          const std::vector<Vec3> targets = renderer_.render(aux.teacher, past, teacher_depths);
          loss += renderer_.accumulate(s.nerf, past, targets, {cfg_.past_loss, lambda, cfg_.eps}, past_depths, grad);
        }
      }
      detail::check_finite(loss, task, it);
      opt.step(s.nerf, grad);
      notify(task, it, total, loss);
    }
    if (aux.teacher.checksum() != teacher_sum) throw std::logic_error("frozen snapshot changed during training");

    const std::vector<Ray> principals = detail::principal_rays(current);
    aux.rgn = rgn_update(aux.rgn, principals, task, static_cast<int>(current.views.size()));
    for (const View& v : current.views) aux.past_poses.push_back(v.pose);
    return {loss, aux.rgn.last_loss};
  }

  std::vector<Ray> past_rays(const MeilAux& aux, const Intrinsics& intr, Rng& rng) const {
    const auto m = static_cast<std::size_t>(cfg_.m_p);
    switch (cfg_.past_rays) {
      case PastRaySource::Generator:
        return generate_past_rays(aux.rgn, intr, m, rng);
      case PastRaySource::GroundTruth:
        return past_pixel_rays(aux.past_poses, intr, m, rng);
      case PastRaySource::Random:
        return random_rays(cfg_.random_ray_bounds, m, rng);
    }
    return {};
  }

  TaskReport train_ewc(MethodState& s, const Task& current, int task) const {
    auto& aux = s.get<EwcAux>();
    Adam<float> opt(cfg_.adam);
    Rng batch = task_rng(cfg_, task, kStreamCurrent), depths = task_rng(cfg_, task, kStreamCurrentDepths);
    ParamSet<float> grad = s.nerf.zeros_like();
    const int total = total_iterations(current);
    const bool regularize = task > 1 && cfg_.ewc_weight != 0.0;
    const int warmup = std::max(1, total / 20);
    double weight = cfg_.ewc_weight > 0.0 ? cfg_.ewc_weight : 0.0;
    double loss = 0.0;
    for (int it = 0; it < total; ++it) {
      grad.set_zero();
      loss = current_term(s.nerf, std::span<const Task>(&current, 1), batch, depths, grad);
      if (regularize) {
        if (cfg_.ewc_weight < 0.0 && it == warmup) {
          const double raw = detail::ewc_penalty(aux, s.nerf, nullptr, 1.0);
          if (raw > 0.0) weight = 0.1 * loss / raw;
        }
        if (weight > 0.0) loss += detail::ewc_penalty(aux, s.nerf, &grad, weight);
      }
      detail::check_finite(loss, task, it);
      opt.step(s.nerf, grad);
      notify(task, it, total, loss);
    }
    // Fisher diagonal: mean squared gradient of the rendering loss; accumulated over tasks.
    Rng fb = task_rng(cfg_, task, kStreamFisher), fd = task_rng(cfg_, task, kStreamFisherDepths);
    std::vector<double> fisher(aux.fisher.size(), 0.0);
    for (int b = 0; b < cfg_.ewc_fisher_batches; ++b) {
      ParamSet<float> g = s.nerf.zeros_like();
      current_term(s.nerf, std::span<const Task>(&current, 1), fb, fd, g);
      const auto gv = g.values();
      for (std::size_t i = 0; i < fisher.size(); ++i) fisher[i] += static_cast<double>(gv[i]) * gv[i] / cfg_.ewc_fisher_batches;
    }
    for (std::size_t i = 0; i < fisher.size(); ++i) aux.fisher[i] += static_cast<float>(fisher[i]);
    aux.anchor = s.nerf;
    aux.weight = static_cast<float>(weight);
    return {loss, 0.0, weight};
  }

  TaskReport train_packnet(MethodState& s, const Task& current, int task) const {
    auto& aux = s.get<PackNetAux>();
    if (task > 255) throw DomainError("PackNet: at most 255 tasks");
    // trainable = free weights (+ every bias on the first task)
    std::vector<unsigned char> mask(aux.owner.size(), 0);
    std::vector<unsigned char> is_bias(aux.owner.size(), 0);
    for (std::size_t l = 0; l < s.nerf.layer_count(); ++l) {
      const LayerShape& sh = s.nerf.shape(l);
      const std::size_t b0 = s.nerf.offset(l) + sh.out * sh.in;
      for (std::size_t i = b0; i < b0 + sh.out; ++i) is_bias[i] = 1;
    }
    std::size_t free_weights = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = aux.owner[i] == 0 ? 1 : 0;
      if (mask[i] && !is_bias[i]) ++free_weights;
    }
    if (free_weights == 0) throw DomainError("PackNet: network capacity exhausted (no free parameters left)");

    Adam<float> opt(cfg_.adam);
    Rng batch = task_rng(cfg_, task, kStreamCurrent), depths = task_rng(cfg_, task, kStreamCurrentDepths);
    ParamSet<float> grad = s.nerf.zeros_like();
    const int total = total_iterations(current);
    const int retrain = static_cast<int>(std::lround(total * cfg_.packnet_retrain_fraction));
    const int train = total - retrain;
    double loss = 0.0;
    auto run = [&](int begin, int end) {
      for (int it = begin; it < end; ++it) {
        grad.set_zero();
        loss = current_term(s.nerf, std::span<const Task>(&current, 1), batch, depths, grad);
        detail::check_finite(loss, task, it);
        opt.step(s.nerf, grad, &mask);
        notify(task, it, total, loss);
      }
    };
    run(0, train);

    // Per-layer magnitude pruning of this task's free weights: the smallest
    // `rate` fraction returns to the pool (zeroed), the rest is kept.
    auto values = s.nerf.mutable_values();
    for (std::size_t l = 0; l < s.nerf.layer_count(); ++l) {
      const LayerShape& sh = s.nerf.shape(l);
      std::vector<std::size_t> idx;
      for (std::size_t i = s.nerf.offset(l); i < s.nerf.offset(l) + sh.out * sh.in; ++i)
        if (aux.owner[i] == 0) idx.push_back(i);
      const auto prune = static_cast<std::size_t>(std::llround(cfg_.packnet_prune_rate * static_cast<double>(idx.size())));
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(values[a]) < std::abs(values[b]); });
      for (std::size_t k = 0; k < idx.size(); ++k) {
        if (k < prune) {
          values[idx[k]] = 0.0f;
          mask[idx[k]] = 0;
        }
      }
    }
    opt.reset();
    run(train, total);

    std::size_t free_after = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) aux.owner[i] = static_cast<std::uint8_t>(task);
      if (aux.owner[i] == 0 && !is_bias[i]) ++free_after;
    }
    return {loss, 0.0, 0.0, free_after};
  }

  TaskReport train_replay(MethodState& s, const Task& current, int task) const {
    auto& aux = s.get<ReplayAux>();
    Adam<float> opt(cfg_.adam);
    Rng batch = task_rng(cfg_, task, kStreamCurrent), depths = task_rng(cfg_, task, kStreamCurrentDepths);
    Rng replay_rng = task_rng(cfg_, task, kStreamReplaySample), replay_depths = task_rng(cfg_, task, kStreamPastDepths);
    ParamSet<float> grad = s.nerf.zeros_like();
    const int total = total_iterations(current);
    const bool rehearse = !aux.records.empty() && cfg_.m_p > 0;
    std::vector<Ray> rays(static_cast<std::size_t>(cfg_.m_p));
    std::vector<Vec3> colors(rays.size());
    double loss = 0.0;
    for (int it = 0; it < total; ++it) {
      grad.set_zero();
      loss = current_term(s.nerf, std::span<const Task>(&current, 1), batch, depths, grad);
      if (rehearse) {
        for (std::size_t i = 0; i < rays.size(); ++i) {
          const ReplayRecord& r = aux.records[static_cast<std::size_t>(replay_rng.index(aux.records.size()))];
          rays[i] = {Vec3(r.origin[0], r.origin[1], r.origin[2]), Vec3(r.direction[0], r.direction[1], r.direction[2]).normalized()};
          colors[i] = Vec3(r.color[0], r.color[1], r.color[2]);
        }
        loss += renderer_.accumulate(s.nerf, rays, colors, {LossKind::L2, 1.0, cfg_.eps}, replay_depths, grad);
      }
      detail::check_finite(loss, task, it);
      opt.step(s.nerf, grad);
      notify(task, it, total, loss);
    }

    if (aux.capacity_per_task == 0) {
      std::clog << "replay: capacity 0, nothing stored (equivalent to incremental training)\n";
      return {loss};
    }
    // Candidate pool: every pixel of the task, weighted by its current loss.
    std::vector<Ray> pool_rays;
    std::vector<Vec3> pool_colors;
    for (const View& v : current.views) {
      const std::vector<Ray> rs = image_rays(current.intr, v.pose);
      pool_rays.insert(pool_rays.end(), rs.begin(), rs.end());
      for (int y = 0; y < current.intr.height; ++y)
        for (int x = 0; x < current.intr.width; ++x) pool_colors.push_back(v.image.pixel(y, x));
    }
    Rng eval_depths = task_rng(cfg_, task, kStreamEval);
    const std::vector<Vec3> pred = renderer_.render(s.nerf, pool_rays, eval_depths);
    std::vector<double> losses(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) losses[i] = (pred[i] - pool_colors[i]).squaredNorm();
    Rng select = task_rng(cfg_, task, kStreamReplaySelect);
    for (std::size_t i : weighted_sample_without_replacement(losses, aux.capacity_per_task, select)) {
      ReplayRecord r{};
      for (int k = 0; k < 3; ++k) {
        r.origin[k] = static_cast<float>(pool_rays[i].origin(k));
        r.direction[k] = static_cast<float>(pool_rays[i].direction(k));
        r.color[k] = static_cast<float>(pool_colors[i](k));
      }
      aux.records.push_back(r);
    }
    return {loss};
  }

  TrainConfig cfg_;
  NerfRenderer<float> renderer_;
  ProgressFn progress_;
};

// ---------------------------------------------------------------------------
// Sequences and evaluation
// ---------------------------------------------------------------------------

struct MetricsEntry {
  std::string method;
  int trained = 0;  // T
  int evaluated = 0;  // t <= T
  double psnr_db = 0.0;
  double msssim = 0.0;
  std::size_t aux_bytes = 0;
  double wall_s = 0.0;
};

struct MetricsLog {
  std::vector<MetricsEntry> entries;

  const MetricsEntry& at(int trained, int evaluated) const {
    for (const auto& e : entries)
      if (e.trained == trained && e.evaluated == evaluated) return e;
    throw DomainError("MetricsLog: no entry for T=" + std::to_string(trained) + ", t=" + std::to_string(evaluated));
  }

  /// Mean PSNR over every task after training task `trained`.
  double average_psnr(int trained) const {
    double acc = 0.0;
    int n = 0;
    for (const auto& e : entries)
      if (e.trained == trained) {
        acc += e.psnr_db;
        ++n;
      }
    if (n == 0) throw DomainError("MetricsLog: nothing evaluated after task " + std::to_string(trained));
    return acc / n;
  }
};

struct TaskScore {
  double psnr_db = 0.0;
  double msssim = 0.0;
};

inline TaskScore evaluate_task(const Trainer& trainer, const MethodState& state, const Task& task) {
  const std::vector<ImageBuffer> renders = trainer.render_task(state, task);
  TaskScore s;
  for (std::size_t i = 0; i < renders.size(); ++i) {
    s.psnr_db += psnr(renders[i], task.views[i].image);
    s.msssim += ms_ssim(renders[i], task.views[i].image);
  }
  s.psnr_db /= static_cast<double>(renders.size());
  s.msssim /= static_cast<double>(renders.size());
  return s;
}

struct SequenceHooks {
  ProgressFn progress;
  /// Called after each task is trained and evaluated (checkpointing).
  std::function<void(const MethodState&, const MetricsLog&)> after_task;
};

/// Trains tasks in order, handing each method only the current task (Joint
/// also gets the history), and evaluates every seen task after each one.
/// `state` may already hold trained tasks (resume); training continues from there.
inline MetricsLog run_sequence(std::span<const Task> tasks, MethodState& state, const TrainConfig& cfg, const SequenceHooks& hooks = {},
                               MetricsLog log = {}, std::span<const Task> eval_tasks = {}) {
  if (tasks.empty()) throw DomainError("run_sequence: no tasks");
  if (!eval_tasks.empty() && eval_tasks.size() != tasks.size()) throw DomainError("run_sequence: evaluation split size mismatch");
  const std::span<const Task> evals = eval_tasks.empty() ? tasks : eval_tasks;
  Trainer trainer(cfg);
  if (hooks.progress) trainer.set_progress(hooks.progress);
  for (std::size_t t = static_cast<std::size_t>(state.tasks_trained); t < tasks.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    trainer.train_task(state, tasks[t], tasks.subspan(0, t + 1));
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (std::size_t e = 0; e <= t; ++e) {
      const TaskScore score = evaluate_task(trainer, state, evals[e]);
      log.entries.push_back({method_name(state.kind), static_cast<int>(t + 1), static_cast<int>(e + 1), score.psnr_db, score.msssim,
                             aux_bytes(state), wall});
    }
    if (hooks.after_task) hooks.after_task(state, log);
  }
  return log;
}

/// Replay capacity that matches the generator-based method's memory after `tasks` tasks.
inline std::size_t matched_replay_capacity(const TrainConfig& cfg, int tasks) {
  const MethodState meil = make_state(Method::Meil, cfg);
  return aux_bytes(meil) / (static_cast<std::size_t>(std::max(1, tasks)) * sizeof(ReplayRecord));
}

}  // namespace meil
