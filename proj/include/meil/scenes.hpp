#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "meil/camera.hpp"
#include "meil/render.hpp"

namespace meil {

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  double density = 1.0;
  Vec3 color = Vec3::Ones();
};

struct Aabb {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);
  bool contains(const Vec3& p) const { return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all(); }
  double diagonal() const { return (hi - lo).norm(); }
};

/// Union of constant-density colored spheres. Overlaps add densities and mix
/// colors density-weighted.
struct SceneDef {
  std::vector<Sphere> spheres;
  Aabb bounds;

  void validate() const {
    for (std::size_t i = 0; i < spheres.size(); ++i) {
      const Sphere& s = spheres[i];
      const std::string tag = "scene sphere " + std::to_string(i);
      if (!(s.radius > 0.0) || !std::isfinite(s.radius)) throw DomainError(tag + ": radius must be positive");
      if (!(s.density >= 0.0) || !std::isfinite(s.density)) throw DomainError(tag + ": density must be finite and >= 0");
      if ((s.color.array() < 0.0).any() || (s.color.array() > 1.0).any()) throw DomainError(tag + ": color outside [0,1]");
      if (!bounds.contains(s.center - Vec3::Constant(s.radius)) || !bounds.contains(s.center + Vec3::Constant(s.radius)))
        throw DomainError(tag + ": not inside scene bounds");
    }
  }

  /// Density and color at a point (the ground-truth field).
  NetworkOutput query(const Vec3& p) const {
    NetworkOutput o;
    Vec3 acc = Vec3::Zero();
    for (const Sphere& s : spheres) {
      if ((p - s.center).squaredNorm() <= s.radius * s.radius) {
        o.sigma += s.density;
        acc += s.density * s.color;
      }
    }
    if (o.sigma > 0.0) o.color = acc / o.sigma;
    return o;
  }
};

/// Parametric interval [t0, t1] where the ray is inside the sphere, if any.
inline bool ray_sphere_interval(const Ray& ray, const Sphere& s, double& t0, double& t1) {
  const Vec3 oc = ray.origin - s.center;
  const double b = ray.direction.dot(oc);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc <= 0.0) return false;
  const double root = std::sqrt(disc);
  t0 = -b - root;
  t1 = -b + root;
  return true;
}

/// Exact emission-absorption integral over [t_min, t_max] through piecewise
/// constant density: each segment contributes T * (1 - exp(-sigma * len)) * color.
inline Vec3 analytic_render_ray(const SceneDef& scene, const Ray& ray, double t_min = 0.0,
                                double t_max = std::numeric_limits<double>::infinity()) {
  std::vector<double> cuts;
  for (const Sphere& s : scene.spheres) {
    double t0, t1;
    if (!ray_sphere_interval(ray, s, t0, t1)) continue;
    t0 = std::max(t0, t_min);
    t1 = std::min(t1, t_max);
    if (t1 <= t0) continue;
    cuts.push_back(t0);
    cuts.push_back(t1);
  }
  if (cuts.empty()) return Vec3::Zero();
  std::sort(cuts.begin(), cuts.end());
  Vec3 out = Vec3::Zero();
  double trans = 1.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double len = cuts[i + 1] - cuts[i];
    if (len <= 0.0) continue;
    const NetworkOutput f = scene.query(ray.origin + 0.5 * (cuts[i] + cuts[i + 1]) * ray.direction);
    if (f.sigma <= 0.0) continue;
    const double survive = std::exp(-f.sigma * len);
    out += trans * (1.0 - survive) * f.color;
    trans *= survive;
  }
  return out;
}

inline ImageBuffer analytic_render(const SceneDef& scene, const Intrinsics& intr, const Pose& pose, double t_min = 0.0,
                                   double t_max = std::numeric_limits<double>::infinity()) {
  ImageBuffer img(intr.width, intr.height);
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) img.set_pixel(v, u, analytic_render_ray(scene, pixel_ray(intr, pose, u, v), t_min, t_max));
  return img;
}

// ---------------------------------------------------------------------------
// Trajectories and task construction
// ---------------------------------------------------------------------------

enum class TrajectoryKind { OrbitArc, LineSweep };
enum class Facing { Inward, Outward };

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::OrbitArc;
  int tasks = 3;
  int views = 5;
  // orbit_arc: camera on a horizontal arc of `radius` around `target`, sweeping
  // `arc_degrees` from `start_degrees`; facing the target or away from it.
  double arc_degrees = 90.0;
  double start_degrees = 0.0;
  double radius = 0.2;
  double height = 0.0;
  Facing facing = Facing::Outward;
  Vec3 target = Vec3::Zero();
  // line_sweep: camera slides from `start` to `end`, looking at `target`.
  Vec3 start = Vec3(-0.5, 0.0, -1.0);
  Vec3 end = Vec3(0.5, 0.0, -1.0);
};

struct View {
  ImageBuffer image;
  Pose pose;
};

struct Task {
  int index = 1;
  Intrinsics intr;
  std::vector<View> views;

  std::size_t pixel_count() const {
    return views.size() * static_cast<std::size_t>(intr.width) * static_cast<std::size_t>(intr.height);
  }

  void validate() const {
    if (views.size() < 2) throw DomainError("task " + std::to_string(index) + ": needs N > 1 views so geometry is observable");
    for (const View& v : views)
      if (v.image.width != intr.width || v.image.height != intr.height)
        throw DomainError("task " + std::to_string(index) + ": view size differs from the shared intrinsics");
  }
};

namespace detail {

inline Pose trajectory_pose_at(const TrajectorySpec& traj, double frac) {
  if (traj.kind == TrajectoryKind::OrbitArc) {
    if (!(std::abs(traj.arc_degrees) > 0.0)) throw DomainError("trajectory: orbit arc has zero extent");
    if (!(traj.radius > 0.0)) throw DomainError("trajectory: orbit radius must be positive");
    const double phi = (traj.start_degrees + traj.arc_degrees * frac) * kPi / 180.0;
    const Vec3 radial(std::sin(phi), 0.0, std::cos(phi));
    const Vec3 eye = traj.target + traj.radius * radial + traj.height * Vec3::UnitY();
    return traj.facing == Facing::Outward ? Pose::look_at(eye, eye + radial) : Pose::look_at(eye, traj.target);
  }
  if ((traj.end - traj.start).norm() <= 0.0) throw DomainError("trajectory: line sweep has zero extent");
  return Pose::look_at(traj.start + frac * (traj.end - traj.start), traj.target);
}

inline void check_counts(const TrajectorySpec& traj) {
  if (traj.tasks < 1) throw DomainError("trajectory: need at least one task");
  if (traj.views < 2) throw DomainError("trajectory: need N > 1 views per task so geometry is observable");
}

}  // namespace detail

/// T*N poses spread evenly over the whole trajectory, endpoints included.
inline std::vector<Pose> trajectory_poses(const TrajectorySpec& traj) {
  detail::check_counts(traj);
  const int n = traj.tasks * traj.views;
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) poses.push_back(detail::trajectory_pose_at(traj, static_cast<double>(i) / static_cast<double>(n - 1)));
  return poses;
}

/// T*N evaluation poses interleaved with the training poses: pose i sits halfway
/// between training poses i and i+1, and the last one a quarter step short of the
/// trajectory end, so none coincides with a training pose. Grouped into tasks the
/// same way as the training poses.
inline std::vector<Pose> heldout_poses(const TrajectorySpec& traj) {
  detail::check_counts(traj);
  const int n = traj.tasks * traj.views;
  const double step = 1.0 / static_cast<double>(n - 1);
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double frac = i + 1 < n ? (i + 0.5) * step : (i - 0.25) * step;
    poses.push_back(detail::trajectory_pose_at(traj, frac));
  }
  return poses;
}

/// Groups consecutive poses into T tasks of N rendered views each.
inline std::vector<Task> render_tasks(const SceneDef& scene, const std::vector<Pose>& poses, int tasks_count, int views, const Intrinsics& intr,
                                      double t_min, double t_max) {
  scene.validate();
  intr.validate();
  std::vector<Task> tasks;
  for (int t = 0; t < tasks_count; ++t) {
    Task task;
    task.index = t + 1;
    task.intr = intr;
    for (int v = 0; v < views; ++v) {
      const Pose& pose = poses[static_cast<std::size_t>(t * views + v)];
      task.views.push_back({analytic_render(scene, intr, pose, t_min, t_max), pose});
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// Renders T tasks of N consecutive views each; no pose is shared between tasks.
inline std::vector<Task> build_tasks(const SceneDef& scene, const TrajectorySpec& traj, const Intrinsics& intr, double t_min,
                                     double t_max) {
  return render_tasks(scene, trajectory_poses(traj), traj.tasks, traj.views, intr, t_min, t_max);
}

/// Evaluation-only views of the same scene at the held-out poses.
inline std::vector<Task> build_heldout_tasks(const SceneDef& scene, const TrajectorySpec& traj, const Intrinsics& intr, double t_min,
                                             double t_max) {
  return render_tasks(scene, heldout_poses(traj), traj.tasks, traj.views, intr, t_min, t_max);
}

// ---------------------------------------------------------------------------
// Reference benchmark: a camera turning in place inside a ring of colored
// spheres, so each stretch of the arc sees its own subset of the ring.
// ---------------------------------------------------------------------------

inline SceneDef reference_scene() {
  SceneDef s;
  s.bounds = {Vec3(-1.6, -0.8, -1.6), Vec3(1.6, 0.8, 1.6)};
  struct Spec {
    double deg, ring, y, r, sigma;
    Vec3 c;
  };
  const Spec specs[] = {
      {-22, 1.20, 0.18, 0.20, 30, {0.95, 0.20, 0.15}}, {-8, 1.05, -0.22, 0.16, 25, {0.95, 0.85, 0.10}},
      {8, 1.25, 0.05, 0.24, 30, {0.15, 0.75, 0.25}},   {22, 1.10, -0.25, 0.18, 20, {0.20, 0.35, 0.95}},
      {36, 1.20, 0.22, 0.20, 30, {0.90, 0.45, 0.85}},  {50, 1.05, -0.10, 0.22, 25, {0.10, 0.85, 0.85}},
      {64, 1.25, 0.20, 0.18, 30, {0.95, 0.60, 0.15}},  {78, 1.10, -0.20, 0.24, 20, {0.55, 0.25, 0.90}},
      {92, 1.20, 0.10, 0.20, 30, {0.85, 0.85, 0.85}},  {108, 1.05, -0.18, 0.18, 25, {0.40, 0.90, 0.30}},
  };
  for (const Spec& sp : specs) {
    const double a = sp.deg * kPi / 180.0;
    s.spheres.push_back({Vec3(sp.ring * std::sin(a), sp.y, sp.ring * std::cos(a)), sp.r, sp.sigma, sp.c});
  }
  return s;
}

inline TrajectorySpec reference_trajectory(int tasks = 3, int views = 5) {
  TrajectorySpec t;
  t.kind = TrajectoryKind::OrbitArc;
  t.tasks = tasks;
  t.views = views;
  t.arc_degrees = 90.0;
  t.radius = 0.2;
  t.facing = Facing::Outward;
  return t;
}

inline Intrinsics reference_intrinsics(int size = 64) { return Intrinsics::centered(size, size, size * 1.0); }

inline SampleSpec reference_samples(int samples = 24) { return {samples, 0.4, 2.0, true}; }

}  // namespace meil
