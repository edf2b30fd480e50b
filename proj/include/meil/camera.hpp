#pragma once

#include <utility>

#include "meil/common.hpp"

namespace meil {

/// Pinhole intrinsics in pixels. The camera looks down +z in its own frame.
struct Intrinsics {
  double focal = 1.0;
  int width = 1;
  int height = 1;
  double cx = 0.5;
  double cy = 0.5;

  static Intrinsics centered(int w, int h, double f) { return {f, w, h, 0.5 * w, 0.5 * h}; }

  double half_diagonal() const { return 0.5 * std::sqrt(double(width) * width + double(height) * height); }

  void validate() const {
    if (!(focal > 0.0) || !std::isfinite(focal)) throw DomainError("Intrinsics: focal length must be positive");
    if (width < 1 || height < 1) throw DomainError("Intrinsics: image must be at least 1x1");
    if (!(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) throw DomainError("Intrinsics: principal point outside image");
  }
};

/// Camera-to-world rigid transform.
struct Pose {
  Vec3 origin = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();

  void validate(double tol = 1e-6) const {
    if (!origin.allFinite() || !rotation.allFinite()) throw DomainError("Pose: non-finite entries");
    if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > tol)
      throw DomainError("Pose: rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > tol) throw DomainError("Pose: rotation is not proper (det != +1)");
  }

  /// Camera at `eye` with +z toward `target`; `up` fixes roll (image rows grow along -up).
  static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitY()) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 down = -(up - up.dot(forward) * forward);
    if (down.norm() < 1e-12) throw DomainError("Pose::look_at: up vector parallel to view direction");
    down.normalize();
    Pose p;
    p.origin = eye;
    p.rotation.col(0) = down.cross(forward);
    p.rotation.col(1) = down;
    p.rotation.col(2) = forward;
    return p;
  }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
};

inline Ray pixel_ray(const Intrinsics& intr, const Pose& pose, int u, int v) {
  if (u < 0 || u >= intr.width || v < 0 || v >= intr.height) throw DomainError("pixel_ray: pixel outside image");
  const Vec3 cam((u + 0.5 - intr.cx) / intr.focal, (v + 0.5 - intr.cy) / intr.focal, 1.0);
  return {pose.origin, (pose.rotation * cam).normalized()};
}

/// Ray through the principal point.
inline Ray principal_ray(const Intrinsics&, const Pose& pose) {
  return {pose.origin, pose.rotation.col(2).normalized()};
}

/// Two unit vectors completing `axis` to an orthonormal frame. Seeds are the
/// world x then y axes, switching to y then z when axis is close to x. The
/// second vector is the Gram-Schmidt result for the second seed, computed as
/// a cross product so it stays exact when that seed is nearly parallel to axis.
inline std::pair<Vec3, Vec3> gram_schmidt_basis(const Vec3& axis) {
  if (std::abs(axis.norm() - 1.0) > 1e-6) throw DomainError("gram_schmidt_basis: axis must be unit length");
  const bool near_x = std::abs(axis.x()) > 0.9;
  const Vec3 s1 = near_x ? Vec3::UnitY() : Vec3::UnitX();
  const Vec3 s2 = near_x ? Vec3::UnitZ() : Vec3::UnitY();
  Vec3 p1 = s1 - s1.dot(axis) * axis;
  p1.normalize();
  Vec3 p2 = axis.cross(p1).normalized();
  if (p2.dot(s2) < 0.0) p2 = -p2;
  return {p1, p2};
}

/// Ray with the same origin as `principal`, tilted by radius `s` (pixels) at angle `theta`.
inline Ray sample_nonprincipal(const Ray& principal, const Intrinsics& intr, double s, double theta) {
  if (!(s >= 0.0 && s <= intr.half_diagonal())) throw DomainError("sample_nonprincipal: radius outside [0, half diagonal]");
  if (!(theta >= 0.0 && theta < 2.0 * kPi)) throw DomainError("sample_nonprincipal: angle outside [0, 2pi)");
  if (s == 0.0) return principal;
  const auto [p1, p2] = gram_schmidt_basis(principal.direction);
  const Vec3 d = intr.focal * principal.direction + s * std::cos(theta) * p1 + s * std::sin(theta) * p2;
  return {principal.origin, d.normalized()};
}

inline double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace meil
