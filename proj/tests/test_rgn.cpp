#include <gtest/gtest.h>

#include "meil/rgn.hpp"
#include "meil/scenes.hpp"
#include "support.hpp"

using namespace meil;

namespace {

RgnConfig quick_config(int steps = 400) {
  RgnConfig c;
  c.steps = steps;
  c.seed = 3;
  return c;
}

std::vector<Ray> task_principals(const std::vector<Pose>& poses, int task, int views) {
  std::vector<Ray> out;
  for (int v = 0; v < views; ++v) out.push_back(principal_ray(reference_intrinsics(), poses[static_cast<std::size_t>(task * views + v)]));
  return out;
}

}  // namespace

TEST(Rgn, LayoutHasFixedHiddenWidths) {
  const RgnConfig c;
  const auto shapes = c.layout();
  ASSERT_EQ(shapes.size(), 4u);
  EXPECT_EQ(shapes[0], (LayerShape{16, c.input_dim()}));
  EXPECT_EQ(shapes[1], (LayerShape{64, 16}));
  EXPECT_EQ(shapes[2], (LayerShape{32, 64}));
  EXPECT_EQ(shapes[3], (LayerShape{6, 32}));
}

TEST(Rgn, EquallySpacedInputs) {
  const auto xs = equally_spaced_inputs(2, 3);
  ASSERT_EQ(xs.size(), 6u);
  EXPECT_EQ(xs.front(), 0.0);
  EXPECT_EQ(xs.back(), 1.0);
  for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_NEAR(xs[i] - xs[i - 1], 0.2, 1e-15);
  EXPECT_THROW(equally_spaced_inputs(1, 1), DomainError);
  EXPECT_THROW(equally_spaced_inputs(0, 5), DomainError);
}

TEST(Rgn, ForwardReturnsUnitDirectionsAndChecksRange) {
  const RgnState s = RgnState::fresh(quick_config());
  for (double x : {0.0, 0.3, 1.0}) EXPECT_NEAR(rgn_forward(s, x).direction.norm(), 1.0, 1e-12);
  EXPECT_THROW(rgn_forward(s, -0.01), DomainError);
  EXPECT_THROW(rgn_forward(s, 1.01), DomainError);
  EXPECT_THROW(rgn_forward(s, std::nan("")), DomainError);
}

TEST(Rgn, LossGradientMatchesFiniteDifferences) {
  const RgnState s = RgnState::fresh(quick_config());
  const auto xs = equally_spaced_inputs(1, 4);
  MatrixX<double> in(static_cast<Eigen::Index>(s.config.input_dim()), 4), y(6, 4);
  for (int j = 0; j < 4; ++j) {
    double x = xs[static_cast<std::size_t>(j)];
    encode_into<double>(&x, 1, s.config.bands, true, in.col(j).data());
    y.col(j) << 0.1 * j, -0.2, 0.3, 0.0, 0.6, 0.8;
  }
  ParamSet<double> grad = s.net.zeros_like();
  rgn_loss(s, in, y, &grad);
  const auto fd = meil::testing::finite_difference(s.net, [&](const ParamSet<double>& p) {
    RgnState t = s;
    t.net = p;
    return rgn_loss(t, in, y, nullptr);
  });
  EXPECT_LT(meil::testing::max_relative_error(grad.values(), fd), 1e-4);
}

TEST(Rgn, MemoryIsConstantInTaskCount) {
  const TrajectorySpec traj = reference_trajectory(5, 4);
  const auto poses = trajectory_poses(traj);
  RgnState s = RgnState::fresh(quick_config(50));
  const std::size_t bytes = s.bytes();
  for (int t = 1; t <= 5; ++t) {
    s = rgn_update(s, task_principals(poses, t - 1, 4), t, 4);
    EXPECT_EQ(s.bytes(), bytes) << "after task " << t;
    EXPECT_EQ(s.tasks, t);
    EXPECT_EQ(s.net.version(), t);
  }
}

TEST(Rgn, UpdateReproducesPrincipalRaysOfEveryTask) {
  const TrajectorySpec traj = reference_trajectory(3, 5);
  const auto poses = trajectory_poses(traj);
  RgnState s = RgnState::fresh(quick_config(2000));
  for (int t = 1; t <= 3; ++t) s = rgn_update(s, task_principals(poses, t - 1, 5), t, 5);
  const auto rays = rgn_forward_batch(s, equally_spaced_inputs(3, 5));
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const Ray truth = principal_ray(reference_intrinsics(), poses[i]);
    EXPECT_LT((rays[i].origin - truth.origin).norm(), 0.02 * 0.2) << i;
    EXPECT_LT(angle_between(rays[i].direction, truth.direction), 3.0 * kPi / 180.0) << i;
  }
}

TEST(Rgn, UpdateRejectsInconsistentHistory) {
  const auto poses = trajectory_poses(reference_trajectory(3, 5));
  const RgnState fresh = RgnState::fresh(quick_config(10));
  const auto current = task_principals(poses, 0, 5);
  EXPECT_THROW(rgn_update(fresh, current, 2, 5), DomainError);
  EXPECT_THROW(rgn_update(fresh, std::span<const Ray>(current).first(4), 1, 5), DomainError);
  EXPECT_THROW(rgn_update(fresh, current, 0, 5), DomainError);
  const RgnState one = rgn_update(fresh, current, 1, 5);
  EXPECT_THROW(rgn_update(one, task_principals(poses, 1, 4), 2, 4), DomainError);
}

TEST(Rgn, PastRaysLieInTheSensorConeOfAGeneratedPrincipal) {
  const auto poses = trajectory_poses(reference_trajectory(1, 5));
  const RgnState s = rgn_update(RgnState::fresh(quick_config(300)), task_principals(poses, 0, 5), 1, 5);
  const Intrinsics k = reference_intrinsics();
  Rng rng(4), replay(4);
  const auto rays = generate_past_rays(s, k, 500, rng);
  ASSERT_EQ(rays.size(), 500u);
  std::vector<double> xs;
  for (std::size_t i = 0; i < rays.size(); ++i) {
    xs.push_back(replay.uniform());
    replay.uniform();
    replay.uniform();
  }
  const auto principals = rgn_forward_batch(s, xs);
  const double cone = std::atan(k.half_diagonal() / k.focal);
  for (std::size_t i = 0; i < rays.size(); ++i) {
    EXPECT_EQ(rays[i].origin, principals[i].origin);
    EXPECT_LE(angle_between(rays[i].direction, principals[i].direction), cone + 1e-12);
  }
  EXPECT_THROW(generate_past_rays(s, k, 0, rng), DomainError);
}
