#include <gtest/gtest.h>

#include <sstream>

#include "meil/optim.hpp"
#include "support.hpp"

using namespace meil;
using meil::testing::finite_difference;
using meil::testing::max_relative_error;
using meil::testing::tiny_arch;

TEST(Encoding, ZeroVectorOneBand) {
  const std::vector<double> e = encode(Vec3::Zero(), 1, true);
  const std::vector<double> expected = {0, 0, 0, 0, 0, 0, 1, 1, 1};
  ASSERT_EQ(e.size(), expected.size());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_DOUBLE_EQ(e[i], expected[i]) << i;
}

TEST(Encoding, LayoutIsIdentityThenSinBlockThenCosBlockPerBand) {
  const Vec3 v(0.1, -0.4, 0.7);
  const std::vector<double> e = encode(v, 3, true);
  ASSERT_EQ(e.size(), 3u * (1 + 2 * 3));
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(e[static_cast<std::size_t>(c)], v(c));
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 3; ++c) {
      const double f = std::ldexp(kPi, k);
      EXPECT_DOUBLE_EQ(e[static_cast<std::size_t>(3 + 6 * k + c)], std::sin(f * v(c)));
      EXPECT_DOUBLE_EQ(e[static_cast<std::size_t>(3 + 6 * k + 3 + c)], std::cos(f * v(c)));
    }
}

TEST(Encoding, WithoutIdentityAndZeroBands) {
  EXPECT_EQ(encode(Vec3(1, 2, 3), 0, true).size(), 3u);
  EXPECT_EQ(encode(Vec3(1, 2, 3), 0, false).size(), 0u);
  EXPECT_EQ(encode(Vec3(1, 2, 3), 4, false).size(), 24u);
  EXPECT_THROW(encode(Vec3::Zero(), -1, true), DomainError);
  EncodingConfig cfg{6, 2, true};
  EXPECT_EQ(cfg.pos_dim(), 39u);
  EXPECT_EQ(cfg.dir_dim(), 15u);
}

TEST(ParamSet, BytesAndLayout) {
  const NerfArchitecture arch = tiny_arch();
  const auto p = arch.make_params<float>(3);
  EXPECT_EQ(p.scalar_count(), 380u);
  EXPECT_EQ(param_bytes(p), 380u * sizeof(float));
  EXPECT_EQ(p.cast<double>().bytes(), 380u * sizeof(double));
  EXPECT_EQ(p.layer_count(), static_cast<std::size_t>(arch.depth) + 3);
}

TEST(ParamSet, StorageIsOverAligned) {
  std::vector<std::vector<char>> clutter;
  for (int i = 0; i < 8; ++i) {
    clutter.emplace_back(static_cast<std::size_t>(1 + 7 * i));
    const ParamSet<float> p({{3, 5}, {2, 3}});
    const ParamSet<float> copy = p;
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(p.values().data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(copy.values().data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
  }
}

TEST(ParamSet, InitIsDeterministicAndBoundedByFanIn) {
  const NerfArchitecture arch = tiny_arch();
  const auto a = arch.make_params<double>(11), b = arch.make_params<double>(11), c = arch.make_params<double>(12);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  for (std::size_t l = 0; l < a.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(a.shape(l).in));
    EXPECT_LE(a.weight(l).cwiseAbs().maxCoeff(), bound);
    EXPECT_LE(a.bias(l).cwiseAbs().maxCoeff(), bound);
  }
}

TEST(ParamSet, SnapshotIsFrozenDeepCopy) {
  auto live = tiny_arch().make_params<float>(1);
  const auto snap = snapshot(live, 1);
  EXPECT_TRUE(snap.frozen());
  EXPECT_EQ(snap.version(), 1);
  auto copy = snap;
  EXPECT_THROW(copy.mutable_values(), std::logic_error);
  EXPECT_THROW(copy.mutable_weight(0), std::logic_error);
  EXPECT_THROW(copy.set_zero(), std::logic_error);
  const auto before = snap.checksum();
  live.mutable_values()[0] += 1.0f;
  EXPECT_EQ(snap.checksum(), before) << "snapshot must not alias the live parameters";
  auto thawed = snap.thawed();
  EXPECT_NO_THROW(thawed.mutable_values()[0] = 0.0f);
}

TEST(ParamSet, SerializationRoundTripIsExact) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = tiny_arch().make_params<float>(seed).snapshot(static_cast<int>(seed));
    std::stringstream ss;
    p.write(ss);
    const auto q = ParamSet<float>::read(ss);
    EXPECT_EQ(q.shapes(), p.shapes());
    EXPECT_EQ(q.frozen(), p.frozen());
    EXPECT_EQ(q.version(), p.version());
    EXPECT_EQ(q.checksum(), p.checksum());
  }
}

TEST(ParamSet, ReadRejectsCorruptStreams) {
  const auto p = tiny_arch().make_params<float>(1);
  std::stringstream ss;
  p.write(ss);
  const std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 7));
  EXPECT_THROW(ParamSet<float>::read(truncated), IoError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream bad_magic(bad);
  EXPECT_THROW(ParamSet<float>::read(bad_magic), IoError);
  std::stringstream wrong_width(bytes);
  EXPECT_THROW(ParamSet<double>::read(wrong_width), IoError);
}

TEST(Activations, StableAtExtremes) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_TRUE(std::isfinite(sigmoid(-1000.0)));
  EXPECT_NEAR(sigmoid(1000.0), 1.0, 1e-15);
  EXPECT_NEAR(softplus(1000.0), 1000.0, 1e-12);
  EXPECT_GE(softplus(-1000.0), 0.0);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
}

TEST(Network, OutputsAreInRange) {
  const NerfArchitecture arch = tiny_arch();
  const auto p = arch.make_params<double>(5);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const Vec3 pos(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Vec3 dir = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
    const NetworkOutput o = forward(arch, p, pos, dir);
    EXPECT_GE(o.sigma, 0.0);
    EXPECT_TRUE((o.color.array() >= 0.0).all() && (o.color.array() <= 1.0).all());
  }
}

TEST(Network, RejectsBadInputs) {
  const NerfArchitecture arch = tiny_arch();
  const auto p = arch.make_params<double>(5);
  EXPECT_THROW(forward(arch, p, Vec3::Zero(), Vec3(0, 0, 2)), DomainError);
  NerfArchitecture other = arch;
  other.width = 9;
  EXPECT_THROW(forward(other, p, Vec3::Zero(), Vec3::UnitZ()), ConfigError);
  other = arch;
  other.enc.pos_bands = 3;
  EXPECT_THROW(forward(other, p, Vec3::Zero(), Vec3::UnitZ()), ConfigError);
}

TEST(Network, BackwardMatchesFiniteDifferences) {
  const NerfArchitecture arch = tiny_arch();
  const auto params = arch.make_params<double>(21);
  Rng rng(21);
  const int k = 6;
  Eigen::Matrix3Xd pos(3, k), dir(3, k);
  MatrixX<double> dcolor(3, k);
  RowVectorX<double> dsigma(k);
  for (int j = 0; j < k; ++j) {
    pos.col(j) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    dir.col(j) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
    for (int c = 0; c < 3; ++c) dcolor(c, j) = rng.uniform(-1, 1);
    dsigma(j) = rng.uniform(-1, 1);
  }
  const auto grad = backward(arch, params, pos, dir, dcolor, dsigma);
  auto objective = [&](const ParamSet<double>& p) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) {
      const NetworkOutput o = forward(arch, p, pos.col(j), dir.col(j));
      acc += dcolor.col(j).dot(o.color) + dsigma(j) * o.sigma;
    }
    return acc;
  };
  EXPECT_LT(max_relative_error(grad.values(), finite_difference(params, objective)), 1e-5);
}

TEST(Network, FloatAndDoubleAgree) {
  const NerfArchitecture arch = tiny_arch();
  const auto pd = arch.make_params<double>(8);
  const auto pf = pd.cast<float>();
  const NetworkOutput a = forward(arch, pd, Vec3(0.2, -0.1, 0.5), Vec3::UnitZ());
  const NetworkOutput b = forward(arch, pf, Vec3(0.2, -0.1, 0.5), Vec3::UnitZ());
  EXPECT_NEAR(a.sigma, b.sigma, 1e-5);
  EXPECT_LT((a.color - b.color).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Network, NonFiniteUpstreamGradientIsRejected) {
  const NerfArchitecture arch = tiny_arch();
  const auto p = arch.make_params<double>(1);
  Eigen::Matrix3Xd pos = Eigen::Matrix3Xd::Zero(3, 1), dir(3, 1);
  dir.col(0) = Vec3::UnitZ();
  MatrixX<double> dc = MatrixX<double>::Zero(3, 1);
  dc(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(backward<double>(arch, p, pos, dir, dc, RowVectorX<double>::Zero(1)), NumericError);
}

TEST(ChainMlp, BackwardMatchesFiniteDifferences) {
  ParamSet<double> p({{7, 3}, {5, 7}, {2, 5}});
  init_uniform(p, 4);
  Rng rng(4);
  MatrixX<double> x(3, 4), dout(2, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < dout.size(); ++i) dout.data()[i] = rng.uniform(-1, 1);
  ChainCache<double> cache;
  chain_forward(p, x, cache);
  ParamSet<double> grad = p.zeros_like();
  chain_backward(p, cache, dout, grad);
  auto objective = [&](const ParamSet<double>& q) {
    ChainCache<double> c;
    return chain_forward(q, x, c).cwiseProduct(dout).sum();
  };
  EXPECT_LT(max_relative_error(grad.values(), finite_difference(p, objective)), 1e-6);
  ChainCache<double> c;
  EXPECT_THROW(chain_forward<double>(p, MatrixX<double>::Zero(4, 1), c), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  ParamSet<double> p({{2, 1}});
  ParamSet<double> g = p.zeros_like();
  g.mutable_values()[0] = 3.0;
  g.mutable_values()[1] = -0.01;
  g.mutable_values()[2] = 0.0;
  Adam<double> opt({0.1});
  opt.step(p, g);
  EXPECT_NEAR(p.values()[0], -0.1, 1e-6);
  EXPECT_NEAR(p.values()[1], 0.1, 1e-4);
  EXPECT_DOUBLE_EQ(p.values()[2], 0.0);
}

TEST(Adam, MaskedEntriesNeverMove) {
  ParamSet<float> p({{4, 4}});
  init_uniform(p, 2);
  const std::vector<float> before(p.values().begin(), p.values().end());
  std::vector<std::uint8_t> mask(p.scalar_count(), 1);
  for (std::size_t i = 0; i < mask.size(); i += 2) mask[i] = 0;
  ParamSet<float> g = p.zeros_like();
  for (float& v : g.mutable_values()) v = 1.0f;
  Adam<float> opt({0.01});
  for (int s = 0; s < 10; ++s) opt.step(p, g, &mask);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i])
      EXPECT_NE(p.values()[i], before[i]);
    else
      EXPECT_EQ(p.values()[i], before[i]);
  }
}

TEST(Adam, RejectsFrozenParameters) {
  ParamSet<float> p({{2, 2}});
  auto frozen = p.snapshot(1);
  Adam<float> opt({0.01});
  EXPECT_THROW(opt.step(frozen, p.zeros_like()), std::logic_error);
}
