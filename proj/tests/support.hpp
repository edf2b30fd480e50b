#pragma once
// Helpers shared by the unit tests and the acceptance runner: small networks,
// central finite differences, and the deterministic image-pair generator the
// MS-SSIM reference script mirrors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "meil/render.hpp"

namespace meil::testing {

/// 380-parameter radiance network (fits the <= 500 parameter oracle budget).
inline NerfArchitecture tiny_arch() {
  NerfArchitecture a;
  a.enc.pos_bands = 2;
  a.enc.dir_bands = 1;
  a.depth = 2;
  a.width = 8;
  a.color_width = 8;
  return a;
}

/// Max over coordinates of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Central differences of f with respect to every scalar of `params`.
inline std::vector<double> finite_difference(ParamSet<double> params, const std::function<double(const ParamSet<double>&)>& f,
                                             double h = 1e-6) {
  std::vector<double> out(params.scalar_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double orig = params.values()[i];
    params.mutable_values()[i] = orig + h;
    const double up = f(params);
    params.mutable_values()[i] = orig - h;
    const double down = f(params);
    params.mutable_values()[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

struct PipelineCheck {
  double max_rel_error = 0.0;
  std::size_t parameters = 0;
};

/// End-to-end gradient check: network + compositing + two-term loss
/// (mean squared error on current rays, weighted Charbonnier on past rays),
/// double precision, midpoint samples so the loss is a deterministic function.
inline PipelineCheck check_pipeline_gradient(std::uint64_t seed, int rays = 5, int samples = 8, double lambda = 0.7) {
  const NerfArchitecture arch = tiny_arch();
  const NerfRenderer<double> renderer(arch, SampleSpec{samples, 0.5, 2.5, false});
  const ParamSet<double> params = arch.make_params<double>(seed);
  Rng rng(seed + 1);
  std::vector<Ray> cur, past;
  std::vector<Vec3> cur_gt, past_gt;
  for (int r = 0; r < rays; ++r) {
    Ray ray;
    ray.origin = Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
    ray.direction = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 1.0)).normalized();
    const Vec3 target(rng.uniform(), rng.uniform(), rng.uniform());
    if (r < (rays + 1) / 2) {
      cur.push_back(ray);
      cur_gt.push_back(target);
    } else {
      past.push_back(ray);
      past_gt.push_back(target);
    }
  }
  const LossTerm current{LossKind::L2, 1.0, 1e-3};
  const LossTerm distill{LossKind::Charbonnier, lambda, 1e-3};
  auto loss_of = [&](const ParamSet<double>& p, ParamSet<double>* grad) {
    ParamSet<double> g = p.zeros_like();
    Rng unused(0);
    double loss = renderer.accumulate(p, cur, cur_gt, current, unused, g);
    if (!past.empty()) loss += renderer.accumulate(p, past, past_gt, distill, unused, g);
    if (grad) *grad = g;
    return loss;
  };
  ParamSet<double> analytic;
  loss_of(params, &analytic);
  const std::vector<double> fd = finite_difference(params, [&](const ParamSet<double>& p) { return loss_of(p, nullptr); });
  return {max_relative_error(analytic.values(), fd), params.scalar_count()};
}

// ---------------------------------------------------------------------------
// Image pairs for the MS-SSIM reference comparison (see golden/msssim_reference.py).
// ---------------------------------------------------------------------------

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0); }

 private:
  std::uint64_t state_;
};

inline std::pair<ImageBuffer, ImageBuffer> make_image_pair(std::uint64_t seed, int width, int height, double level) {
  SplitMix64 rng(seed);
  const double fx = 0.05 + 0.3 * rng.uniform();
  const double fy = 0.05 + 0.3 * rng.uniform();
  double phase[3];
  for (double& p : phase) p = 2.0 * kPi * rng.uniform();
  ImageBuffer a(width, height), b(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double base = 0.5 + 0.3 * std::sin(fx * x + fy * y + phase[c]) + 0.2 * (rng.uniform() - 0.5);
        const double va = std::clamp(base, 0.0, 1.0);
        const double vb = std::clamp(va + level * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);
        a.at(y, x, c) = static_cast<float>(va);
        b.at(y, x, c) = static_cast<float>(vb);
      }
  return {std::move(a), std::move(b)};
}

struct GoldenPair {
  std::uint64_t seed = 0;
  int width = 0, height = 0;
  double level = 0.0, msssim = 0.0;
};

inline std::vector<GoldenPair> load_golden_pairs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing golden file " + path);
  std::vector<GoldenPair> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    GoldenPair g;
    ss >> g.seed >> g.width >> g.height >> g.level >> g.msssim;
    if (!ss) throw IoError("bad golden line: " + line);
    out.push_back(g);
  }
  return out;
}

}  // namespace meil::testing
