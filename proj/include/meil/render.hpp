#pragma once

#include <span>
#include <vector>

#include "meil/camera.hpp"
#include "meil/mlp.hpp"

namespace meil {

struct SampleSpec {
  int samples = 32;
  double z_near = 0.1;
  double z_far = 4.0;
  bool stratified = true;

  void validate() const {
    if (samples < 1) throw ConfigError("SampleSpec: need at least one sample per ray");
    if (!(z_near > 0.0) || !(z_near < z_far) || !std::isfinite(z_far)) throw ConfigError("SampleSpec: need 0 < z_near < z_far");
  }
  double bin() const { return (z_far - z_near) / samples; }
};

struct RenderResult {
  Vec3 color = Vec3::Zero();
  std::vector<double> weights;
  std::vector<double> transmittance;
  std::vector<double> depths;
};

/// Midpoints of P equal bins, or one uniform draw per bin when stratified.
inline void sample_depths_into(const SampleSpec& spec, Rng& rng, double* out) {
  const double delta = spec.bin();
  for (int i = 0; i < spec.samples; ++i) {
    const double u = spec.stratified ? rng.uniform() : 0.5;
    out[i] = spec.z_near + (i + u) * delta;
  }
}

inline std::vector<double> sample_depths(const SampleSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<double> z(static_cast<std::size_t>(spec.samples));
  sample_depths_into(spec, rng, z.data());
  return z;
}

namespace detail {

// Front-to-back compositing of one ray. alpha_i = 1 - exp(-sigma_i delta_i),
// delta_i = z_{i+1} - z_i and delta_P = z_far - z_P.
template <class ColorAt>
Vec3 composite_ray(int p, const ColorAt& color_at, const auto& sigma_at, const double* depths, double z_far, double* weights,
                   double* trans) {
  Vec3 out = Vec3::Zero();
  double t = 1.0;
  for (int i = 0; i < p; ++i) {
    const double delta = (i + 1 < p ? depths[i + 1] : z_far) - depths[i];
    const double survive = std::exp(-static_cast<double>(sigma_at(i)) * delta);
    const double w = t * (1.0 - survive);
    trans[i] = t;
    weights[i] = w;
    out += w * color_at(i);
    t *= survive;
  }
  return out;
}

}  // namespace detail

inline RenderResult composite(std::span<const Vec3> colors, std::span<const double> sigmas, std::span<const double> depths,
                              double z_far) {
  const std::size_t p = depths.size();
  if (p == 0 || colors.size() != p || sigmas.size() != p) throw DomainError("composite: mismatched sample arrays");
  for (std::size_t i = 0; i < p; ++i) {
    if (!(sigmas[i] >= 0.0)) throw DomainError("composite: negative or NaN density");
    if (i + 1 < p && !(depths[i + 1] > depths[i])) throw DomainError("composite: depths must be strictly increasing");
  }
  if (!(z_far >= depths[p - 1])) throw DomainError("composite: z_far before the last sample");
  RenderResult r;
  r.depths.assign(depths.begin(), depths.end());
  r.weights.resize(p);
  r.transmittance.resize(p);
  r.color = detail::composite_ray(
      static_cast<int>(p), [&](int i) { return colors[static_cast<std::size_t>(i)]; },
      [&](int i) { return sigmas[static_cast<std::size_t>(i)]; }, depths.data(), z_far, r.weights.data(), r.transmittance.data());
  return r;
}

/// Quadrature render of an arbitrary field: field(point, dir) -> NetworkOutput.
template <class Field>
RenderResult render_ray_field(const Field& field, const Ray& ray, const SampleSpec& spec, Rng& rng) {
  const std::vector<double> z = sample_depths(spec, rng);
  std::vector<Vec3> colors(z.size());
  std::vector<double> sigmas(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const NetworkOutput o = field(Vec3(ray.origin + z[i] * ray.direction), ray.direction);
    colors[i] = o.color;
    sigmas[i] = o.sigma;
  }
  return composite(colors, sigmas, z, spec.z_far);
}

enum class LossKind { L2, L1, Charbonnier };

/// rho(residual) and its gradient for one ray.
inline double ray_loss(LossKind kind, const Vec3& r, double eps, Vec3* grad) {
  switch (kind) {
    case LossKind::L2:
      if (grad) *grad = 2.0 * r;
      return r.squaredNorm();
    case LossKind::L1:
      if (grad) *grad = r.unaryExpr([](double x) { return double((x > 0) - (x < 0)); });
      return r.cwiseAbs().sum();
    case LossKind::Charbonnier: {
      const double rho = std::sqrt(r.squaredNorm() + eps * eps);
      if (grad) *grad = r / rho;
      return rho;
    }
  }
  return 0.0;
}

/// Charbonnier penalty sqrt(|v|^2 + eps^2) on a color residual.
inline double charbonnier(const Vec3& v, double eps) {
  if (!(eps > 0.0)) throw DomainError("charbonnier: eps must be positive");
  return ray_loss(LossKind::Charbonnier, v, eps, nullptr);
}

/// One loss group of a batch: weight / m * sum over its m rays of rho(C_hat - C).
struct LossTerm {
  LossKind kind = LossKind::L2;
  double weight = 1.0;
  double eps = 1e-3;
};

/// Batched differentiable renderer for the radiance network. Rays are processed
/// in fixed-size chunks whose gradients are reduced in chunk order, so the
/// result does not depend on the worker count.
template <class Real>
class NerfRenderer {
 public:
  static constexpr std::size_t kChunkRays = 64;

  NerfRenderer(NerfArchitecture arch, SampleSpec spec, unsigned threads = 1) : arch_(std::move(arch)), spec_(spec), threads_(threads) {
    spec_.validate();
  }

  const NerfArchitecture& arch() const { return arch_; }
  const SampleSpec& spec() const { return spec_; }
  void set_threads(unsigned t) { threads_ = std::max(1u, t); }

  /// Colors of every ray under `params` (no gradient).
  std::vector<Vec3> render(const ParamSet<Real>& params, std::span<const Ray> rays, Rng& rng) const {
    arch_.validate(params);
    const std::vector<double> depths = draw_depths(rays.size(), rng);
    std::vector<Vec3> out(rays.size());
    const std::size_t chunks = (rays.size() + kChunkRays - 1) / kChunkRays;
    parallel_for(chunks, threads_, [&](std::size_t c) {
      const std::size_t begin = c * kChunkRays, end = std::min(rays.size(), begin + kChunkRays);
      NerfCache<Real> cache;
      forward_chunk(params, rays, depths, begin, end, cache);
      const int p = spec_.samples;
      std::vector<double> w(static_cast<std::size_t>(p)), t(static_cast<std::size_t>(p));
      for (std::size_t r = begin; r < end; ++r) {
        const Eigen::Index base = static_cast<Eigen::Index>((r - begin) * static_cast<std::size_t>(p));
        out[r] = detail::composite_ray(
            p, [&](int i) { return Vec3(cache.color.col(base + i).template cast<double>()); },
            [&](int i) { return cache.sigma(base + i); }, depths.data() + r * static_cast<std::size_t>(p), spec_.z_far, w.data(),
            t.data());
      }
    });
    return out;
  }

  /// Full per-ray render result (weights, transmittance) for one ray.
  RenderResult render_ray(const ParamSet<Real>& params, const Ray& ray, Rng& rng) const {
    arch_.validate(params);
    const std::vector<Ray> one{ray};
    const std::vector<double> depths = draw_depths(1, rng);
    NerfCache<Real> cache;
    forward_chunk(params, one, depths, 0, 1, cache);
    std::vector<Vec3> colors(static_cast<std::size_t>(spec_.samples));
    std::vector<double> sigmas(colors.size());
    for (std::size_t i = 0; i < colors.size(); ++i) {
      colors[i] = cache.color.col(static_cast<Eigen::Index>(i)).template cast<double>();
      sigmas[i] = static_cast<double>(cache.sigma(static_cast<Eigen::Index>(i)));
    }
    return composite(colors, sigmas, depths, spec_.z_far);
  }

  /// Adds the term's gradient into `grad` and returns its loss value.
  /// `per_ray` (optional) receives rho for each ray, unweighted.
  double accumulate(const ParamSet<Real>& params, std::span<const Ray> rays, std::span<const Vec3> targets, const LossTerm& term,
                    Rng& rng, ParamSet<Real>& grad, std::vector<double>* per_ray = nullptr) const {
    arch_.validate(params);
    if (rays.empty()) throw DomainError("render loss: empty batch");
    if (targets.size() != rays.size()) throw DomainError("render loss: target count mismatch");
    if (!grad.same_shape(params)) throw ConfigError("render loss: gradient layout mismatch");
    const std::vector<double> depths = draw_depths(rays.size(), rng);
    const std::size_t chunks = (rays.size() + kChunkRays - 1) / kChunkRays;
    const double scale = term.weight / static_cast<double>(rays.size());
    std::vector<ParamSet<Real>> partial(chunks);
    std::vector<double> chunk_loss(chunks, 0.0);
    if (per_ray) per_ray->assign(rays.size(), 0.0);

    parallel_for(chunks, threads_, [&](std::size_t c) {
      const std::size_t begin = c * kChunkRays, end = std::min(rays.size(), begin + kChunkRays);
      NerfCache<Real> cache;
      forward_chunk(params, rays, depths, begin, end, cache);
      const int p = spec_.samples;
      const Eigen::Index k = cache.sigma.size();
      MatrixX<Real> dcolor(3, k);
      RowVectorX<Real> dsigma(k);
      std::vector<double> w(static_cast<std::size_t>(p)), t(static_cast<std::size_t>(p)), tail(static_cast<std::size_t>(p));
      double loss = 0.0;
      for (std::size_t r = begin; r < end; ++r) {
        const Eigen::Index base = static_cast<Eigen::Index>((r - begin) * static_cast<std::size_t>(p));
        const double* z = depths.data() + r * static_cast<std::size_t>(p);
        auto color_at = [&](int i) { return Vec3(cache.color.col(base + i).template cast<double>()); };
        const Vec3 c_hat =
            detail::composite_ray(p, color_at, [&](int i) { return cache.sigma(base + i); }, z, spec_.z_far, w.data(), t.data());
        Vec3 g;
        const double rho = ray_loss(term.kind, c_hat - targets[r], term.eps, &g);
        if (per_ray) (*per_ray)[r] = rho;
        loss += rho;
        g *= scale;
        // dC/dsigma_i = delta_i * (T_{i+1} c_i - sum_{k>i} w_k c_k)
        double suffix = 0.0;
        for (int i = p - 1; i >= 0; --i) {
          const Vec3 ci = color_at(i);
          const double gc = g.dot(ci);
          const double delta = (i + 1 < p ? z[i + 1] : spec_.z_far) - z[i];
          const double t_next = t[static_cast<std::size_t>(i)] - w[static_cast<std::size_t>(i)];
          dsigma(base + i) = static_cast<Real>(delta * (t_next * gc - suffix));
          suffix += w[static_cast<std::size_t>(i)] * gc;
          dcolor.col(base + i) = (w[static_cast<std::size_t>(i)] * g).template cast<Real>();
        }
      }
      chunk_loss[c] = loss;
      partial[c] = params.zeros_like();
      nerf_backward_batch(arch_, params, cache, dcolor, dsigma, partial[c]);
    });

    double loss = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
      loss += chunk_loss[c];
      grad.mutable_flat() += partial[c].flat();
    }
    loss *= scale;
    if (!std::isfinite(loss)) throw NumericError("render loss is not finite (batch of " + std::to_string(rays.size()) + " rays)");
    return loss;
  }

  /// Convenience wrapper: loss and a fresh gradient for a single term.
  std::pair<double, ParamSet<Real>> loss_and_gradient(const ParamSet<Real>& params, std::span<const Ray> rays,
                                                      std::span<const Vec3> targets, const LossTerm& term, Rng& rng) const {
    ParamSet<Real> grad = params.zeros_like();
    const double loss = accumulate(params, rays, targets, term, rng, grad);
    return {loss, std::move(grad)};
  }

 private:
  std::vector<double> draw_depths(std::size_t rays, Rng& rng) const {
    std::vector<double> depths(rays * static_cast<std::size_t>(spec_.samples));
    for (std::size_t r = 0; r < rays; ++r) sample_depths_into(spec_, rng, depths.data() + r * static_cast<std::size_t>(spec_.samples));
    return depths;
  }

  void forward_chunk(const ParamSet<Real>& params, std::span<const Ray> rays, const std::vector<double>& depths, std::size_t begin,
                     std::size_t end, NerfCache<Real>& cache) const {
    const auto p = static_cast<std::size_t>(spec_.samples);
    const auto k = static_cast<Eigen::Index>((end - begin) * p);
    Eigen::Matrix3Xd pos(3, k), dir(3, k);
    for (std::size_t r = begin; r < end; ++r) {
      const Ray& ray = rays[r];
      for (std::size_t i = 0; i < p; ++i) {
        const auto col = static_cast<Eigen::Index>((r - begin) * p + i);
        pos.col(col) = ray.origin + depths[r * p + i] * ray.direction;
        dir.col(col) = ray.direction;
      }
    }
    MatrixX<Real> pe, de;
    encode_batch<Real>(arch_.enc, pos, dir, pe, de);
    nerf_forward_batch(arch_, params, std::move(pe), de, cache);
  }

  NerfArchitecture arch_;
  SampleSpec spec_;
  unsigned threads_;
};

/// Row-major H x W x 3 image of floats.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, 0.0f) {}

  float& at(int v, int u, int c) { return data[(static_cast<std::size_t>(v) * static_cast<std::size_t>(width) + static_cast<std::size_t>(u)) * 3 + static_cast<std::size_t>(c)]; }
  float at(int v, int u, int c) const { return data[(static_cast<std::size_t>(v) * static_cast<std::size_t>(width) + static_cast<std::size_t>(u)) * 3 + static_cast<std::size_t>(c)]; }
  Vec3 pixel(int v, int u) const { return {at(v, u, 0), at(v, u, 1), at(v, u, 2)}; }
  void set_pixel(int v, int u, const Vec3& c) {
    for (int k = 0; k < 3; ++k) at(v, u, k) = static_cast<float>(c(k));
  }
  bool operator==(const ImageBuffer&) const = default;
};

/// All pixel rays of a view in row-major order.
inline std::vector<Ray> image_rays(const Intrinsics& intr, const Pose& pose) {
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(intr.width) * static_cast<std::size_t>(intr.height));
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) rays.push_back(pixel_ray(intr, pose, u, v));
  return rays;
}

template <class Real>
ImageBuffer render_image(const NerfRenderer<Real>& renderer, const ParamSet<Real>& params, const Intrinsics& intr, const Pose& pose,
                         Rng& rng) {
  const std::vector<Ray> rays = image_rays(intr, pose);
  const std::vector<Vec3> colors = renderer.render(params, rays, rng);
  ImageBuffer img(intr.width, intr.height);
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) img.set_pixel(v, u, colors[static_cast<std::size_t>(v) * static_cast<std::size_t>(intr.width) + static_cast<std::size_t>(u)]);
  return img;
}

}  // namespace meil
