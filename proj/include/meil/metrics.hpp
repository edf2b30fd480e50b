#pragma once

#include <array>
#include <atomic>
#include <iostream>
#include <vector>

#include "meil/render.hpp"

namespace meil {

inline constexpr double kPsnrCap = 99.0;

inline void require_same_dims(const ImageBuffer& a, const ImageBuffer& b, const char* who) {
  if (a.width != b.width || a.height != b.height || a.data.size() != b.data.size())
    throw DomainError(std::string(who) + ": image dimensions differ");
}

inline double mse(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_dims(a, b, "mse");
  if (a.data.empty()) throw DomainError("mse: empty image");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = std::clamp<double>(a.data[i], 0.0, 1.0) - std::clamp<double>(b.data[i], 0.0, 1.0);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

/// 10 log10(1 / mse) for peak 1.0, capped at 99 dB (mse 0 reports the cap).
inline double psnr_from_mse(double m) {
  if (!(m >= 0.0)) throw DomainError("psnr: mse must be >= 0");
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) { return psnr_from_mse(mse(a, b)); }

// ---------------------------------------------------------------------------
// MS-SSIM: 11x11 Gaussian window (sigma 1.5, valid convolution), K1 = 0.01,
// K2 = 0.03, 2x2 average pooling between scales (odd sizes pad by repeating
// the last row/column), negative terms clamped to zero, mean over channels.
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kSsimWindow = 11;

/// Largest scale count (<= 5) with min(H, W) >= 2^(scales-1) * 11, or 0.
inline int ms_ssim_scales(int width, int height) {
  int scales = 0;
  while (scales < 5 && std::min(width, height) >= (1 << scales) * kSsimWindow) ++scales;
  return scales;
}

/// Canonical weights truncated to `scales` and renormalized to sum to one.
inline std::vector<double> ms_ssim_weights(int scales) {
  std::vector<double> w(kMsSsimWeights.begin(), kMsSsimWeights.begin() + scales);
  double sum = 0.0;
  for (double x : w) sum += x;
  for (double& x : w) x /= sum;
  return w;
}

namespace detail {

struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)]; }
};

inline std::array<double, kSsimWindow> gaussian_window(double sigma) {
  std::array<double, kSsimWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double c = i - (kSsimWindow - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-0.5 * c * c / (sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (double& x : g) x /= sum;
  return g;
}

// Separable valid-mode filtering.
inline Plane filter_valid(const Plane& in, const std::array<double, kSsimWindow>& g) {
  const int ow = in.w - kSsimWindow + 1, oh = in.h - kSsimWindow + 1;
  Plane tmp{ow, in.h, std::vector<double>(static_cast<std::size_t>(ow) * static_cast<std::size_t>(in.h))};
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<std::size_t>(k)] * in.at(y, x + k);
      tmp.v[static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x)] = acc;
    }
  Plane out{ow, oh, std::vector<double>(static_cast<std::size_t>(ow) * static_cast<std::size_t>(oh))};
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<std::size_t>(k)] * tmp.at(y + k, x);
      out.v[static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x)] = acc;
    }
  return out;
}

inline Plane downsample(const Plane& in) {
  const int w = (in.w + 1) / 2, h = (in.h + 1) / 2;
  Plane out{w, h, std::vector<double>(static_cast<std::size_t>(w) * static_cast<std::size_t>(h))};
  auto px = [&](int y, int x) { return in.at(std::min(y, in.h - 1), std::min(x, in.w - 1)); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.v[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)] =
          0.25 * (px(2 * y, 2 * x) + px(2 * y, 2 * x + 1) + px(2 * y + 1, 2 * x) + px(2 * y + 1, 2 * x + 1));
  return out;
}

// Mean SSIM and mean contrast-structure term of one channel at one scale.
inline std::pair<double, double> ssim_terms(const Plane& x, const Plane& y, const std::array<double, kSsimWindow>& g) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Plane xy = x, xx_yy = x;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    xy.v[i] = x.v[i] * y.v[i];
    xx_yy.v[i] = x.v[i] * x.v[i] + y.v[i] * y.v[i];
  }
  const Plane mx = filter_valid(x, g), my = filter_valid(y, g);
  const Plane mxy = filter_valid(xy, g), mxx_yy = filter_valid(xx_yy, g);
  double ssim = 0.0, cs = 0.0;
  for (std::size_t i = 0; i < mx.v.size(); ++i) {
    const double num0 = 2.0 * mx.v[i] * my.v[i];
    const double den0 = mx.v[i] * mx.v[i] + my.v[i] * my.v[i];
    const double lum = (num0 + c1) / (den0 + c1);
    const double csi = (2.0 * mxy.v[i] - num0 + c2) / (mxx_yy.v[i] - den0 + c2);
    ssim += lum * csi;
    cs += csi;
  }
  const double n = static_cast<double>(mx.v.size());
  return {ssim / n, cs / n};
}

inline Plane channel_plane(const ImageBuffer& img, int c) {
  Plane p{img.width, img.height, std::vector<double>(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height))};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      p.v[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width) + static_cast<std::size_t>(x)] =
          std::clamp<double>(img.at(y, x, c), 0.0, 1.0);
  return p;
}

}  // namespace detail

/// MS-SSIM with an explicit scale count and weights (weights.size() scales).
inline double ms_ssim_with(const ImageBuffer& a, const ImageBuffer& b, const std::vector<double>& weights) {
  require_same_dims(a, b, "ms_ssim");
  const int scales = static_cast<int>(weights.size());
  if (scales < 1 || std::min(a.width, a.height) < (1 << (scales - 1)) * kSsimWindow)
    throw DomainError("ms_ssim: image too small for the requested scale count");
  const auto g = detail::gaussian_window(1.5);
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    detail::Plane x = detail::channel_plane(a, c), y = detail::channel_plane(b, c);
    double value = 1.0;
    for (int s = 0; s < scales; ++s) {
      if (s > 0) {
        x = detail::downsample(x);
        y = detail::downsample(y);
      }
      const auto [ssim, cs] = detail::ssim_terms(x, y, g);
      const double term = std::max(0.0, s + 1 < scales ? cs : ssim);
      value *= std::pow(term, weights[static_cast<std::size_t>(s)]);
    }
    total += value;
  }
  return std::clamp(total / 3.0, 0.0, 1.0);
}

/// Five-scale MS-SSIM, reducing the scale count (with renormalized weights)
/// when the image is too small. The reduction is reported once per process.
inline double ms_ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_dims(a, b, "ms_ssim");
  const int scales = ms_ssim_scales(a.width, a.height);
  if (scales < 1) throw DomainError("ms_ssim: image smaller than the 11x11 window");
  if (scales < 5) {
    static std::atomic<bool> logged{false};
    if (!logged.exchange(true))
      std::clog << "ms_ssim: " << a.width << "x" << a.height << " image supports " << scales << " of 5 scales; weights renormalized\n";
  }
  return ms_ssim_with(a, b, ms_ssim_weights(scales));
}

}  // namespace meil
