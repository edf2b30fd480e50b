#pragma once

#include <vector>

#include "meil/params.hpp"

namespace meil {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer over a flat ParamSet. An optional mask (1 =
/// trainable) pins masked-out entries bit-exactly.
template <class Real>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void reset() {
    m_.clear();
    v_.clear();
    step_ = 0;
  }

  long steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void step(ParamSet<Real>& params, const ParamSet<Real>& grad, const std::vector<unsigned char>* mask = nullptr) {
    if (!params.same_shape(grad)) throw ConfigError("Adam: gradient layout mismatch");
    const std::size_t n = params.scalar_count();
    if (mask && mask->size() != n) throw ConfigError("Adam: mask size mismatch");
    if (m_.size() != n) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
      step_ = 0;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    auto p = params.mutable_values();
    const auto g = grad.values();
    for (std::size_t i = 0; i < n; ++i) {
      if (mask && !(*mask)[i]) continue;
      const double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi)) throw NumericError("Adam: non-finite gradient entry " + std::to_string(i));
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double update = cfg_.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
      p[i] = static_cast<Real>(static_cast<double>(p[i]) - update);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long step_ = 0;
};

}  // namespace meil
