#pragma once

#include <vector>

#include "meil/encoding.hpp"
#include "meil/params.hpp"

namespace meil {

template <class Real>
using MatrixX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <class Real>
using RowVectorX = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

template <class Real>
inline Real sigmoid(Real x) {
  return x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
}

template <class Real>
inline Real softplus(Real x) {
  return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}

struct NetworkOutput {
  Vec3 color = Vec3::Zero();
  double sigma = 0.0;
};

// ---------------------------------------------------------------------------
// Radiance network: a ReLU trunk on the encoded position, a density head on
// the trunk output, and a color branch that sees the trunk output
// concatenated with the encoded view direction.
//
//   layer 0 .. depth-1   trunk            (pos_dim | width -> width)
//   layer depth          density head     (width -> 1), softplus
//   layer depth+1        color hidden     (width + dir_dim -> color_width), ReLU
//   layer depth+2        color output     (color_width -> 3), logistic
// ---------------------------------------------------------------------------
struct NerfArchitecture {
  EncodingConfig enc;
  int depth = 4;
  int width = 128;
  int color_width = 64;

  std::size_t sigma_layer() const { return static_cast<std::size_t>(depth); }
  std::size_t color_hidden_layer() const { return static_cast<std::size_t>(depth) + 1; }
  std::size_t color_out_layer() const { return static_cast<std::size_t>(depth) + 2; }

  std::vector<LayerShape> layout() const {
    if (depth < 1 || width < 1 || color_width < 1) throw ConfigError("NerfArchitecture: depth/width must be positive");
    std::vector<LayerShape> shapes;
    const auto w = static_cast<std::size_t>(width);
    shapes.push_back({w, enc.pos_dim()});
    for (int l = 1; l < depth; ++l) shapes.push_back({w, w});
    shapes.push_back({1, w});
    shapes.push_back({static_cast<std::size_t>(color_width), w + enc.dir_dim()});
    shapes.push_back({3, static_cast<std::size_t>(color_width)});
    return shapes;
  }

  template <class Real>
  ParamSet<Real> make_params(std::uint64_t seed) const {
    ParamSet<Real> p(layout());
    init_uniform(p, seed);
    return p;
  }

  template <class Real>
  void validate(const ParamSet<Real>& p) const {
    if (p.shapes() != layout()) throw ConfigError("radiance network parameters do not match the architecture/encoding");
  }
};

/// Activations kept from a batched forward pass; columns are samples.
template <class Real>
struct NerfCache {
  std::vector<MatrixX<Real>> trunk;  // trunk[0] = encoded positions, trunk[l+1] = ReLU output of layer l
  MatrixX<Real> color_in;            // [trunk output; encoded direction]
  MatrixX<Real> color_hidden;        // ReLU output
  RowVectorX<Real> sigma_raw;
  MatrixX<Real> color;               // logistic output, 3 x K
  RowVectorX<Real> sigma;            // softplus output, 1 x K
};

/// Encodes positions/directions (3 x K each, double) into the network input blocks.
template <class Real>
void encode_batch(const EncodingConfig& enc, const Eigen::Matrix3Xd& pos, const Eigen::Matrix3Xd& dir, MatrixX<Real>& pos_enc,
                  MatrixX<Real>& dir_enc) {
  const Eigen::Index k = pos.cols();
  pos_enc.resize(static_cast<Eigen::Index>(enc.pos_dim()), k);
  dir_enc.resize(static_cast<Eigen::Index>(enc.dir_dim()), k);
  for (Eigen::Index j = 0; j < k; ++j) {
    encode_into<Real>(pos.col(j).data(), 3, enc.pos_bands, enc.include_identity, pos_enc.col(j).data());
    encode_into<Real>(dir.col(j).data(), 3, enc.dir_bands, enc.include_identity, dir_enc.col(j).data());
  }
}

template <class Real>
void nerf_forward_batch(const NerfArchitecture& arch, const ParamSet<Real>& params, MatrixX<Real> pos_enc,
                        const MatrixX<Real>& dir_enc, NerfCache<Real>& cache) {
  const Eigen::Index k = pos_enc.cols();
  const auto w = static_cast<Eigen::Index>(arch.width);
  cache.trunk.resize(static_cast<std::size_t>(arch.depth) + 1);
  cache.trunk[0] = std::move(pos_enc);
  for (int l = 0; l < arch.depth; ++l) {
    const auto li = static_cast<std::size_t>(l);
    MatrixX<Real>& next = cache.trunk[li + 1];
    next.noalias() = params.weight(li) * cache.trunk[li];
    next.colwise() += params.bias(li);
    next = next.cwiseMax(Real(0));
  }
  const MatrixX<Real>& h = cache.trunk.back();

  cache.sigma_raw.noalias() = params.weight(arch.sigma_layer()) * h;
  cache.sigma_raw.array() += params.bias(arch.sigma_layer())(0);
  cache.sigma.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) cache.sigma(j) = softplus(cache.sigma_raw(j));

  cache.color_in.resize(w + dir_enc.rows(), k);
  cache.color_in.topRows(w) = h;
  cache.color_in.bottomRows(dir_enc.rows()) = dir_enc;
  cache.color_hidden.noalias() = params.weight(arch.color_hidden_layer()) * cache.color_in;
  cache.color_hidden.colwise() += params.bias(arch.color_hidden_layer());
  cache.color_hidden = cache.color_hidden.cwiseMax(Real(0));

  cache.color.noalias() = params.weight(arch.color_out_layer()) * cache.color_hidden;
  cache.color.colwise() += params.bias(arch.color_out_layer());
  cache.color = cache.color.unaryExpr([](Real x) { return sigmoid(x); });
}

/// Accumulates into `grad` the parameter gradient of sum_j (dcolor_j . c_j + dsigma_j * sigma_j).
template <class Real>
void nerf_backward_batch(const NerfArchitecture& arch, const ParamSet<Real>& params, const NerfCache<Real>& cache,
                         const MatrixX<Real>& dcolor, const RowVectorX<Real>& dsigma, ParamSet<Real>& grad) {
  if (!dcolor.allFinite() || !dsigma.allFinite()) throw NumericError("backward: non-finite upstream gradient");
  const auto w = static_cast<Eigen::Index>(arch.width);

  MatrixX<Real> dz = dcolor.cwiseProduct(cache.color.unaryExpr([](Real c) { return c * (Real(1) - c); }));
  const std::size_t lo = arch.color_out_layer();
  grad.mutable_weight(lo).noalias() += dz * cache.color_hidden.transpose();
  grad.mutable_bias(lo) += dz.rowwise().sum();

  MatrixX<Real> da = params.weight(lo).transpose() * dz;
  dz = da.cwiseProduct((cache.color_hidden.array() > Real(0)).template cast<Real>().matrix());
  const std::size_t lh = arch.color_hidden_layer();
  grad.mutable_weight(lh).noalias() += dz * cache.color_in.transpose();
  grad.mutable_bias(lh) += dz.rowwise().sum();
  MatrixX<Real> dh = (params.weight(lh).transpose() * dz).topRows(w);

  RowVectorX<Real> ds(dsigma.size());
  for (Eigen::Index j = 0; j < ds.size(); ++j) ds(j) = dsigma(j) * sigmoid(cache.sigma_raw(j));
  const std::size_t ls = arch.sigma_layer();
  grad.mutable_weight(ls).noalias() += ds * cache.trunk.back().transpose();
  grad.mutable_bias(ls)(0) += ds.sum();
  dh.noalias() += params.weight(ls).transpose() * ds;

  for (int l = arch.depth - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    dz = dh.cwiseProduct((cache.trunk[li + 1].array() > Real(0)).template cast<Real>().matrix());
    grad.mutable_weight(li).noalias() += dz * cache.trunk[li].transpose();
    grad.mutable_bias(li) += dz.rowwise().sum();
    if (l > 0) dh.noalias() = params.weight(li).transpose() * dz;
  }
}

/// Single-point query; `dir` must be unit length.
template <class Real>
NetworkOutput forward(const NerfArchitecture& arch, const ParamSet<Real>& params, const Vec3& pos, const Vec3& dir) {
  if (std::abs(dir.norm() - 1.0) > 1e-6) throw DomainError("forward: view direction must be unit length");
  arch.validate(params);
  Eigen::Matrix3Xd p(3, 1), d(3, 1);
  p.col(0) = pos;
  d.col(0) = dir;
  MatrixX<Real> pe, de;
  encode_batch<Real>(arch.enc, p, d, pe, de);
  NerfCache<Real> cache;
  nerf_forward_batch(arch, params, std::move(pe), de, cache);
  NetworkOutput out;
  for (int c = 0; c < 3; ++c) out.color(c) = static_cast<double>(cache.color(c, 0));
  out.sigma = static_cast<double>(cache.sigma(0));
  return out;
}

/// Gradient of sum over the batch of (dcolor . c + dsigma * sigma) for point queries.
template <class Real>
ParamSet<Real> backward(const NerfArchitecture& arch, const ParamSet<Real>& params, const Eigen::Matrix3Xd& pos,
                        const Eigen::Matrix3Xd& dir, const MatrixX<Real>& dcolor, const RowVectorX<Real>& dsigma) {
  if (pos.cols() == 0) throw DomainError("backward: empty batch");
  arch.validate(params);
  MatrixX<Real> pe, de;
  encode_batch<Real>(arch.enc, pos, dir, pe, de);
  NerfCache<Real> cache;
  nerf_forward_batch(arch, params, std::move(pe), de, cache);
  ParamSet<Real> grad = params.zeros_like();
  nerf_backward_batch(arch, params, cache, dcolor, dsigma, grad);
  return grad;
}

// ---------------------------------------------------------------------------
// Plain chain MLP: ReLU on every layer but the last, linear output.
// ---------------------------------------------------------------------------

template <class Real>
struct ChainCache {
  std::vector<MatrixX<Real>> acts;  // acts[0] = input, acts[l+1] = output of layer l
};

template <class Real>
const MatrixX<Real>& chain_forward(const ParamSet<Real>& params, MatrixX<Real> input, ChainCache<Real>& cache) {
  const std::size_t n = params.layer_count();
  cache.acts.resize(n + 1);
  cache.acts[0] = std::move(input);
  for (std::size_t l = 0; l < n; ++l) {
    if (cache.acts[l].rows() != static_cast<Eigen::Index>(params.shape(l).in)) throw ConfigError("chain MLP: input width mismatch");
    MatrixX<Real>& next = cache.acts[l + 1];
    next.noalias() = params.weight(l) * cache.acts[l];
    next.colwise() += params.bias(l);
    if (l + 1 < n) next = next.cwiseMax(Real(0));
  }
  return cache.acts.back();
}

template <class Real>
void chain_backward(const ParamSet<Real>& params, const ChainCache<Real>& cache, const MatrixX<Real>& dout, ParamSet<Real>& grad) {
  if (!dout.allFinite()) throw NumericError("chain backward: non-finite upstream gradient");
  const std::size_t n = params.layer_count();
  MatrixX<Real> dz = dout;
  for (std::size_t l = n; l-- > 0;) {
    grad.mutable_weight(l).noalias() += dz * cache.acts[l].transpose();
    grad.mutable_bias(l) += dz.rowwise().sum();
    if (l == 0) break;
    MatrixX<Real> da = params.weight(l).transpose() * dz;
    dz = da.cwiseProduct((cache.acts[l].array() > Real(0)).template cast<Real>().matrix());
  }
}

}  // namespace meil
