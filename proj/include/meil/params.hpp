#pragma once

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "meil/common.hpp"

namespace meil {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

struct LayerShape {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t scalars() const { return out * in + out; }
  bool operator==(const LayerShape&) const = default;
};

/// Flat, contiguous storage for a stack of dense layers (weight out x in,
/// then bias out). A frozen set rejects every mutable accessor.
template <class Real>
class ParamSet {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  ParamSet() = default;

  explicit ParamSet(std::vector<LayerShape> shapes) : shapes_(std::move(shapes)) {
    std::size_t total = 0;
    offsets_.reserve(shapes_.size());
    for (const auto& s : shapes_) {
      if (s.out == 0 || s.in == 0) throw ConfigError("ParamSet: zero-sized layer");
      offsets_.push_back(total);
      total += s.scalars();
    }
    data_.assign(total, Real(0));
  }

  std::size_t layer_count() const { return shapes_.size(); }
  const std::vector<LayerShape>& shapes() const { return shapes_; }
  const LayerShape& shape(std::size_t i) const { return shapes_.at(i); }
  std::size_t scalar_count() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(Real); }

  bool frozen() const { return frozen_; }
  int version() const { return version_; }
  void set_version(int v) {
    require_mutable();
    version_ = v;
  }

  ConstMatrixMap weight(std::size_t i) const {
    const auto& s = shapes_.at(i);
    return ConstMatrixMap(data_.data() + offsets_[i], static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in));
  }
  ConstVectorMap bias(std::size_t i) const {
    const auto& s = shapes_.at(i);
    return ConstVectorMap(data_.data() + offsets_[i] + s.out * s.in, static_cast<Eigen::Index>(s.out));
  }
  MatrixMap mutable_weight(std::size_t i) {
    require_mutable();
    const auto& s = shapes_.at(i);
    return MatrixMap(data_.data() + offsets_[i], static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(s.in));
  }
  VectorMap mutable_bias(std::size_t i) {
    require_mutable();
    const auto& s = shapes_.at(i);
    return VectorMap(data_.data() + offsets_[i] + s.out * s.in, static_cast<Eigen::Index>(s.out));
  }

  /// Offset of layer i's first scalar in the flat view (weights column-major, then bias).
  std::size_t offset(std::size_t i) const { return offsets_.at(i); }

  std::span<const Real> values() const { return data_; }
  std::span<Real> mutable_values() {
    require_mutable();
    return data_;
  }

  ConstVectorMap flat() const { return ConstVectorMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  VectorMap mutable_flat() {
    require_mutable();
    return VectorMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  void set_zero() {
    require_mutable();
    std::fill(data_.begin(), data_.end(), Real(0));
  }

  bool same_shape(const ParamSet& other) const { return shapes_ == other.shapes_; }

  bool all_finite() const {
    for (Real v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a(data_.data(), data_.size() * sizeof(Real));
    for (const auto& s : shapes_) {
      h = fnv1a(&s.out, sizeof(s.out), h);
      h = fnv1a(&s.in, sizeof(s.in), h);
    }
    return h;
  }

  /// Zero-filled set with the same layout, never frozen.
  ParamSet zeros_like() const { return ParamSet(shapes_); }

  template <class Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out(shapes_);
    auto dst = out.mutable_values();
    for (std::size_t i = 0; i < data_.size(); ++i) dst[i] = static_cast<Other>(data_[i]);
    out.version_ = version_;
    out.frozen_ = frozen_;
    return out;
  }

  /// Deep copy marked frozen and tagged with task index `task`.
  ParamSet snapshot(int task) const {
    ParamSet copy = *this;
    copy.frozen_ = true;
    copy.version_ = task;
    return copy;
  }

  /// Mutable deep copy (used when a frozen set seeds a new trainable one).
  ParamSet thawed() const {
    ParamSet copy = *this;
    copy.frozen_ = false;
    return copy;
  }

  void write(std::ostream& os) const;
  static ParamSet read(std::istream& is);

 private:
  template <class>
  friend class ParamSet;

  void require_mutable() const {
    if (frozen_) throw std::logic_error("ParamSet: attempt to mutate a frozen parameter set");
  }

  std::vector<LayerShape> shapes_;
  std::vector<std::size_t> offsets_;
  // Over-aligned so vectorized products see the same alignment on every
  // allocation; with plain heap alignment the SIMD split, and so the rounding,
  // would vary from one allocation to the next.
  std::vector<Real, Eigen::aligned_allocator<Real>> data_;
  bool frozen_ = false;
  int version_ = 0;
};

template <class Real>
inline ParamSet<Real> snapshot(const ParamSet<Real>& params, int task) {
  return params.snapshot(task);
}

template <class Real>
inline std::size_t param_bytes(const ParamSet<Real>& params) {
  return params.bytes();
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
template <class Real>
void init_uniform(ParamSet<Real>& params, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(params.shape(l).in));
    auto w = params.mutable_weight(l);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<Real>(rng.uniform(-bound, bound));
    auto b = params.mutable_bias(l);
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = static_cast<Real>(rng.uniform(-bound, bound));
  }
}

// ---------------------------------------------------------------------------
// Binary format (little-endian):
//   magic "MEILPRM\0" | u32 format=1 | u32 scalar_bytes | u32 frozen | i32 version
//   | u32 layer_count | per layer: u32 out, u32 in, out*in weights row-major, out biases
// ---------------------------------------------------------------------------

inline constexpr char kParamMagic[8] = {'M', 'E', 'I', 'L', 'P', 'R', 'M', '\0'};
inline constexpr std::uint32_t kParamFormat = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(std::string("truncated stream while reading ") + what);
  return v;
}

}  // namespace detail

template <class Real>
void ParamSet<Real>::write(std::ostream& os) const {
  os.write(kParamMagic, sizeof(kParamMagic));
  detail::put<std::uint32_t>(os, kParamFormat);
  detail::put<std::uint32_t>(os, sizeof(Real));
  detail::put<std::uint32_t>(os, frozen_ ? 1u : 0u);
  detail::put<std::int32_t>(os, version_);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(shapes_.size()));
  for (std::size_t l = 0; l < shapes_.size(); ++l) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(shapes_[l].out));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(shapes_[l].in));
    const auto w = weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) detail::put<Real>(os, w(r, c));
    const auto b = bias(l);
    for (Eigen::Index r = 0; r < b.size(); ++r) detail::put<Real>(os, b(r));
  }
  if (!os) throw IoError("failed writing parameter set");
}

template <class Real>
ParamSet<Real> ParamSet<Real>::read(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kParamMagic, sizeof(magic)) != 0)
    throw IoError("parameter stream: bad magic");
  if (detail::get<std::uint32_t>(is, "format") != kParamFormat) throw IoError("parameter stream: unsupported format version");
  if (detail::get<std::uint32_t>(is, "scalar width") != sizeof(Real))
    throw IoError("parameter stream: scalar width does not match the requested precision");
  const bool frozen = detail::get<std::uint32_t>(is, "frozen flag") != 0;
  const int version = detail::get<std::int32_t>(is, "version");
  const auto count = detail::get<std::uint32_t>(is, "layer count");
  if (count > 4096) throw IoError("parameter stream: implausible layer count");
  std::vector<LayerShape> shapes;
  std::vector<std::vector<Real>> payload;
  for (std::uint32_t l = 0; l < count; ++l) {
    LayerShape s;
    s.out = detail::get<std::uint32_t>(is, "layer rows");
    s.in = detail::get<std::uint32_t>(is, "layer cols");
    if (s.out == 0 || s.in == 0 || s.out * s.in > (1u << 28)) throw IoError("parameter stream: bad layer shape");
    std::vector<Real> vals(s.scalars());
    if (!is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(Real))))
      throw IoError("truncated stream while reading layer values");
    shapes.push_back(s);
    payload.push_back(std::move(vals));
  }
  ParamSet out(shapes);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    auto w = out.mutable_weight(l);
    const auto& vals = payload[l];
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = vals[k++];
    auto b = out.mutable_bias(l);
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = vals[k++];
  }
  for (Real v : out.data_)
    if (!std::isfinite(v)) throw IoError("parameter stream: non-finite value");
  out.version_ = version;
  out.frozen_ = frozen;
  return out;
}

}  // namespace meil
