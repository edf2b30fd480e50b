#pragma once

#include <vector>

#include "meil/common.hpp"

namespace meil {

struct EncodingConfig {
  int pos_bands = 6;
  int dir_bands = 2;
  bool include_identity = true;

  /// Width of one encoded 3-vector with `bands` frequency bands.
  std::size_t dim(int bands) const { return 3 * ((include_identity ? 1 : 0) + 2 * static_cast<std::size_t>(bands)); }
  std::size_t pos_dim() const { return dim(pos_bands); }
  std::size_t dir_dim() const { return dim(dir_bands); }
};

/// Writes the encoding of `v` (n components) into `out`: optional identity,
/// then per band k: sin(2^k pi v) for every component, cos(2^k pi v) for every component.
template <class Real, class OutIt>
void encode_into(const double* v, int n, int bands, bool include_identity, OutIt out) {
  if (include_identity)
    for (int c = 0; c < n; ++c) *out++ = static_cast<Real>(v[c]);
  double freq = kPi;
  for (int k = 0; k < bands; ++k) {
    for (int c = 0; c < n; ++c) *out++ = static_cast<Real>(std::sin(freq * v[c]));
    for (int c = 0; c < n; ++c) *out++ = static_cast<Real>(std::cos(freq * v[c]));
    freq *= 2.0;
  }
}

inline std::vector<double> encode(const Vec3& v, int bands, bool include_identity) {
  if (bands < 0) throw DomainError("encode: negative band count");
  std::vector<double> out(3 * ((include_identity ? 1 : 0) + 2 * static_cast<std::size_t>(bands)));
  encode_into<double>(v.data(), 3, bands, include_identity, out.begin());
  return out;
}

}  // namespace meil
