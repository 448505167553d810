#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlsp {

/// Dense row-major 2D container. No invariants beyond size consistency;
/// domain types (Morphology, masks) layer their own checks on top.
template <class T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {
    if (h < 0 || w < 0) throw std::invalid_argument("negative grid dimension");
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * width + c; }

  T& operator()(int r, int c) { return data[index(r, c)]; }
  const T& operator()(int r, int c) const { return data[index(r, c)]; }

  [[nodiscard]] bool same_shape(const auto& other) const {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Mask = Grid<std::uint8_t>;

/// Lateral (column) index with periodic wrap.
inline int wrap_col(int c, int width) {
  c %= width;
  return c < 0 ? c + width : c;
}

/// 64-bit FNV-1a, used for parameter and weight-file digests.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

}  // namespace dlsp
