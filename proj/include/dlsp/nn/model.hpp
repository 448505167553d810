#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlsp/grid.hpp"
#include "dlsp/nn/arch.hpp"

namespace dlsp::nn {

/// Architecture plus one flat parameter vector laid out per ArchSpec::tensors().
template <class T>
struct Model {
  ArchSpec arch;
  std::vector<TensorInfo> layout;
  std::vector<T> params;
  std::uint64_t seed = 0;

  Model() = default;
  explicit Model(ArchSpec a) : arch(std::move(a)), layout(arch.tensors()), params(arch.parameter_count(), T{0}) {}

  [[nodiscard]] std::span<T> tensor(std::size_t i) { return {params.data() + layout[i].offset, layout[i].size}; }
  [[nodiscard]] std::span<const T> tensor(std::size_t i) const { return {params.data() + layout[i].offset, layout[i].size}; }
  /// Layer L (convs first, then FCs) owns tensors 2L (weight) and 2L+1 (bias).
  [[nodiscard]] std::span<const T> weight(std::size_t layer) const { return tensor(2 * layer); }
  [[nodiscard]] std::span<const T> bias(std::size_t layer) const { return tensor(2 * layer + 1); }
  [[nodiscard]] std::span<T> weight(std::size_t layer) { return tensor(2 * layer); }
  [[nodiscard]] std::span<T> bias(std::size_t layer) { return tensor(2 * layer + 1); }

  template <class U>
  [[nodiscard]] Model<U> cast() const {
    Model<U> m(arch);
    m.seed = seed;
    for (std::size_t i = 0; i < params.size(); ++i) m.params[i] = static_cast<U>(params[i]);
    return m;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases, seeded.
template <class T = float>
Model<T> build_model(const ArchSpec& arch, std::uint64_t seed) {
  Model<T> m(arch);
  m.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m.layout.size(); i += 2) {
    const auto& dims = m.layout[i].dims;
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < dims.size(); ++d) fan_in *= dims[d];
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& w : m.tensor(i)) w = static_cast<T>(normal(rng));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Weight files: "DLSPW001", u32 tensor count, then per tensor
// u16 name length, name, u8 ndim, ndim x u32 dims, float32 payload (all LE).

inline constexpr char kWeightMagic[8] = {'D', 'L', 'S', 'P', 'W', '0', '0', '1'};

namespace detail {
template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw NnError(NnError::Code::Truncated, "weight file truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_weights(const Model<T>& m) {
  std::vector<std::uint8_t> out(std::begin(kWeightMagic), std::end(kWeightMagic));
  detail::put_le(out, static_cast<std::uint32_t>(m.layout.size()));
  for (std::size_t i = 0; i < m.layout.size(); ++i) {
    const auto& t = m.layout[i];
    detail::put_le(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_le(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_le(out, static_cast<std::uint32_t>(d));
    for (T v : m.tensor(i)) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

/// Decodes a weight file and checks every tensor against `arch`.
inline Model<float> decode_weights(std::span<const std::uint8_t> bytes, const ArchSpec& arch) {
  using C = NnError::Code;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kWeightMagic, 8) != 0) throw NnError(C::BadMagic, "not a DLSPW001 weight file");
  detail::Reader rd(bytes.subspan(8));
  Model<float> m(arch);
  const auto count = rd.get<std::uint32_t>();
  if (count != m.layout.size()) {
    throw NnError(C::ShapeMismatchWithArch, "weight file has " + std::to_string(count) + " tensors, architecture expects " + std::to_string(m.layout.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto& t = m.layout[i];
    const auto name_len = rd.get<std::uint16_t>();
    const auto name_bytes = rd.take(name_len);
    const std::string name(name_bytes.begin(), name_bytes.end());
    const auto ndim = rd.get<std::uint8_t>();
    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) d = rd.get<std::uint32_t>();
    if (name != t.name || dims != t.dims) {
      std::string got, want;
      for (auto d : dims) got += (got.empty() ? "" : "x") + std::to_string(d);
      for (auto d : t.dims) want += (want.empty() ? "" : "x") + std::to_string(d);
      throw NnError(C::ShapeMismatchWithArch, "tensor " + std::to_string(i) + " is " + name + "[" + got + "], architecture expects " + t.name + "[" + want + "]");
    }
    auto dst = m.tensor(i);
    for (auto& v : dst) v = std::bit_cast<float>(rd.get<std::uint32_t>());
  }
  return m;
}

template <class T>
void save_weights(const Model<T>& m, const std::filesystem::path& path) {
  const auto bytes = encode_weights(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Model<float> load_weights(const std::filesystem::path& path, const ArchSpec& arch = ArchSpec::default_arch()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_weights(bytes, arch);
}

}  // namespace dlsp::nn
