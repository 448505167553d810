#pragma once

// Morphology grids, PGM codec, J_sc binning, augmentation, dataset manifests.
//
// Orientation: row 0 touches the top electrode (cathode, collects electrons
// through the acceptor), row height-1 touches the bottom electrode (anode,
// collects holes through the donor). Columns are laterally periodic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlsp/grid.hpp"
#include "dlsp/kvfile.hpp"

namespace dlsp {

class MorphoError : public std::runtime_error {
 public:
  enum class Code { InvalidMorphology, MalformedHeader, TruncatedPayload, UnsupportedMaxval, DegenerateRange, EmptyManifest, BadManifest };
  MorphoError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  [[nodiscard]] Code code() const noexcept { return code_; }

 private:
  Code code_;
};

inline constexpr int kDefaultSide = 101;
inline constexpr int kNumClasses = 10;

/// Donor volume-fraction field in [0,1] (1 = pure donor).
class Morphology {
 public:
  Morphology() : Morphology(kDefaultSide, kDefaultSide) {}
  Morphology(int height, int width, double fill = 0.0) : Morphology(Grid<double>(height, width, fill)) {}
  explicit Morphology(Grid<double> grid) : grid_(std::move(grid)) { validate(); }

  [[nodiscard]] int height() const { return grid_.height; }
  [[nodiscard]] int width() const { return grid_.width; }
  [[nodiscard]] double operator()(int r, int c) const { return grid_(r, c); }
  [[nodiscard]] std::span<const double> values() const { return grid_.data; }
  [[nodiscard]] const Grid<double>& grid() const { return grid_; }

  void set(int r, int c, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw MorphoError(MorphoError::Code::InvalidMorphology, "value outside [0,1]");
    grid_(r, c) = v;
  }

  friend bool operator==(const Morphology&, const Morphology&) = default;

 private:
  void validate() const {
    if (grid_.height < 3 || grid_.width < 3) {
      throw MorphoError(MorphoError::Code::InvalidMorphology, "morphology must be at least 3x3");
    }
    for (double v : grid_.data) {
      if (!(v >= 0.0 && v <= 1.0)) throw MorphoError(MorphoError::Code::InvalidMorphology, "value outside [0,1]");
    }
  }

  Grid<double> grid_;
};

/// Two-phase field; donor(r,c) != 0 marks donor.
struct BinaryMorphology {
  Mask donor;

  BinaryMorphology() = default;
  explicit BinaryMorphology(Mask m) : donor(std::move(m)) {}
  BinaryMorphology(int h, int w, bool fill = false) : donor(h, w, fill ? 1 : 0) {}

  [[nodiscard]] int height() const { return donor.height; }
  [[nodiscard]] int width() const { return donor.width; }
  [[nodiscard]] bool is_donor(int r, int c) const { return donor(r, c) != 0; }
  [[nodiscard]] std::size_t donor_count() const {
    return static_cast<std::size_t>(std::count_if(donor.data.begin(), donor.data.end(), [](auto v) { return v != 0; }));
  }
  [[nodiscard]] Morphology to_morphology() const {
    Grid<double> g(height(), width());
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = donor.data[i] ? 1.0 : 0.0;
    return Morphology(std::move(g));
  }

  friend bool operator==(const BinaryMorphology&, const BinaryMorphology&) = default;
};

inline BinaryMorphology binarize(const Morphology& m, double threshold = 0.5) {
  Mask mask(m.height(), m.width());
  const auto v = m.values();
  for (std::size_t i = 0; i < v.size(); ++i) mask.data[i] = v[i] > threshold ? 1 : 0;
  return BinaryMorphology(std::move(mask));
}

// ---------------------------------------------------------------------------
// PGM (binary P5, maxval 255)

inline std::uint8_t quantize_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
}

/// Encodes any gray grid with values in [0,1]; byte = round-half-up(value*255).
inline std::vector<std::uint8_t> encode_pgm(const Grid<double>& g) {
  const std::string header = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + g.size());
  for (double v : g.data) out.push_back(quantize_byte(v));
  return out;
}

inline std::vector<std::uint8_t> encode_pgm(const Morphology& m) { return encode_pgm(m.grid()); }

/// Decodes a P5 image into a gray grid (value = byte/255). Any size is
/// accepted here; wrap in Morphology to enforce the domain invariants.
inline Grid<double> decode_pgm_grid(std::span<const std::uint8_t> bytes) {
  using C = MorphoError::Code;
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      const char ch = static_cast<char>(bytes[pos]);
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) -> long {
    skip_ws();
    long v = 0;
    std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000) throw MorphoError(C::MalformedHeader, std::string("PGM ") + what + " too large");
      ++pos;
    }
    if (pos == start) throw MorphoError(C::MalformedHeader, std::string("PGM header: missing ") + what);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw MorphoError(C::MalformedHeader, "not a binary PGM (expected magic P5)");
  }
  pos = 2;
  const long width = read_uint("width");
  const long height = read_uint("height");
  const long maxval = read_uint("maxval");
  if (width <= 0 || height <= 0) throw MorphoError(C::MalformedHeader, "PGM dimensions must be positive");
  if (maxval != 255) throw MorphoError(C::UnsupportedMaxval, "PGM maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !(bytes[pos] == ' ' || bytes[pos] == '\n' || bytes[pos] == '\r' || bytes[pos] == '\t')) {
    throw MorphoError(C::MalformedHeader, "PGM header not terminated by whitespace");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < need) {
    throw MorphoError(C::TruncatedPayload, "PGM payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " + std::to_string(need));
  }
  Grid<double> g(static_cast<int>(height), static_cast<int>(width));
  for (std::size_t i = 0; i < need; ++i) g.data[i] = bytes[pos + i] / 255.0;
  return g;
}

inline Morphology decode_pgm(std::span<const std::uint8_t> bytes) { return Morphology(decode_pgm_grid(bytes)); }

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Morphology read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_file_bytes(path));
  } catch (const MorphoError& e) {
    throw MorphoError(e.code(), path.string() + ": " + e.what());
  }
}

inline void write_pgm(const std::filesystem::path& path, const Grid<double>& g) { write_file_bytes(path, encode_pgm(g)); }
inline void write_pgm(const std::filesystem::path& path, const Morphology& m) { write_pgm(path, m.grid()); }

// ---------------------------------------------------------------------------
// Binning

struct BinningSpec {
  double j_min = 0.0;
  double j_max = 1.0;
  int n_bins = kNumClasses;

  friend bool operator==(const BinningSpec&, const BinningSpec&) = default;
};

inline BinningSpec compute_binning(std::span<const double> jscs) {
  if (jscs.empty()) throw MorphoError(MorphoError::Code::DegenerateRange, "no performance values to bin");
  const auto [lo, hi] = std::minmax_element(jscs.begin(), jscs.end());
  if (!(*hi > *lo)) throw MorphoError(MorphoError::Code::DegenerateRange, "all performance values equal; cannot bin");
  return {*lo, *hi, kNumClasses};
}

/// floor(n*(jsc-j_min)/(j_max-j_min)) clamped to [0, n-1]; class n-1 is best.
inline int assign_class(double jsc, const BinningSpec& b) {
  const double t = static_cast<double>(b.n_bins) * (jsc - b.j_min) / (b.j_max - b.j_min);
  if (!(t >= 0.0)) return 0;
  if (t >= b.n_bins - 1) return b.n_bins - 1;
  return static_cast<int>(std::floor(t));
}

inline KeyValues binning_to_kv(const BinningSpec& b) {
  return {{"j_min", format_real(b.j_min)}, {"j_max", format_real(b.j_max)}, {"n_bins", std::to_string(b.n_bins)}};
}

inline BinningSpec binning_from_kv(const KeyValues& kv) {
  const auto m = to_map(kv);
  for (const char* k : {"j_min", "j_max", "n_bins"}) {
    if (!m.contains(k)) throw MorphoError(MorphoError::Code::BadManifest, std::string("binning sidecar missing key ") + k);
  }
  BinningSpec b{parse_real(m.at("j_min")), parse_real(m.at("j_max")), static_cast<int>(parse_int(m.at("n_bins")))};
  if (!(b.j_min < b.j_max) || b.n_bins != kNumClasses) {
    throw MorphoError(MorphoError::Code::BadManifest, "binning sidecar violates j_min < j_max, n_bins = 10");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Augmentation (laterally symmetric device: mirror and cyclic shift only)

inline Morphology mirror(const Morphology& m) {
  Grid<double> g(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) g(r, m.width() - 1 - c) = m(r, c);
  return Morphology(std::move(g));
}

/// Cyclic shift to the right by `shift` columns.
inline Morphology cyclic_shift(const Morphology& m, int shift) {
  Grid<double> g(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) g(r, wrap_col(c + shift, m.width())) = m(r, c);
  return Morphology(std::move(g));
}

inline std::vector<int> augment_shift_amounts(int width, int shifts) {
  std::vector<int> out;
  for (int k = 1; k <= shifts; ++k) out.push_back(static_cast<int>(static_cast<long long>(width) * k / (shifts + 1)));
  return out;
}

/// [m, mirror(m), shift_1(m), ..., shift_s(m)].
inline std::vector<Morphology> augment(const Morphology& m, int shifts) {
  if (shifts < 0) throw std::invalid_argument("shifts must be >= 0");
  std::vector<Morphology> out{m, mirror(m)};
  for (int s : augment_shift_amounts(m.width(), shifts)) out.push_back(cyclic_shift(m, s));
  return out;
}

// ---------------------------------------------------------------------------
// Interface detection

/// True where a 4-neighbour has the opposite phase. Columns wrap, rows do not.
inline Mask interface_mask(const BinaryMorphology& b) {
  const int h = b.height(), w = b.width();
  Mask out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto self = b.donor(r, c);
      bool edge = b.donor(r, wrap_col(c - 1, w)) != self || b.donor(r, wrap_col(c + 1, w)) != self;
      if (r > 0) edge = edge || b.donor(r - 1, c) != self;
      if (r + 1 < h) edge = edge || b.donor(r + 1, c) != self;
      out(r, c) = edge ? 1 : 0;
    }
  }
  return out;
}

/// 4-neighbour dilation applied `radius` times, same wrap convention.
inline Mask dilate(const Mask& m, int radius) {
  Mask cur = m;
  for (int it = 0; it < radius; ++it) {
    Mask next = cur;
    for (int r = 0; r < m.height; ++r) {
      for (int c = 0; c < m.width; ++c) {
        if (cur(r, c)) continue;
        bool hit = cur(r, wrap_col(c - 1, m.width)) || cur(r, wrap_col(c + 1, m.width));
        if (r > 0) hit = hit || cur(r - 1, c);
        if (r + 1 < m.height) hit = hit || cur(r + 1, c);
        next(r, c) = hit ? 1 : 0;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Dataset manifests

enum class Split { None, Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::None: break;
  }
  return "";
}

inline Split parse_split(std::string_view s) {
  if (s.empty()) return Split::None;
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw MorphoError(MorphoError::Code::BadManifest, "unknown split '" + std::string(s) + "'");
}

struct LabeledSample {
  std::string path;  // relative to the manifest directory unless absolute
  std::optional<double> jsc;
  std::optional<int> class_id;
  Split split = Split::None;
  std::string group;  // source snapshot id shared by all augmented variants

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string digest;
};

struct DatasetManifest {
  std::vector<LabeledSample> samples;
  std::optional<BinningSpec> binning;
  Provenance provenance;
  std::filesystem::path base_dir;  // directory sample paths resolve against

  [[nodiscard]] std::filesystem::path resolve(const LabeledSample& s) const {
    const std::filesystem::path p(s.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  [[nodiscard]] std::vector<std::size_t> indices_of(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }
};

inline std::filesystem::path binning_sidecar_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  return p.replace_extension(".binning");
}

inline std::filesystem::path params_sidecar_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  return p.replace_extension(".params");
}

inline std::string manifest_csv(const DatasetManifest& m) {
  std::string out = "path,jsc,class,split,group\n";
  for (const auto& s : m.samples) {
    if (s.path.find_first_of(",\n\"") != std::string::npos || s.group.find_first_of(",\n\"") != std::string::npos) {
      throw MorphoError(MorphoError::Code::BadManifest, "manifest fields may not contain commas, quotes or newlines: " + s.path);
    }
    out += s.path;
    out += ',';
    if (s.jsc) out += format_real(*s.jsc);
    out += ',';
    if (s.class_id) out += std::to_string(*s.class_id);
    out += ',';
    out += split_name(s.split);
    out += ',';
    out += s.group;
    out += '\n';
  }
  return out;
}

inline DatasetManifest parse_manifest_csv(std::istream& in, const std::string& origin = "<manifest>") {
  using C = MorphoError::Code;
  DatasetManifest m;
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "path,jsc,class,split,group") {
    throw MorphoError(C::BadManifest, origin + ": expected header 'path,jsc,class,split,group'");
  }
  int lineno = 1;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const auto where = origin + ":" + std::to_string(lineno);
    if (f.size() != 5) throw MorphoError(C::BadManifest, where + ": expected 5 fields");
    if (f[0].empty()) throw MorphoError(C::BadManifest, where + ": empty path");
    if (seen.contains(f[0])) throw MorphoError(C::BadManifest, where + ": duplicate path " + f[0]);
    seen[f[0]] = lineno;
    LabeledSample s;
    s.path = f[0];
    try {
      if (!f[1].empty()) s.jsc = parse_real(f[1]);
      if (!f[2].empty()) s.class_id = static_cast<int>(parse_int(f[2]));
    } catch (const std::invalid_argument& e) {
      throw MorphoError(C::BadManifest, where + ": " + e.what());
    }
    if (s.class_id && (*s.class_id < 0 || *s.class_id >= kNumClasses)) {
      throw MorphoError(C::BadManifest, where + ": class out of range");
    }
    s.split = parse_split(f[3]);
    s.group = f[4].empty() ? f[0] : f[4];
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  auto m = parse_manifest_csv(in, path.string());
  m.base_dir = path.parent_path();
  if (const auto side = binning_sidecar_path(path); std::filesystem::exists(side)) {
    m.binning = binning_from_kv(read_key_values(side));
  }
  if (const auto side = params_sidecar_path(path); std::filesystem::exists(side)) {
    const auto kv = to_map(read_key_values(side));
    if (auto it = kv.find("seed"); it != kv.end()) m.provenance.seed = static_cast<std::uint64_t>(parse_int(it->second));
    if (auto it = kv.find("digest"); it != kv.end()) m.provenance.digest = it->second;
  }
  return m;
}

/// Writes the CSV and, when binning is known, its sidecar.
inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const auto csv = manifest_csv(m);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  if (m.binning) write_key_values(binning_sidecar_path(path), binning_to_kv(*m.binning));
}

struct SplitFractions {
  double train = 0.7, val = 0.15, test = 0.15;
};

/// Group-aware seeded split: whole groups are shuffled and dealt out, so
/// augmented variants of one snapshot never straddle splits.
inline DatasetManifest split_dataset(DatasetManifest manifest, SplitFractions f, std::uint64_t seed) {
  if (manifest.samples.empty()) throw MorphoError(MorphoError::Code::EmptyManifest, "cannot split an empty manifest");
  if (!(f.train > 0 && f.val > 0 && f.test > 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be positive and sum to 1");
  }
  std::vector<std::string> groups;
  std::map<std::string, std::size_t> group_index;
  for (const auto& s : manifest.samples) {
    if (group_index.emplace(s.group, groups.size()).second) groups.push_back(s.group);
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = groups.size(); i > 1; --i) {
    std::swap(groups[i - 1], groups[rng() % i]);
  }
  const auto n = groups.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::floor(n * f.train + 0.5)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(n * f.val + 0.5)));
  std::map<std::string, Split> assignment;
  for (std::size_t i = 0; i < n; ++i) {
    assignment[groups[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
  }
  for (auto& s : manifest.samples) s.split = assignment.at(s.group);
  return manifest;
}

/// Refreezes bins from the training split's jsc values and reassigns every class.
/// A manifest without labels is returned unchanged.
inline DatasetManifest rebin_from_train(DatasetManifest manifest) {
  std::vector<double> basis;
  for (const auto& s : manifest.samples) {
    if (!s.jsc) return manifest;
    if (s.split == Split::Train) basis.push_back(*s.jsc);
  }
  if (basis.empty()) return manifest;
  manifest.binning = compute_binning(basis);
  for (auto& s : manifest.samples) s.class_id = assign_class(*s.jsc, *manifest.binning);
  return manifest;
}

}  // namespace dlsp
