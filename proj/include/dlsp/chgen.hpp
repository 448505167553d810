#pragma once

// Cahn-Hilliard morphology generator:
//   dphi/dt = M lap(phi^3 - phi - eps2 lap phi)
// integrated with a linearly stabilized semi-implicit Fourier-spectral step
// on a periodic grid_n x grid_n domain, then centre-cropped to gray images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dlsp/fft.hpp"
#include "dlsp/kvfile.hpp"
#include "dlsp/morpho.hpp"

namespace dlsp {

class ChError : public std::runtime_error {
 public:
  enum class Code { InvalidParams, NumericalBlowup };
  ChError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  [[nodiscard]] Code code() const noexcept { return code_; }

 private:
  Code code_;
};

inline std::vector<long> default_snapshot_steps() {
  std::vector<long> s;
  for (int k = 0; k <= 6; ++k) s.push_back(100L << k);
  return s;
}

inline constexpr double kBlendMeans[] = {-0.2, -0.1, 0.0, 0.1, 0.2};

/// Blend mean picked deterministically from {-0.2,...,0.2} by run seed.
inline double default_blend_mean(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return kBlendMeans[rng() % std::size(kBlendMeans)];
}

struct ChParams {
  int grid_n = 128;
  double eps2 = 1.0;
  double mobility = 1.0;
  double dt = 0.1;
  double stabilization = 2.0;
  double blend_mean = 0.0;
  double noise_amp = 0.1;
  std::uint64_t seed = 0;
  std::vector<long> snapshot_steps = default_snapshot_steps();
  int crop = kDefaultSide;

  void validate() const {
    auto fail = [](const std::string& m) { throw ChError(ChError::Code::InvalidParams, m); };
    if (!is_power_of_two(grid_n) || grid_n < 32) fail("grid_n must be a power of two >= 32");
    if (!(dt > 0)) fail("dt must be positive");
    if (!(eps2 > 0)) fail("eps2 must be positive");
    if (!(mobility > 0)) fail("mobility must be positive");
    if (!(stabilization >= 0)) fail("stabilization must be non-negative");
    if (!(noise_amp >= 0) || !(std::abs(blend_mean) + noise_amp < 1.0)) fail("need |blend_mean| + noise_amp < 1");
    if (crop < 3 || crop > grid_n) fail("crop must lie in [3, grid_n]");
    for (std::size_t i = 0; i < snapshot_steps.size(); ++i) {
      if (snapshot_steps[i] < 0 || (i > 0 && snapshot_steps[i] <= snapshot_steps[i - 1])) {
        fail("snapshot_steps must be non-negative and strictly increasing");
      }
    }
  }

  [[nodiscard]] KeyValues to_kv() const {
    std::string steps;
    for (std::size_t i = 0; i < snapshot_steps.size(); ++i) steps += (i ? "," : "") + std::to_string(snapshot_steps[i]);
    return {{"grid_n", std::to_string(grid_n)},       {"eps2", format_real(eps2)},
            {"mobility", format_real(mobility)},      {"dt", format_real(dt)},
            {"stabilization", format_real(stabilization)}, {"blend_mean", format_real(blend_mean)},
            {"noise_amp", format_real(noise_amp)},    {"seed", std::to_string(seed)},
            {"snapshot_steps", steps},                {"crop", std::to_string(crop)}};
  }
};

struct ChState {
  Grid<double> phi;
  long step = 0;
  double time = 0.0;
};

inline double mean(const Grid<double>& g) {
  double s = 0;
  for (double v : g.data) s += v;
  return s / static_cast<double>(g.size());
}

/// Holds the FFT plan and spectral multipliers for one parameter set.
class ChIntegrator {
 public:
  explicit ChIntegrator(const ChParams& p) : p_((p.validate(), p)), fft_(p.grid_n), k2_(p.grid_n, p.grid_n), buf_(p.grid_n, p.grid_n) {
    const int n = p.grid_n;
    for (int r = 0; r < n; ++r) {
      const double ky = wavenumber(r, n);
      for (int c = 0; c < n; ++c) {
        const double kx = wavenumber(c, n);
        k2_(r, c) = kx * kx + ky * ky;
      }
    }
  }

  [[nodiscard]] const ChParams& params() const { return p_; }

  [[nodiscard]] ChState init() const {
    ChState s{Grid<double>(p_.grid_n, p_.grid_n, p_.blend_mean), 0, 0.0};
    if (p_.noise_amp > 0) {
      std::mt19937_64 rng(p_.seed);
      std::uniform_real_distribution<double> u(-p_.noise_amp, p_.noise_amp);
      for (auto& v : s.phi.data) v = p_.blend_mean + u(rng);
    }
    return s;
  }

  /// One stabilized semi-implicit step. phi and g = phi^3 - phi are packed
  /// into one complex transform (phi + i g) and separated by Hermitian symmetry.
  void step(ChState& s) {
    const int n = p_.grid_n;
    for (std::size_t i = 0; i < buf_.size(); ++i) {
      const double v = s.phi.data[i];
      buf_.data[i] = {v, v * v * v - v};
    }
    fft_.forward(buf_);
    const double dtm = p_.dt * p_.mobility;
    Grid<cplx> next(n, n);
    for (int r = 0; r < n; ++r) {
      const int rr = (n - r) % n;
      for (int c = 0; c < n; ++c) {
        const int cc = (n - c) % n;
        const cplx z = buf_(r, c);
        const cplx zc = std::conj(buf_(rr, cc));
        const cplx phi_hat = 0.5 * (z + zc);
        const cplx g_hat = cplx(0.0, -0.5) * (z - zc);
        const double k2 = k2_(r, c);
        const double lhs = 1.0 + dtm * p_.stabilization * k2;
        next(r, c) = (lhs * phi_hat - dtm * k2 * g_hat) / (lhs + dtm * p_.eps2 * k2 * k2);
      }
    }
    next(0, 0) = {buf_(0, 0).real(), 0.0};
    fft_.inverse(next);
    double peak = 0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      s.phi.data[i] = next.data[i].real();
      peak = std::max(peak, std::abs(s.phi.data[i]));
    }
    ++s.step;
    s.time = static_cast<double>(s.step) * p_.dt;
    if (!(peak <= 10.0)) {
      throw ChError(ChError::Code::NumericalBlowup, "Cahn-Hilliard blow-up at step " + std::to_string(s.step) + " (max|phi| = " + std::to_string(peak) + ")");
    }
  }

  /// Discrete Ginzburg-Landau energy sum[(phi^2-1)^2/4 + eps2 |grad phi|^2 / 2],
  /// gradient term evaluated spectrally (consistent with the stepper).
  [[nodiscard]] double energy(const Grid<double>& phi) {
    double bulk = 0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
      const double v = phi.data[i];
      bulk += 0.25 * (v * v - 1.0) * (v * v - 1.0);
      buf_.data[i] = {v, 0.0};
    }
    fft_.forward(buf_);
    double grad = 0;
    for (std::size_t i = 0; i < buf_.size(); ++i) grad += k2_.data[i] * std::norm(buf_.data[i]);
    grad /= static_cast<double>(phi.size());
    return bulk + 0.5 * p_.eps2 * grad;
  }

 private:
  static double wavenumber(int idx, int n) {
    const int j = idx < n / 2 ? idx : idx - n;
    return 2.0 * std::numbers::pi * j / n;
  }

  ChParams p_;
  Fft2d fft_;
  Grid<double> k2_;
  Grid<cplx> buf_;
};

inline ChState ch_init(const ChParams& p) { return ChIntegrator(p).init(); }

inline ChState ch_step(ChState s, const ChParams& p) {
  ChIntegrator(p).step(s);
  return s;
}

/// Centre crop of phi mapped to gray (phi+1)/2 clamped to [0,1].
inline Morphology phase_to_morphology(const Grid<double>& phi, int crop) {
  const int r0 = (phi.height - crop) / 2, c0 = (phi.width - crop) / 2;
  Grid<double> g(crop, crop);
  for (int r = 0; r < crop; ++r)
    for (int c = 0; c < crop; ++c) g(r, c) = std::clamp((phi(r0 + r, c0 + c) + 1.0) * 0.5, 0.0, 1.0);
  return Morphology(std::move(g));
}

struct ChSnapshot {
  Morphology morphology;
  long step = 0;
  std::string group;  // "<seed>_<snapshot index>"
};

inline std::vector<ChSnapshot> ch_run(const ChParams& p) {
  ChIntegrator integ(p);
  ChState s = integ.init();
  std::vector<ChSnapshot> out;
  for (std::size_t k = 0; k < p.snapshot_steps.size(); ++k) {
    while (s.step < p.snapshot_steps[k]) integ.step(s);
    out.push_back({phase_to_morphology(s.phi, p.crop), s.step, std::to_string(p.seed) + "_" + std::to_string(k)});
  }
  return out;
}

}  // namespace dlsp
