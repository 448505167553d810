#pragma once

// Iterative radix-2 Cooley-Tukey FFT and a row/column 2D transform on square
// power-of-two grids. Forward is unnormalized, inverse divides by N^2.

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "dlsp/grid.hpp"

namespace dlsp {

using cplx = std::complex<double>;

class FftError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// Precomputed bit-reversal permutation and twiddles for one length.
class Fft1d {
 public:
  explicit Fft1d(int n) : n_(n), rev_(n), twiddle_(n / 2) {
    if (!is_power_of_two(n)) throw FftError("FFT length " + std::to_string(n) + " is not a power of two");
    int bits = 0;
    while ((1 << bits) < n) ++bits;
    for (int i = 0; i < n; ++i) {
      int r = 0;
      for (int b = 0; b < bits; ++b)
        if (i & (1 << b)) r |= 1 << (bits - 1 - b);
      rev_[i] = r;
    }
    for (int k = 0; k < n / 2; ++k) {
      const double a = -2.0 * std::numbers::pi * k / n;
      twiddle_[k] = {std::cos(a), std::sin(a)};
    }
  }

  [[nodiscard]] int size() const { return n_; }

  /// In-place transform of n contiguous values; `inverse` conjugates the
  /// twiddles but does not scale.
  void transform(cplx* x, bool inverse) const {
    for (int i = 0; i < n_; ++i)
      if (i < rev_[i]) std::swap(x[i], x[rev_[i]]);
    for (int len = 2; len <= n_; len <<= 1) {
      const int half = len >> 1;
      const int step = n_ / len;
      for (int start = 0; start < n_; start += len) {
        for (int j = 0; j < half; ++j) {
          const cplx w = inverse ? std::conj(twiddle_[j * step]) : twiddle_[j * step];
          const cplx u = x[start + j];
          const cplx v = x[start + j + half] * w;
          x[start + j] = u + v;
          x[start + j + half] = u - v;
        }
      }
    }
  }

 private:
  int n_;
  std::vector<int> rev_;
  std::vector<cplx> twiddle_;
};

/// 2D transform plan for N x N grids.
class Fft2d {
 public:
  explicit Fft2d(int n) : plan_(n), column_(n) {}

  [[nodiscard]] int size() const { return plan_.size(); }

  void forward(Grid<cplx>& g) const { run(g, false); }

  void inverse(Grid<cplx>& g) const {
    run(g, true);
    const double scale = 1.0 / (static_cast<double>(size()) * size());
    for (auto& v : g.data) v *= scale;
  }

 private:
  void run(Grid<cplx>& g, bool inv) const {
    const int n = size();
    if (g.height != n || g.width != n) {
      throw FftError("grid is " + std::to_string(g.height) + "x" + std::to_string(g.width) + ", plan is " + std::to_string(n) + "x" + std::to_string(n));
    }
    for (int r = 0; r < n; ++r) plan_.transform(&g.data[static_cast<std::size_t>(r) * n], inv);
    for (int c = 0; c < n; ++c) {
      for (int r = 0; r < n; ++r) column_[r] = g(r, c);
      plan_.transform(column_.data(), inv);
      for (int r = 0; r < n; ++r) g(r, c) = column_[r];
    }
  }

  Fft1d plan_;
  mutable std::vector<cplx> column_;  // scratch; a plan is not shared across threads
};

inline void check_fft_grid(const Grid<cplx>& g) {
  if (g.height != g.width) throw FftError("FFT grid must be square");
  if (!is_power_of_two(g.height)) throw FftError("FFT side " + std::to_string(g.height) + " is not a power of two");
}

inline Grid<cplx> fft2(Grid<cplx> g) {
  check_fft_grid(g);
  Fft2d(g.height).forward(g);
  return g;
}

inline Grid<cplx> ifft2(Grid<cplx> g) {
  check_fft_grid(g);
  Fft2d(g.height).inverse(g);
  return g;
}

}  // namespace dlsp
