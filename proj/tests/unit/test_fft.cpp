#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "dlsp/fft.hpp"

using namespace dlsp;

namespace {

Grid<cplx> random_complex(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Grid<cplx> g(n, n);
  for (auto& v : g.data) v = {d(rng), d(rng)};
  return g;
}

// O(N^4) reference transform.
Grid<cplx> direct_dft(const Grid<cplx>& x) {
  const int n = x.height;
  Grid<cplx> out(n, n);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      cplx acc{0, 0};
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) acc += x(r, c) * std::polar(1.0, -2.0 * std::numbers::pi * (double(u) * r + double(v) * c) / n);
      out(u, v) = acc;
    }
  return out;
}

double max_abs_diff(const Grid<cplx>& a, const Grid<cplx>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST(Fft, MatchesDirectDft) {
  for (int n : {1, 2, 4, 8, 16}) {
    const auto x = random_complex(n, static_cast<std::uint64_t>(n));
    EXPECT_LT(max_abs_diff(fft2(x), direct_dft(x)), 1e-10 * n * n) << n;
  }
}

TEST(Fft, InverseRoundTrip) {
  const auto x = random_complex(128, 5);
  EXPECT_LT(max_abs_diff(ifft2(fft2(x)), x), 1e-12);
}

TEST(Fft, ImpulseAndConstant) {
  Grid<cplx> delta(8, 8);
  delta(0, 0) = 1.0;
  for (const auto& v : fft2(delta).data) EXPECT_NEAR(std::abs(v - cplx(1, 0)), 0.0, 1e-14);
  const auto flat = fft2(Grid<cplx>(8, 8, cplx(2, 0)));
  EXPECT_NEAR(flat(0, 0).real(), 128.0, 1e-12);
  for (std::size_t i = 1; i < flat.size(); ++i) EXPECT_NEAR(std::abs(flat.data[i]), 0.0, 1e-12);
}

TEST(Fft, Parseval) {
  const auto x = random_complex(32, 9);
  const auto X = fft2(x);
  double ex = 0, eX = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ex += std::norm(x.data[i]);
    eX += std::norm(X.data[i]);
  }
  EXPECT_NEAR(eX / (32.0 * 32.0), ex, 1e-9 * ex);
}

TEST(Fft, RejectsBadSizes) {
  EXPECT_THROW(fft2(Grid<cplx>(6, 6)), FftError);
  EXPECT_THROW(fft2(Grid<cplx>(8, 4)), FftError);
  EXPECT_THROW(Fft1d(12), FftError);
  Fft2d plan(8);
  Grid<cplx> wrong(16, 16);
  EXPECT_THROW(plan.forward(wrong), FftError);
}
