#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dlsp/oracle.hpp"
#include "dlsp/presets.hpp"
#include "test_util.hpp"

using namespace dlsp;

namespace {

BinaryMorphology mask_of(const Grid<double>& g) { return binarize(Morphology(g)); }

/// Donor slab of t free rows below one absorbing interface row.
BinaryMorphology slab(int t, int h = 101, int w = 101) { return mask_of(presets::bilayer_slab(t + 1, h, w)); }

BinaryMorphology blobby(std::uint64_t seed, int n = 64) {
  // Smooth random field: box-average white noise, then threshold.
  const auto noise = test::random_grid(n, n, seed);
  Grid<double> g(n, n);
  const int r = 3;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      int k = 0;
      for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) {
          const int ii = i + di;
          if (ii < 0 || ii >= n) continue;
          s += noise(ii, wrap_col(j + dj, n));
          ++k;
        }
      g(i, j) = s / k > 0.5 ? 1.0 : 0.0;
    }
  return mask_of(g);
}

}  // namespace

TEST(OracleParams, Validation) {
  OracleParams p;
  EXPECT_NO_THROW(p.validate());
  p.diffusion_length = 0;
  EXPECT_THROW(p.validate(), OracleError);
  p = OracleParams{};
  p.solver_tol = 1e-3;
  EXPECT_THROW(p.validate(), OracleError);
}

TEST(Exciton, AllDonorHasNoLoss) {
  const auto s = solve_exciton(BinaryMorphology(20, 20, true), OracleParams{});
  EXPECT_EQ(s.eta_diss, 0.0);
  EXPECT_TRUE(s.interface_flux.empty());
  for (double v : s.density.data) EXPECT_EQ(v, 1.0);
}

TEST(Exciton, NoDonorGivesZero) {
  const auto s = solve_exciton(BinaryMorphology(20, 20, false), OracleParams{});
  EXPECT_EQ(s.eta_diss, 0.0);
  EXPECT_TRUE(s.interface_flux.empty());
}

TEST(Exciton, CheckerboardDissociatesEverything) {
  BinaryMorphology b(16, 16);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) b.donor(r, c) = (r + c) % 2;
  const auto s = solve_exciton(b, OracleParams{});
  EXPECT_EQ(s.eta_diss, 1.0);
  EXPECT_EQ(s.interface_flux.size(), 128u);
}

TEST(Exciton, BilayerMatchesSlabSolution) {
  const OracleParams p;
  for (int t : {20, 50, 80}) {
    const auto s = solve_exciton(slab(t), p);
    const double exact = p.diffusion_length / t * std::tanh(t / p.diffusion_length);
    EXPECT_NEAR(s.eta_diss, exact, 0.05 * exact) << "t=" << t;
  }
}

TEST(Exciton, FluxConservationAndMaximumPrinciple) {
  const OracleParams p;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto b = blobby(seed);
    const auto s = solve_exciton(b, p);
    double flux = 0, density = 0;
    for (const auto& f : s.interface_flux) flux += f.flux;
    for (double v : s.density.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, p.generation);
      density += v;
    }
    const double total = p.generation * static_cast<double>(b.donor_count());
    EXPECT_LE(std::abs(flux + density - total), 1e-6 * total) << seed;
    EXPECT_GE(s.eta_diss, 0.0);
    EXPECT_LE(s.eta_diss, 1.0);
  }
}

TEST(Exciton, DivergenceCarriesIterationCount) {
  OracleParams p;
  p.solver_max_iters = 2;
  try {
    (void)solve_exciton(slab(50), p);
    FAIL() << "expected divergence";
  } catch (const OracleError& e) {
    EXPECT_EQ(e.code(), OracleError::Code::SolverDiverged);
    EXPECT_EQ(e.iterations(), 2);
    EXPECT_NE(std::string(e.what()).find("2 iterations"), std::string::npos);
  }
}

TEST(Transport, ElectrodeDistances) {
  Mask m(4, 3, 1);
  m(1, 1) = 0;
  const auto d = electrode_distance(m, 3);
  EXPECT_EQ(d(3, 0), 0);
  EXPECT_EQ(d(0, 1), 4);
  EXPECT_EQ(d(1, 1), -1);
}

TEST(Transport, BilayerSurvival) {
  const OracleParams p;
  const auto b = mask_of(presets::bilayer_slab(50, 100, 101));
  const auto ex = solve_exciton(b, p);
  const auto tr = transport_survival(b, p, ex.interface_flux);
  for (double s : tr.per_flux) EXPECT_NEAR(s, std::exp(-1.0), 0.1 * std::exp(-1.0));
  EXPECT_NEAR(tr.eta_transport, std::exp(-1.0), 0.1 * std::exp(-1.0));
}

TEST(Transport, IslandsAreLost) {
  BinaryMorphology b(30, 30);
  for (int r = 10; r < 16; ++r)
    for (int c = 10; c < 16; ++c) b.donor(r, c) = 1;
  const OracleParams p;
  const auto ex = solve_exciton(b, p);
  const auto tr = transport_survival(b, p, ex.interface_flux);
  ASSERT_FALSE(tr.per_flux.empty());
  for (double s : tr.per_flux) EXPECT_EQ(s, 0.0);
  EXPECT_EQ(evaluate_binary(b, p).jsc, 0.0);
}

TEST(Transport, InfiniteTransportLength) {
  OracleParams p;
  p.transport_length = 1e9;
  const auto b = mask_of(presets::columns(6, 40, 48));
  const auto ex = solve_exciton(b, p);
  const auto tr = transport_survival(b, p, ex.interface_flux);
  for (double s : tr.per_flux) EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Transport, BlockingStripeKillsCollection) {
  const OracleParams p;
  const auto open = mask_of(presets::columns(4));
  const auto blocked = mask_of(presets::blocking_layer());
  EXPECT_GT(evaluate_binary(open, p).eta_transport, 0.1);
  EXPECT_EQ(evaluate_binary(blocked, p).eta_transport, 0.0);
  EXPECT_EQ(evaluate_binary(blocked, p).jsc, 0.0);
}

TEST(Evaluate, TrivialGrids) {
  const OracleParams p;
  EXPECT_EQ(evaluate(Morphology(101, 101, 1.0), p).jsc, 0.0);
  EXPECT_EQ(evaluate(Morphology(101, 101, 0.0), p).jsc, 0.0);
}

TEST(Evaluate, ColumnarSweepNonIncreasing) {
  const OracleParams p;
  double prev = std::numeric_limits<double>::infinity();
  for (int w = 2; w <= 50; ++w) {
    const auto b = mask_of(presets::columns(w));
    EXPECT_EQ(b.donor_count(), 50u * 101u) << "w=" << w;
    const double j = evaluate_binary(b, p).jsc;
    EXPECT_LE(j, prev) << "w=" << w;
    prev = j;
  }
}

TEST(Evaluate, ProxyFactorisation) {
  const OracleParams p;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto b = blobby(seed);
    const auto r = evaluate_binary(b, p);
    const double hw = static_cast<double>(b.height()) * b.width();
    EXPECT_NEAR(r.proxy, r.eta_diss * r.eta_transport * static_cast<double>(b.donor_count()) / hw, 1e-9);
    EXPECT_NEAR(r.jsc, p.j_scale * r.proxy, 1e-12);
    EXPECT_GE(r.proxy, 0.0);
    EXPECT_LE(r.proxy, 1.0);
  }
}

TEST(Evaluate, MirrorInvariance) {
  const OracleParams p;
  for (std::uint64_t seed = 5; seed <= 8; ++seed) {
    const auto b = blobby(seed);
    const auto a = evaluate_binary(b, p);
    const auto m = evaluate(mirror(b.to_morphology()), p);
    EXPECT_NEAR(a.proxy, m.proxy, 1e-6);
    EXPECT_NEAR(a.jsc, m.jsc, 1e-6);
  }
}

TEST(Evaluate, Deterministic) {
  const auto b = blobby(3);
  const auto a = evaluate_binary(b, OracleParams{});
  const auto c = evaluate_binary(b, OracleParams{});
  EXPECT_EQ(a.jsc, c.jsc);
  EXPECT_EQ(a.solver_iterations, c.solver_iterations);
}

TEST(Label, ThreeSampleBinning) {
  const auto dir = test::temp_dir("label");
  const OracleParams p;
  write_pgm(dir / "zero.pgm", Grid<double>(101, 101, 1.0));
  write_pgm(dir / "best.pgm", presets::columns(4));
  write_pgm(dir / "mid.pgm", presets::bilayer());
  DatasetManifest m;
  m.base_dir = dir;
  for (const char* n : {"zero.pgm", "best.pgm", "mid.pgm"}) m.samples.push_back({n, {}, {}, Split::None, n});
  const auto labelled = label_dataset(m, p, 2);
  EXPECT_EQ(*labelled.samples[0].class_id, 0);
  EXPECT_EQ(*labelled.samples[1].class_id, 9);
  const int mid = *labelled.samples[2].class_id;
  EXPECT_GT(mid, 0);
  EXPECT_LT(mid, 9);
  EXPECT_EQ(labelled.binning->j_min, 0.0);
  const auto again = label_dataset(m, p, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(again.samples[i], labelled.samples[i]);
  std::filesystem::remove_all(dir);
}

TEST(Label, ReportsOffendingPath) {
  DatasetManifest m;
  m.base_dir = "/nonexistent";
  m.samples.push_back({"missing.pgm", {}, {}, Split::None, "g"});
  try {
    (void)label_dataset(m, OracleParams{}, 1);
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("missing.pgm"), std::string::npos);
  }
}
