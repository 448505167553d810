#pragma once

// Reduced-order device oracle. Excitons generated uniformly in the donor
// diffuse and decay (L_D^2 lap n - n + G = 0) and dissociate instantly at
// interface donor pixels; the dissociated flux is then discounted by the
// electrode path lengths of both carriers, exp(-(d_h + d_e) / L_t).

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlsp/morpho.hpp"
#include "dlsp/parallel.hpp"

namespace dlsp {

class OracleError : public std::runtime_error {
 public:
  enum class Code { InvalidParams, SolverDiverged };
  OracleError(Code code, const std::string& what, int iterations = 0)
      : std::runtime_error(what), code_(code), iterations_(iterations) {}
  [[nodiscard]] Code code() const noexcept { return code_; }
  [[nodiscard]] int iterations() const noexcept { return iterations_; }

 private:
  Code code_;
  int iterations_;
};

struct OracleParams {
  double diffusion_length = 10.0;   // L_D, pixels
  double transport_length = 100.0;  // L_t, pixels
  double generation = 1.0;          // G
  double solver_tol = 1e-8;
  int solver_max_iters = 20000;
  double j_scale = 14.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw OracleError(OracleError::Code::InvalidParams, m); };
    if (!(diffusion_length > 0)) fail("L_D must be positive");
    if (!(transport_length > 0)) fail("L_t must be positive");
    if (!(generation > 0)) fail("G must be positive");
    if (!(solver_tol > 0 && solver_tol <= 1e-4)) fail("solver_tol must lie in (0, 1e-4]");
    if (solver_max_iters < 1) fail("solver_max_iters must be >= 1");
  }
};

struct InterfaceFlux {
  int pixel;  // row-major index of an interface donor pixel
  double flux;
};

struct ExcitonSolution {
  Grid<double> density;  // n on donor pixels, 0 elsewhere
  double eta_diss = 0.0;
  std::vector<InterfaceFlux> interface_flux;  // ascending pixel order
  int iterations = 0;
};

/// Interface donor pixels: donor pixels with an acceptor 4-neighbour.
inline Mask interface_donor_mask(const BinaryMorphology& b) {
  Mask iface = interface_mask(b);
  for (std::size_t i = 0; i < iface.size(); ++i) iface.data[i] = iface.data[i] && b.donor.data[i];
  return iface;
}

namespace detail {

/// Calls f(neighbour index) for the 4-neighbours of (r, c): lateral wrap,
/// no wrap across the electrodes.
template <class F>
void for_each_neighbour(int r, int c, int h, int w, F&& f) {
  f(r * w + wrap_col(c - 1, w));
  f(r * w + wrap_col(c + 1, w));
  if (r > 0) f((r - 1) * w + c);
  if (r + 1 < h) f((r + 1) * w + c);
}

}  // namespace detail

/// Jacobi-preconditioned conjugate gradients on the free donor pixels.
inline ExcitonSolution solve_exciton(const BinaryMorphology& b, const OracleParams& p) {
  p.validate();
  const int h = b.height(), w = b.width();
  const double l2 = p.diffusion_length * p.diffusion_length;
  const double gen = p.generation;
  const Mask iface = interface_donor_mask(b);

  ExcitonSolution out;
  out.density = Grid<double>(h, w);
  const std::size_t n_donor = b.donor_count();
  if (n_donor == 0) return out;

  std::vector<int> unknown_of(static_cast<std::size_t>(h) * w, -1);
  std::vector<int> pixel_of;
  for (int i = 0; i < h * w; ++i) {
    if (b.donor.data[i] && !iface.data[i]) {
      unknown_of[i] = static_cast<int>(pixel_of.size());
      pixel_of.push_back(i);
    }
  }
  const std::size_t n = pixel_of.size();
  std::vector<double> x(n, 0.0);

  if (n == n_donor) {
    // No absorbing pixels: the Neumann/periodic problem has n = G exactly.
    std::fill(x.begin(), x.end(), gen);
  } else if (n > 0) {
    // Row structure: diag = 1 + L^2 * degree, off-diagonal -L^2 to free neighbours.
    std::vector<double> diag(n);
    std::vector<std::array<int, 4>> nbr(n);
    for (std::size_t u = 0; u < n; ++u) {
      const int pix = pixel_of[u];
      int deg = 0, k = 0;
      nbr[u].fill(-1);
      detail::for_each_neighbour(pix / w, pix % w, h, w, [&](int q) {
        ++deg;
        if (unknown_of[q] >= 0) nbr[u][k++] = unknown_of[q];
      });
      diag[u] = 1.0 + l2 * deg;
    }
    auto apply = [&](const std::vector<double>& v, std::vector<double>& out_v) {
      for (std::size_t u = 0; u < n; ++u) {
        double s = diag[u] * v[u];
        for (int q : nbr[u])
          if (q >= 0) s -= l2 * v[q];
        out_v[u] = s;
      }
    };
    std::vector<double> r(n, gen), z(n), d(n), ad(n);
    const double bnorm = gen * std::sqrt(static_cast<double>(n));
    for (std::size_t u = 0; u < n; ++u) z[u] = r[u] / diag[u];
    d = z;
    double rz = 0;
    for (std::size_t u = 0; u < n; ++u) rz += r[u] * z[u];
    int it = 0;
    for (;;) {
      double rr = 0;
      for (double v : r) rr += v * v;
      if (std::sqrt(rr) <= p.solver_tol * bnorm) break;
      if (it >= p.solver_max_iters) {
        throw OracleError(OracleError::Code::SolverDiverged,
                          "exciton CG did not converge in " + std::to_string(it) + " iterations (relative residual " +
                              std::to_string(std::sqrt(rr) / bnorm) + ")",
                          it);
      }
      apply(d, ad);
      double dad = 0;
      for (std::size_t u = 0; u < n; ++u) dad += d[u] * ad[u];
      const double alpha = rz / dad;
      for (std::size_t u = 0; u < n; ++u) {
        x[u] += alpha * d[u];
        r[u] -= alpha * ad[u];
        z[u] = r[u] / diag[u];
      }
      double rz_next = 0;
      for (std::size_t u = 0; u < n; ++u) rz_next += r[u] * z[u];
      const double beta = rz_next / rz;
      rz = rz_next;
      for (std::size_t u = 0; u < n; ++u) d[u] = z[u] + beta * d[u];
      ++it;
    }
    out.iterations = it;
  }

  double total = 0;
  for (std::size_t u = 0; u < n; ++u) {
    const double v = std::clamp(x[u], 0.0, gen);
    out.density.data[pixel_of[u]] = v;
    total += v;
  }
  out.eta_diss = std::clamp(1.0 - total / (gen * static_cast<double>(n_donor)), 0.0, 1.0);

  for (int i = 0; i < h * w; ++i) {
    if (!iface.data[i]) continue;
    double f = gen;
    detail::for_each_neighbour(i / w, i % w, h, w, [&](int q) {
      if (unknown_of[q] >= 0) f += l2 * out.density.data[q];
    });
    out.interface_flux.push_back({i, f});
  }
  return out;
}

/// Multi-source BFS distance inside `phase` (4-connected, lateral wrap) from
/// the phase pixels of row `source_row`. Unreachable pixels get -1.
inline Grid<int> electrode_distance(const Mask& phase, int source_row) {
  const int h = phase.height, w = phase.width;
  Grid<int> dist(h, w, -1);
  std::deque<int> queue;
  for (int c = 0; c < w; ++c) {
    if (phase(source_row, c)) {
      dist(source_row, c) = 0;
      queue.push_back(source_row * w + c);
    }
  }
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    const int d = dist.data[i];
    detail::for_each_neighbour(i / w, i % w, h, w, [&](int q) {
      if (phase.data[q] && dist.data[q] < 0) {
        dist.data[q] = d + 1;
        queue.push_back(q);
      }
    });
  }
  return dist;
}

struct TransportResult {
  Grid<double> survival;           // surv_i at interface donor pixels, 0 elsewhere
  std::vector<double> per_flux;    // surv_i aligned with the interface_flux list
  double eta_transport = 0.0;
};

inline TransportResult transport_survival(const BinaryMorphology& b, const OracleParams& p,
                                          const std::vector<InterfaceFlux>& interface_flux) {
  p.validate();
  const int h = b.height(), w = b.width();
  Mask acceptor(h, w);
  for (std::size_t i = 0; i < acceptor.size(); ++i) acceptor.data[i] = b.donor.data[i] ? 0 : 1;
  const Grid<int> hole = electrode_distance(b.donor, h - 1);
  const Grid<int> electron = electrode_distance(acceptor, 0);

  TransportResult out;
  out.survival = Grid<double>(h, w);
  double collected = 0, total = 0;
  for (const auto& [pix, flux] : interface_flux) {
    const int d_h = hole.data[pix];
    int d_e = -1;
    detail::for_each_neighbour(pix / w, pix % w, h, w, [&](int q) {
      if (acceptor.data[q] && electron.data[q] >= 0 && (d_e < 0 || electron.data[q] < d_e)) d_e = electron.data[q];
    });
    const double surv = (d_h >= 0 && d_e >= 0) ? std::exp(-(d_h + d_e) / p.transport_length) : 0.0;
    out.survival.data[pix] = surv;
    out.per_flux.push_back(surv);
    collected += flux * surv;
    total += flux;
  }
  out.eta_transport = total > 0 ? std::clamp(collected / total, 0.0, 1.0) : 0.0;
  return out;
}

struct OracleResult {
  double jsc = 0.0;
  double proxy = 0.0;
  double eta_diss = 0.0;
  double eta_transport = 0.0;
  std::vector<InterfaceFlux> interface_flux;
  int solver_iterations = 0;
};

inline OracleResult evaluate_binary(const BinaryMorphology& b, const OracleParams& p) {
  const auto ex = solve_exciton(b, p);
  const auto tr = transport_survival(b, p, ex.interface_flux);
  double collected = 0;
  for (std::size_t i = 0; i < ex.interface_flux.size(); ++i) collected += ex.interface_flux[i].flux * tr.per_flux[i];
  OracleResult r;
  r.proxy = collected / (p.generation * static_cast<double>(b.height()) * b.width());
  r.jsc = p.j_scale * r.proxy;
  r.eta_diss = ex.eta_diss;
  r.eta_transport = tr.eta_transport;
  r.interface_flux = ex.interface_flux;
  r.solver_iterations = ex.iterations;
  return r;
}

inline OracleResult evaluate(const Morphology& m, const OracleParams& p) { return evaluate_binary(binarize(m, 0.5), p); }

/// Fills jsc for every sample, freezes bins from the training split's range
/// (the whole manifest when nothing is split yet) and assigns classes.
inline DatasetManifest label_dataset(DatasetManifest manifest, const OracleParams& p, int jobs = 1) {
  p.validate();
  auto& samples = manifest.samples;
  std::vector<double> jsc(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const auto path = manifest.resolve(samples[i]);
    try {
      jsc[i] = evaluate(read_pgm(path), p).jsc;
    } catch (const OracleError& e) {
      throw OracleError(e.code(), path.string() + ": " + e.what(), e.iterations());
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
  });
  std::vector<double> basis;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].jsc = jsc[i];
    if (samples[i].split == Split::Train) basis.push_back(jsc[i]);
  }
  if (basis.empty()) basis = jsc;
  manifest.binning = compute_binning(basis);
  for (auto& s : samples) s.class_id = assign_class(*s.jsc, *manifest.binning);
  return manifest;
}

}  // namespace dlsp
