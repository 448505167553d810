#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlsp/grid.hpp"
#include "dlsp/kvfile.hpp"
#include "dlsp/morpho.hpp"
#include "dlsp/nn/train.hpp"
#include "dlsp/oracle.hpp"
#include "dlsp/parallel.hpp"

namespace dlsp {

struct PbilParams {
  int n = 100;
  int n_b = 10;
  double l_r = 0.1;
  double mutation_prob = 0.02;
  double mutation_shift = 0.05;
  double p_min = 0.01;
  double p_max = 0.99;
  int smoothing_radius = 1;
  int max_iters = 200;
  double improvement_tol = 1e-3;
  int improvement_window = 20;
  double delta = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("invalid PBIL parameter: " + what); };
    if (!(l_r > 0.0 && l_r <= 1.0)) bad("l_r must be in (0, 1]");
    if (n_b <= 0 || n_b >= n) bad("need 0 < n_b < n");
    if (!(p_min > 0.0 && p_min < p_max && p_max < 1.0)) bad("clamp bounds must satisfy 0 < p_min < p_max < 1");
    if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) bad("mutation_prob must be in [0, 1]");
    if (!(mutation_shift >= 0.0 && mutation_shift <= 1.0)) bad("mutation_shift must be in [0, 1]");
    if (smoothing_radius < 0) bad("smoothing_radius must be >= 0");
    if (max_iters < 0) bad("max_iters must be >= 0");
    if (improvement_window < 1) bad("improvement_window must be >= 1");
    if (!(delta > 0.0 && delta < 0.5)) bad("delta must be in (0, 0.5)");
  }

  [[nodiscard]] KeyValues to_kv() const {
    return {{"n", std::to_string(n)},
            {"n_b", std::to_string(n_b)},
            {"l_r", format_real(l_r)},
            {"mutation_prob", format_real(mutation_prob)},
            {"mutation_shift", format_real(mutation_shift)},
            {"p_min", format_real(p_min)},
            {"p_max", format_real(p_max)},
            {"smoothing_radius", std::to_string(smoothing_radius)},
            {"max_iters", std::to_string(max_iters)},
            {"improvement_tol", format_real(improvement_tol)},
            {"improvement_window", std::to_string(improvement_window)},
            {"delta", format_real(delta)},
            {"seed", std::to_string(seed)}};
  }
};

struct PbilRecord {
  int iteration = 0;
  double best_fitness = 0.0;
  double elite_mean = 0.0;
};

struct PbilState {
  Grid<double> p;
  int iteration = 0;
  BinaryMorphology best_sample;
  double best_fitness = -std::numeric_limits<double>::infinity();
  std::vector<PbilRecord> history;  // history[k] describes iteration k; entry 0 is the initial sample
  std::mt19937_64 rng;
};

using FitnessFn = std::function<double(const BinaryMorphology&)>;

namespace detail {
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Box mean over a (2r+1)^2 window (lateral wrap, vertical window clipped), then >= 0.5 is donor.
inline Mask box_rethreshold(const Mask& bits, int radius) {
  const int h = bits.height, w = bits.width;
  Mask out(h, w);
  for (int r = 0; r < h; ++r) {
    const int r0 = std::max(0, r - radius), r1 = std::min(h - 1, r + radius);
    for (int c = 0; c < w; ++c) {
      int sum = 0, count = 0;
      for (int rr = r0; rr <= r1; ++rr) {
        for (int dc = -radius; dc <= radius; ++dc) sum += bits(rr, wrap_col(c + dc, w));
        count += 2 * radius + 1;
      }
      out(r, c) = 2 * sum >= count ? 1 : 0;
    }
  }
  return out;
}
}  // namespace detail

inline double clamp_probability(double v, const PbilParams& params) { return std::clamp(v, params.p_min, params.p_max); }

/// Independent Bernoulli(P) per pixel, then the optional box-blur cleanup.
inline BinaryMorphology pbil_sample(const Grid<double>& p, std::mt19937_64& rng, int smoothing_radius) {
  Mask bits(p.height, p.width);
  for (std::size_t i = 0; i < p.data.size(); ++i) bits.data[i] = detail::unit_uniform(rng) < p.data[i] ? 1 : 0;
  if (smoothing_radius > 0) bits = detail::box_rethreshold(bits, smoothing_radius);
  return BinaryMorphology(std::move(bits));
}

namespace detail {
inline double checked_fitness(const FitnessFn& f, const BinaryMorphology& b, std::size_t index) {
  try {
    return f(b);
  } catch (const std::exception& e) {
    throw std::runtime_error("fitness evaluation failed for sample " + std::to_string(index) + ": " + e.what());
  }
}

inline PbilState start_state(Grid<double> p, const PbilParams& params, const FitnessFn& f) {
  params.validate();
  PbilState s;
  s.p = std::move(p);
  s.rng.seed(params.seed);
  s.best_sample = pbil_sample(s.p, s.rng, params.smoothing_radius);
  s.best_fitness = checked_fitness(f, s.best_sample, 0);
  s.history.push_back({0, s.best_fitness, s.best_fitness});
  return s;
}
}  // namespace detail

/// P = clamp(m * (1 - 2 delta) + delta).
inline PbilState pbil_init(const Morphology& init, const PbilParams& params, const FitnessFn& f) {
  Grid<double> p(init.height(), init.width());
  for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = clamp_probability(init.values()[i] * (1.0 - 2.0 * params.delta) + params.delta, params);
  return detail::start_state(std::move(p), params, f);
}

inline PbilState pbil_init_uniform(int height, int width, const PbilParams& params, const FitnessFn& f) {
  return detail::start_state(Grid<double>(height, width, 0.5), params, f);
}

/// P <- clamp(P (1 - l_r) + P_b l_r), before mutation.
inline void pbil_update(Grid<double>& p, const Grid<double>& elite_mean, const PbilParams& params) {
  for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = clamp_probability(p.data[i] * (1.0 - params.l_r) + elite_mean.data[i] * params.l_r, params);
}

/// One generation: sample n (serially from the state rng), evaluate in parallel,
/// average the n_b best (ties to lower index), update, mutate, keep the best ever.
inline void pbil_iterate(PbilState& s, const PbilParams& params, const FitnessFn& f, int jobs = 1) {
  params.validate();
  const auto n = static_cast<std::size_t>(params.n);
  std::vector<BinaryMorphology> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) samples.push_back(pbil_sample(s.p, s.rng, params.smoothing_radius));

  std::vector<double> fitness(n);
  parallel_for(n, jobs, [&](std::size_t i) { fitness[i] = detail::checked_fitness(f, samples[i], i); });

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) { return std::isnan(fitness[i]) ? -std::numeric_limits<double>::infinity() : fitness[i]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });

  const auto nb = static_cast<std::size_t>(params.n_b);
  Grid<double> elite(s.p.height, s.p.width);
  double elite_sum = 0;
  for (std::size_t k = 0; k < nb; ++k) {
    const auto& d = samples[order[k]].donor.data;
    for (std::size_t i = 0; i < d.size(); ++i) elite.data[i] += d[i];
    elite_sum += fitness[order[k]];
  }
  for (auto& v : elite.data) v /= static_cast<double>(nb);

  pbil_update(s.p, elite, params);
  if (params.mutation_prob > 0.0) {
    for (auto& v : s.p.data) {
      if (detail::unit_uniform(s.rng) < params.mutation_prob) {
        const double bit = (s.rng() >> 63) ? 1.0 : 0.0;
        v = clamp_probability(v * (1.0 - params.mutation_shift) + bit * params.mutation_shift, params);
      }
    }
  }

  if (key(order[0]) > s.best_fitness) {
    s.best_fitness = fitness[order[0]];
    s.best_sample = samples[order[0]];
  }
  ++s.iteration;
  s.history.push_back({s.iteration, s.best_fitness, elite_sum / static_cast<double>(nb)});
}

/// Called after every iteration; returning false stops the run.
using PbilObserver = std::function<bool(const PbilState&)>;

/// Iterates until max_iters, the observer says stop, or the best fitness gained less
/// than improvement_tol over the trailing improvement_window iterations.
inline PbilState pbil_run(PbilState s, const PbilParams& params, const FitnessFn& f, int jobs = 1, const PbilObserver& observer = {}) {
  params.validate();
  const auto window = static_cast<std::size_t>(params.improvement_window);
  while (s.iteration < params.max_iters) {
    pbil_iterate(s, params, f, jobs);
    if (observer && !observer(s)) break;
    const auto k = static_cast<std::size_t>(s.iteration);
    if (k > window && k < s.history.size() && s.history[k].best_fitness - s.history[k - window].best_fitness < params.improvement_tol) break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Fitness functions

/// Donor pixel count.
inline FitnessFn onemax() {
  return [](const BinaryMorphology& b) { return static_cast<double>(b.donor_count()); };
}

/// Expected class index sum_k k p_k under the surrogate.
template <class T>
FitnessFn cnn_expected_class(std::shared_ptr<const nn::Model<T>> model) {
  return [model = std::move(model)](const BinaryMorphology& b) {
    const auto pred = nn::predict(*model, b.to_morphology());
    double e = 0;
    for (int k = 0; k < nn::kClasses; ++k) e += k * pred.probabilities[k];
    return e;
  };
}

inline FitnessFn oracle_jsc(OracleParams params = {}) {
  return [params](const BinaryMorphology& b) { return evaluate_binary(b, params).jsc; };
}

}  // namespace dlsp
