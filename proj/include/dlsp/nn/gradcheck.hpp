#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dlsp/nn/model.hpp"
#include "dlsp/nn/network.hpp"

namespace dlsp::nn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// 16x16x1 -> 3x3/1 x4 -> 3x3/2 x6 -> FC 8 -> FC 3.
inline ArchSpec reduced_arch() { return {{16, 16, 1}, {{3, 1, 4}, {3, 2, 6}}, {8}, 3}; }

/// Compares analytic parameter gradients of the mean cross-entropy with central
/// differences. Relative error is |a - n| / max(|a|, |n|, floor). `coords` empty
/// means every parameter.
template <class T>
GradCheckResult gradient_check(Model<T> model, std::span<const T> inputs, std::span<const int> labels, double step, double floor,
                               std::span<const std::size_t> coords = {}) {
  const auto analytic = loss_and_grads(model, inputs, labels).param_grads;
  auto loss_at = [&](const Model<T>& m) { return loss_and_grads(m, inputs, labels).loss; };
  GradCheckResult r;
  auto check = [&](std::size_t i) {
    const T saved = model.params[i];
    model.params[i] = static_cast<T>(saved + step);
    const double up = loss_at(model);
    model.params[i] = static_cast<T>(saved - step);
    const double down = loss_at(model);
    model.params[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (rel > r.max_relative_error || r.checked == 0) {
      r.max_relative_error = rel;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
    ++r.checked;
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < model.params.size(); ++i) check(i);
  } else {
    for (auto i : coords) check(i);
  }
  return r;
}

/// Zero biases put ReLU units exactly on their kink when a whole receptive field
/// is dead; random biases move the check point to where the loss is differentiable.
template <class T>
void randomize_biases(Model<T>& model, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (std::size_t layer = 0; layer < model.arch.layer_count(); ++layer) {
    for (auto& b : model.bias(layer)) b = static_cast<T>(normal(rng));
  }
}

/// Random batch in [0, 1) with labels cycling over the classes.
template <class T>
std::pair<std::vector<T>, std::vector<int>> random_batch(const ArchSpec& arch, int batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> x(arch.input.size() * static_cast<std::size_t>(batch));
  for (auto& v : x) v = static_cast<T>(u(rng));
  std::vector<int> y(batch);
  for (int i = 0; i < batch; ++i) y[i] = i % arch.classes;
  return {std::move(x), std::move(y)};
}

}  // namespace dlsp::nn
