#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "dlsp/grid.hpp"
#include "dlsp/morpho.hpp"
#include "dlsp/nn/network.hpp"
#include "dlsp/nn/train.hpp"

namespace dlsp {

struct SaliencyMap {
  Grid<double> values;
  int target_class = 0;

  [[nodiscard]] int height() const { return values.height; }
  [[nodiscard]] int width() const { return values.width; }
};

/// |d logit_target / d input|, max-normalized. Target defaults to the predicted class.
template <class T>
SaliencyMap saliency(const nn::Model<T>& model, const Morphology& m, std::optional<int> target = std::nullopt) {
  const auto x = nn::to_input(model, m);
  nn::Workspace<T> ws(model.arch, 1);
  std::copy(x.begin(), x.end(), ws.input().begin());
  nn::forward(model, ws, 1);
  const int classes = model.arch.classes;
  const int t = target ? *target : nn::argmax(ws.logits().subspan(0, static_cast<std::size_t>(classes)));
  if (t < 0 || t >= classes) throw nn::NnError(nn::NnError::Code::ShapeMismatch, "target class out of range");
  auto dl = ws.logit_grad();
  std::fill(dl.begin(), dl.end(), T{0});
  dl[static_cast<std::size_t>(t)] = T{1};
  std::vector<T> scratch(model.params.size(), T{0});
  nn::backward(model, ws, 1, std::span<T>(scratch), true);

  SaliencyMap s{Grid<double>(m.height(), m.width()), t};
  const auto g = ws.input_grad();
  double peak = 0;
  for (std::size_t i = 0; i < s.values.data.size(); ++i) {
    s.values.data[i] = std::abs(static_cast<double>(g[i]));
    peak = std::max(peak, s.values.data[i]);
  }
  if (peak > 0) {
    for (auto& v : s.values.data) v /= peak;
  }
  return s;
}

/// Mean saliency on the interface band (dilated by `band`) over mean saliency elsewhere.
/// +inf when the complement mean is zero, 0 when the band is empty, 1 for an all-zero map.
inline double interface_concentration(const SaliencyMap& s, const BinaryMorphology& b, int band = 1) {
  if (s.height() != b.height() || s.width() != b.width()) throw std::invalid_argument("saliency/morphology shape mismatch");
  const Mask zone = dilate(interface_mask(b), std::max(band, 0));
  double in_sum = 0, out_sum = 0;
  long in_n = 0, out_n = 0;
  for (std::size_t i = 0; i < zone.data.size(); ++i) {
    if (zone.data[i]) {
      in_sum += s.values.data[i];
      ++in_n;
    } else {
      out_sum += s.values.data[i];
      ++out_n;
    }
  }
  if (in_n == 0) return 0.0;
  const double in_mean = in_sum / in_n;
  const double out_mean = out_n ? out_sum / out_n : 0.0;
  if (out_mean == 0.0) return in_mean == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return in_mean / out_mean;
}

}  // namespace dlsp
