#pragma once

#include <array>
#include <cstdlib>
#include <span>
#include <stdexcept>

#include "dlsp/nn/arch.hpp"

namespace dlsp::nn {

inline constexpr int kClasses = 10;

struct EvalReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double within_one_accuracy = 0.0;
  std::array<std::array<long, kClasses>, kClasses> confusion{};  // [true][predicted]
  long count = 0;

  /// Every row with at least one sample has its maximum on the diagonal.
  [[nodiscard]] bool diagonally_dominant() const {
    for (int t = 0; t < kClasses; ++t) {
      long row_max = 0, row_sum = 0;
      for (int p = 0; p < kClasses; ++p) {
        row_max = std::max(row_max, confusion[t][p]);
        row_sum += confusion[t][p];
      }
      if (row_sum > 0 && confusion[t][t] != row_max) return false;
    }
    return true;
  }
};

/// Macro F1 averages per-class F1 over classes that occur as truth or prediction.
inline EvalReport make_report(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("truth/prediction length mismatch");
  if (truth.empty()) throw NnError(NnError::Code::EmptySplit, "cannot evaluate an empty split");
  EvalReport r;
  long hits = 0, near = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= kClasses || p < 0 || p >= kClasses) throw std::out_of_range("class index out of range");
    ++r.confusion[t][p];
    hits += t == p;
    near += std::abs(t - p) <= 1;
  }
  r.count = static_cast<long>(truth.size());
  r.accuracy = static_cast<double>(hits) / r.count;
  r.within_one_accuracy = static_cast<double>(near) / r.count;
  double f1_sum = 0;
  int used = 0;
  for (int c = 0; c < kClasses; ++c) {
    long tp = r.confusion[c][c], fp = 0, fn = 0;
    for (int o = 0; o < kClasses; ++o) {
      if (o == c) continue;
      fp += r.confusion[o][c];
      fn += r.confusion[c][o];
    }
    if (tp + fp + fn == 0) continue;
    f1_sum += 2.0 * tp / (2.0 * tp + fp + fn);
    ++used;
  }
  r.macro_f1 = used ? f1_sum / used : 0.0;
  return r;
}

}  // namespace dlsp::nn
