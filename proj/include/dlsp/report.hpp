#pragma once

#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlsp/design.hpp"
#include "dlsp/nn/metrics.hpp"
#include "dlsp/nn/train.hpp"
#include "dlsp/oracle.hpp"

namespace dlsp {

using nlohmann::json;

inline json to_json(const OracleResult& r, std::optional<int> class_id = std::nullopt) {
  json j{{"jsc", r.jsc}, {"proxy", r.proxy}, {"eta_diss", r.eta_diss}, {"eta_transport", r.eta_transport}, {"solver_iterations", r.solver_iterations}};
  if (class_id) j["class"] = *class_id;
  return j;
}

inline json to_json(const nn::EvalReport& r) {
  json confusion = json::array();
  for (const auto& row : r.confusion) confusion.push_back(row);
  return {{"accuracy", r.accuracy},
          {"macro_f1", r.macro_f1},
          {"within_one_accuracy", r.within_one_accuracy},
          {"count", r.count},
          {"diagonally_dominant", r.diagonally_dominant()},
          {"confusion", confusion}};
}

inline json to_json(const nn::Prediction& p) {
  return {{"class", p.class_id}, {"probs", std::vector<double>(p.probabilities.begin(), p.probabilities.end())}};
}

/// Rows are true classes, columns predicted classes, with a header row and column.
inline std::string confusion_csv(const nn::EvalReport& r) {
  std::ostringstream out;
  out << "true\\pred";
  for (int c = 0; c < nn::kClasses; ++c) out << ',' << c;
  out << '\n';
  for (int t = 0; t < nn::kClasses; ++t) {
    out << t;
    for (int p = 0; p < nn::kClasses; ++p) out << ',' << r.confusion[t][p];
    out << '\n';
  }
  return out.str();
}

inline std::string training_history_csv(const std::vector<nn::EpochRecord>& h) {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,val_acc\n";
  for (const auto& e : h) out << e.epoch << ',' << format_real(e.train_loss) << ',' << format_real(e.train_acc) << ',' << format_real(e.val_acc) << '\n';
  return out.str();
}

inline std::string pbil_history_csv(const std::vector<PbilRecord>& h) {
  std::ostringstream out;
  out << "iter,best_fitness,elite_mean\n";
  for (const auto& r : h) out << r.iteration << ',' << format_real(r.best_fitness) << ',' << format_real(r.elite_mean) << '\n';
  return out.str();
}

}  // namespace dlsp
