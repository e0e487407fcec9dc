#ifndef CFLAB_CLASSIFIERS_METRICS_HPP
#define CFLAB_CLASSIFIERS_METRICS_HPP

#include <sstream>
#include <string>
#include <vector>

#include "cflab/diffcore/error.hpp"

namespace cflab::classifiers {


/// counts[i][j]: label i predicted as j.
using Confusion = std::vector<std::vector<double>>;

inline Confusion confusion_matrix(const std::vector<int>& predictions, const std::vector<int>& labels,
                                  int classes) {
  if (predictions.empty()) throw InvalidArgument("metrics: empty input");
  if (predictions.size() != labels.size()) throw InvalidArgument("metrics: length mismatch");
  if (classes < 2) throw InvalidArgument("metrics: need at least two classes");
  Confusion m(classes, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes || predictions[i] < 0 || predictions[i] >= classes)
      throw InvalidArgument("metrics: class index out of range");
    m[labels[i]][predictions[i]] += 1;
  }
  return m;
}

inline double total(const Confusion& m) {
  double n = 0;
  for (const auto& row : m)
    for (double v : row) n += v;
  return n;
}

inline double accuracy(const Confusion& m) {
  double hit = 0;
  for (std::size_t i = 0; i < m.size(); ++i) hit += m[i][i];
  return hit / total(m);
}

/// Mean per-class recall. Undefined (throws) when a class has no labels.
inline double balanced_accuracy(const Confusion& m) {
  double sum = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    double row = 0;
    for (double v : m[i]) row += v;
    if (row == 0) throw InvalidArgument("balanced accuracy undefined: class " + std::to_string(i) + " absent");
    sum += m[i][i] / row;
  }
  return sum / m.size();
}

/// Quadratic weighted kappa. When the expected disagreement is zero, all
/// labels and predictions share one class and the agreement is perfect.
inline double quadratic_kappa(const Confusion& m) {
  const std::size_t k = m.size();
  const double n = total(m);
  std::vector<double> rows(k, 0), cols(k, 0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      rows[i] += m[i][j];
      cols[j] += m[i][j];
    }
  double num = 0, den = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / ((k - 1.0) * (k - 1.0));
      num += w * m[i][j];
      den += w * rows[i] * cols[j] / n;
    }
  return den == 0 ? 1.0 : 1.0 - num / den;
}

struct Metrics {
  double accuracy = 0, balanced_accuracy = 0, quadratic_kappa = 0;
};

inline Metrics metrics(const std::vector<int>& predictions, const std::vector<int>& labels, int classes) {
  const auto m = confusion_matrix(predictions, labels, classes);
  return {accuracy(m), balanced_accuracy(m), quadratic_kappa(m)};
}

/// One row of the classifier report.
struct MetricsRow {
  std::string mode, task, split;
  Metrics clean;
  double robust_accuracy = -1;  // negative when not evaluated
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << "mode,task,split,accuracy,balanced_accuracy,quadratic_kappa,robust_accuracy\n";
  for (const auto& r : rows) {
    os << r.mode << ',' << r.task << ',' << r.split << ',' << r.clean.accuracy << ',' << r.clean.balanced_accuracy
       << ',' << r.clean.quadratic_kappa << ',';
    if (r.robust_accuracy >= 0) os << r.robust_accuracy;
    os << '\n';
  }
  return os.str();
}

}  // namespace cflab::classifiers

#endif  // CFLAB_CLASSIFIERS_METRICS_HPP
