#ifndef CFLAB_EXPERIMENTS_CLASSIFIER_TABLE_HPP
#define CFLAB_EXPERIMENTS_CLASSIFIER_TABLE_HPP

#include "cflab/classifiers/train.hpp"
#include "cflab/experiments/common.hpp"

namespace cflab::experiments {

/// Clean metrics and l2 PGD accuracy of one classifier on a dataset split.
template <classifiers::Classifier M>
classifiers::MetricsRow evaluate_classifier(const M& model, const std::string& mode, const synthdata::Dataset& d,
                                            synthdata::Split split, const classifiers::AttackConfig& attack,
                                            unsigned jobs = 1) {
  const auto rows = d.split(split);
  if (rows.empty()) throw InvalidArgument("evaluate_classifier: empty split");
  const auto x = synthdata::stack_images(rows).template cast<typename M::scalar_type>();
  std::vector<int> y;
  for (const auto& r : rows) y.push_back(d.label(r));
  const int k = synthdata::task_class_count(d.spec().modality, d.spec().task);
  const auto cm = classifiers::confusion_matrix(classifiers::predict(model, x, jobs), y, k);
  classifiers::MetricsRow row{mode, synthdata::to_string(d.spec().task), synthdata::to_string(split), {}, -1};
  row.clean.accuracy = classifiers::accuracy(cm);
  row.clean.quadratic_kappa = classifiers::quadratic_kappa(cm);
  try {
    row.clean.balanced_accuracy = classifiers::balanced_accuracy(cm);
  } catch (const InvalidArgument&) {
    row.clean.balanced_accuracy = std::numeric_limits<double>::quiet_NaN();
  }
  if (attack.eps > 0) row.robust_accuracy = classifiers::robust_accuracy(model, x, y, attack, jobs);
  return row;
}

inline std::string metrics_markdown(const std::vector<classifiers::MetricsRow>& rows, double eps) {
  std::ostringstream os;
  os << "# Classifier metrics\n\n"
     << "| mode | task | split | accuracy | balanced accuracy | quadratic kappa | PGD accuracy (l2, eps " << num(eps)
     << ") |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.mode << " | " << r.task << " | " << r.split << " | " << num(r.clean.accuracy) << " | "
       << num(r.clean.balanced_accuracy) << " | " << num(r.clean.quadratic_kappa) << " | "
       << (r.robust_accuracy >= 0 ? num(r.robust_accuracy) : "n/a") << " |\n";
  return os.str();
}

}  // namespace cflab::experiments

#endif  // CFLAB_EXPERIMENTS_CLASSIFIER_TABLE_HPP
