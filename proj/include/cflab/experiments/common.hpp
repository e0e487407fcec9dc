#ifndef CFLAB_EXPERIMENTS_COMMON_HPP
#define CFLAB_EXPERIMENTS_COMMON_HPP

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "cflab/guidance/dvc.hpp"
#include "cflab/synthdata/dataset.hpp"

namespace cflab::experiments {

using diffcore::Tensor;
using guidance::CounterfactualResult;
using synthdata::ManifestRow;

/// The three networks a counterfactual experiment needs.
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
struct Models {
  const P& plain;
  const R& robust;
  const diffusion::DiffusionModel<Net>& diffusion;
};

template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
Models(const P&, const R&, const diffusion::DiffusionModel<Net>&) -> Models<P, R, Net>;

/// Source label -> target label on the binary task.
struct Direction {
  int source = 0, target = 1;
  std::string name() const { return source == 0 ? "healthy->diseased" : "diseased->healthy"; }
  std::string code() const { return source == 0 ? "h2d" : "d2h"; }
};

inline std::vector<Direction> binary_directions() { return {{0, 1}, {1, 0}}; }

inline void require_binary(const synthdata::Dataset& d) {
  if (synthdata::task_class_count(d.spec().modality, d.spec().task) != 2)
    throw InvalidArgument("counterfactual experiments run on the binary task");
}

/// First `n` rows of `rows` with label `source` that the classifier also
/// assigns to `source`.
template <classifiers::Classifier P>
std::vector<ManifestRow> label_correct(const P& plain, const synthdata::Dataset& d, const std::vector<ManifestRow>& rows,
                                       int source, std::size_t n, unsigned jobs = 1) {
  std::vector<ManifestRow> candidates;
  for (const auto& r : rows)
    if (d.label(r) == source) candidates.push_back(r);
  if (candidates.empty()) return {};
  const auto pred = classifiers::predict(plain, synthdata::stack_images(candidates), jobs);
  std::vector<ManifestRow> out;
  for (std::size_t i = 0; i < candidates.size() && out.size() < n; ++i)
    if (pred[i] == source) out.push_back(candidates[i]);
  return out;
}

/// Fraction of counterfactuals whose label did not change to the target.
template <typename T>
double failure_fraction(const std::vector<CounterfactualResult<T>>& results) {
  if (results.empty()) throw InvalidArgument("failure_fraction: no counterfactuals");
  std::size_t flips = 0;
  for (const auto& r : results) flips += r.flipped;
  return 1.0 - static_cast<double>(flips) / static_cast<double>(results.size());
}

/// Mean over the finite entries; NaN when there are none.
inline double finite_mean(const std::vector<double>& v) {
  double s = 0;
  std::size_t k = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++k;
    }
  return k ? s / static_cast<double>(k) : std::numeric_limits<double>::quiet_NaN();
}

/// Fixed six-significant-digit rendering; NaN becomes an empty field.
inline std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline std::string pct(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100 * v << "%";
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("cannot write " + path.string());
  f << text;
  if (!f) throw MissingArtifact("write failed: " + path.string());
}

/// Rows of original | counterfactual | difference for the first `max_rows` results.
template <typename T>
synthdata::Image8 panel_grid(const Tensor<T>& originals, const std::vector<const CounterfactualResult<T>*>& results,
                             std::size_t max_rows = 8) {
  const std::size_t m = originals.size() / originals.dim(0);
  std::vector<synthdata::Image8> rows;
  for (std::size_t i = 0; i < results.size() && i < max_rows; ++i)
    rows.push_back(guidance::counterfactual_panel(originals.ptr() + i * m, *results[i], 3));
  if (rows.empty()) throw InvalidArgument("panel_grid: no counterfactuals");
  return synthdata::vstack(rows);
}

}  // namespace cflab::experiments

#endif  // CFLAB_EXPERIMENTS_COMMON_HPP
