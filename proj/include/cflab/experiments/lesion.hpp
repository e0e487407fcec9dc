#ifndef CFLAB_EXPERIMENTS_LESION_HPP
#define CFLAB_EXPERIMENTS_LESION_HPP

#include "cflab/experiments/common.hpp"

namespace cflab::experiments {

/// Mean |cf - original| inside and outside one lesion mask. A region with no
/// pixels reports NaN.
struct EditStats {
  double in_mask = std::numeric_limits<double>::quiet_NaN();
  double out_mask = std::numeric_limits<double>::quiet_NaN();
  std::size_t in_pixels = 0, out_pixels = 0;
};

/// results[i] is the counterfactual of row i of `originals` (N, C, H, W);
/// masks[i] has one entry per pixel of that image.
template <typename T>
std::vector<EditStats> lesion_edit_analysis(const std::vector<CounterfactualResult<T>>& results,
                                            const Tensor<T>& originals,
                                            const std::vector<Tensor<std::uint8_t>>& masks) {
  if (results.size() != masks.size()) throw ShapeError("lesion_edit_analysis: one mask per counterfactual");
  if (results.empty()) return {};
  if (originals.rank() == 0 || originals.dim(0) != results.size())
    throw ShapeError("lesion_edit_analysis: one original per counterfactual");
  const std::size_t m = originals.size() / originals.dim(0);
  std::vector<EditStats> out(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].image.size() != m) throw ShapeError("lesion_edit_analysis: image size differs from original");
    if (masks[i].size() != m)
      throw ShapeError("lesion_edit_analysis: mask " + diffcore::shape_str(masks[i].shape()) +
                       " does not match image " + diffcore::shape_str(results[i].image.shape()));
    double in = 0, outside = 0;
    auto& s = out[i];
    for (std::size_t j = 0; j < m; ++j) {
      const double a = std::abs(double(results[i].image[j]) - double(originals[i * m + j]));
      if (masks[i][j]) {
        in += a;
        ++s.in_pixels;
      } else {
        outside += a;
        ++s.out_pixels;
      }
    }
    if (s.in_pixels) s.in_mask = in / static_cast<double>(s.in_pixels);
    if (s.out_pixels) s.out_mask = outside / static_cast<double>(s.out_pixels);
  }
  return out;
}

inline std::vector<Tensor<std::uint8_t>> lesion_masks(const std::vector<ManifestRow>& rows) {
  std::vector<Tensor<std::uint8_t>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(synthdata::generate(r).lesion_mask);
  return out;
}

/// Batch means over images where each region is non-empty.
struct EditSummary {
  double in_mask = std::numeric_limits<double>::quiet_NaN();
  double out_mask = std::numeric_limits<double>::quiet_NaN();
  double ratio() const { return in_mask / out_mask; }
};

inline EditSummary summarize_edits(const std::vector<EditStats>& stats) {
  std::vector<double> in, out;
  for (const auto& s : stats) {
    in.push_back(s.in_mask);
    out.push_back(s.out_mask);
  }
  return {finite_mean(in), finite_mean(out)};
}

}  // namespace cflab::experiments

#endif  // CFLAB_EXPERIMENTS_LESION_HPP
