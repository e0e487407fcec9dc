#ifndef CFLAB_GUIDANCE_RESULT_HPP
#define CFLAB_GUIDANCE_RESULT_HPP

#include <cmath>
#include <limits>
#include <sstream>

#include "cflab/diffcore/tensor.hpp"
#include "cflab/synthdata/png.hpp"

namespace cflab::guidance {

using diffcore::Tensor;

/// One counterfactual for one source image. `image` is (1, C, H, W) in [0, 1].
template <typename T>
struct CounterfactualResult {
  Tensor<T> image;
  int target = 0;
  std::vector<double> confidence_trace;  // p(target | current estimate) per step
  double final_confidence = 0;           // judging classifier on the final image
  double l1 = 0, l2 = 0, l4 = 0;         // distances to the original
  bool flipped = false;                  // plain argmax equals target
};

template <typename T>
void set_distances(CounterfactualResult<T>& r, const T* original) {
  std::vector<T> d(r.image.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = r.image[i] - original[i];
  r.l1 = diffcore::lp_norm<T>(d, 1.0);
  r.l2 = diffcore::lp_norm<T>(d, 2.0);
  r.l4 = diffcore::lp_norm<T>(d, 4.0);
}

/// Settings recorded next to each counterfactual. NaN fields are left empty.
struct RunRecord {
  std::string image_id, optimizer, mode;
  double lambda_c = std::numeric_limits<double>::quiet_NaN();
  double lambda_d = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double eps = std::numeric_limits<double>::quiet_NaN();
};

inline const char* counterfactual_csv_header() {
  return "image_id,optimizer,mode,target,lambda_c,lambda_d,alpha,eps,flipped,final_confidence,l1,l2,l4";
}

template <typename T>
std::string counterfactual_csv_row(const RunRecord& rec, const CounterfactualResult<T>& r) {
  std::ostringstream os;
  os.precision(6);
  auto opt = [&](double v) {
    if (!std::isnan(v)) os << v;
    os << ',';
  };
  os << rec.image_id << ',' << rec.optimizer << ',' << rec.mode << ',' << r.target << ',';
  opt(rec.lambda_c);
  opt(rec.lambda_d);
  opt(rec.alpha);
  opt(rec.eps);
  os << (r.flipped ? 1 : 0) << ',' << r.final_confidence << ',' << r.l1 << ',' << r.l2 << ',' << r.l4;
  return os.str();
}

/// Original | counterfactual | signed difference (blue < 0 < red), upscaled.
template <typename T>
synthdata::Image8 counterfactual_panel(const T* original, const CounterfactualResult<T>& r, std::size_t factor = 4) {
  const std::size_t h = r.image.dim(2), w = r.image.dim(3), m = h * w;
  std::vector<double> diff(m);
  double limit = 0;
  for (std::size_t i = 0; i < m; ++i) {
    diff[i] = r.image[i] - original[i];
    limit = std::max(limit, std::abs(diff[i]));
  }
  std::vector<double> src(original, original + m), out(r.image.ptr(), r.image.ptr() + m);
  return synthdata::upscale(synthdata::hstack({synthdata::gray_image(src, w, h), synthdata::gray_image(out, w, h),
                                               synthdata::diverging_image(diff, w, h, limit > 0 ? limit : 1.0)}),
                            factor);
}

}  // namespace cflab::guidance

#endif  // CFLAB_GUIDANCE_RESULT_HPP
