#ifndef CFLAB_GUIDANCE_CONE_HPP
#define CFLAB_GUIDANCE_CONE_HPP

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cflab/diffcore/tensor.hpp"

namespace cflab::guidance {

using diffcore::Shape;
using diffcore::Tensor;

/// Gradient terms with a norm below this contribute nothing.
inline constexpr double kZeroNorm = 1e-12;

enum class GuidanceMode { plain_only, robust_only, cone };

inline std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::plain_only: return "plain-only";
    case GuidanceMode::robust_only: return "robust-only";
    case GuidanceMode::cone: return "cone";
  }
  return "?";
}

inline GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "plain-only") return GuidanceMode::plain_only;
  if (s == "robust-only") return GuidanceMode::robust_only;
  if (s == "cone") return GuidanceMode::cone;
  throw InvalidArgument("unknown guidance mode: " + s);
}

namespace detail {

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

template <typename T>
double norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

inline void check_angle(double alpha_deg) {
  if (!(alpha_deg > 0 && alpha_deg < 90)) throw InvalidArgument("cone angle must lie in (0, 90) degrees");
}

}  // namespace detail

/// Euclidean projection of r onto the closed cone of vectors within
/// `alpha_deg` degrees of the axis g. Writes the result to `out`.
template <typename T>
void cone_project(std::span<const T> r, std::span<const T> g, double alpha_deg, std::span<T> out) {
  detail::check_angle(alpha_deg);
  if (r.size() != g.size() || out.size() != r.size()) throw ShapeError("cone_project: length mismatch");
  const double gn = detail::norm(g);
  if (!(gn > 0)) throw InvalidArgument("cone_project: zero axis");
  const double tan_a = std::tan(alpha_deg * std::numbers::pi / 180.0);
  const double s = detail::dot(r, g) / gn;
  // w = r - s u, with u = g / |g|
  double wn2 = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double w = r[i] - s * g[i] / gn;
    wn2 += w * w;
  }
  const double wn = std::sqrt(wn2);
  if (wn <= s * tan_a) {
    std::copy(r.begin(), r.end(), out.begin());
    return;
  }
  if (tan_a * wn <= -s) {
    std::fill(out.begin(), out.end(), T(0));
    return;
  }
  const double s_star = (s + tan_a * wn) / (1 + tan_a * tan_a);
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double u = g[i] / gn, w = r[i] - s * u;
    out[i] = static_cast<T>(s_star * u + tan_a * s_star * w / wn);
  }
}

template <typename T>
Tensor<T> cone_project(const Tensor<T>& r, const Tensor<T>& g, double alpha_deg) {
  if (r.shape() != g.shape()) throw ShapeError("cone_project: shape mismatch");
  Tensor<T> out(r.shape());
  cone_project<T>(r.data(), g.data(), alpha_deg, out.data());
  return out;
}

/// v / |v|, or zeros when |v| < kZeroNorm.
template <typename T>
void normalize_into(std::span<const T> v, std::span<T> out) {
  const double n = detail::norm(v);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = n < kZeroNorm ? T(0) : static_cast<T>(v[i] / n);
}

/// Per-sample gradients of log p(y | x0_dn) under each classifier and of the
/// distance d(x0, x0_dn), all taken with respect to x_t.
template <typename T>
struct GuidanceGradients {
  std::span<const T> plain, robust, distance;
};

/// lambda_c * unit(guide) - lambda_d * unit(distance), where guide is the cone
/// projection of the robust gradient around the plain gradient in cone mode
/// and the respective classifier gradient otherwise.
template <typename T>
void compose_guidance(GuidanceMode mode, const GuidanceGradients<T>& g, double lambda_c, double lambda_d,
                      double alpha_deg, std::span<T> out) {
  const std::size_t m = out.size();
  std::vector<T> guide(m), unit_guide(m), unit_dist(m);
  switch (mode) {
    case GuidanceMode::plain_only: std::copy(g.plain.begin(), g.plain.end(), guide.begin()); break;
    case GuidanceMode::robust_only: std::copy(g.robust.begin(), g.robust.end(), guide.begin()); break;
    case GuidanceMode::cone:
      // no axis means no admissible direction
      if (detail::norm(g.plain) >= kZeroNorm) cone_project<T>(g.robust, g.plain, alpha_deg, guide);
      break;
  }
  normalize_into<T>(guide, unit_guide);
  normalize_into<T>(g.distance, unit_dist);
  for (std::size_t i = 0; i < m; ++i)
    out[i] = static_cast<T>(lambda_c * unit_guide[i] - lambda_d * unit_dist[i]);
}

/// mu + sigma * (|mu|_2 gamma), with |mu|_2 taken per sample.
template <typename T>
Tensor<T> guided_mean(const Tensor<T>& mu, const Tensor<T>& sigma, const Tensor<T>& gamma) {
  if (mu.shape() != sigma.shape() || mu.shape() != gamma.shape()) throw ShapeError("guided_mean: shape mismatch");
  const std::size_t n = mu.dim(0), m = mu.size() / n;
  Tensor<T> out = mu;
  for (std::size_t i = 0; i < n; ++i) {
    const double mn = detail::norm(std::span<const T>(mu.ptr() + i * m, m));
    for (std::size_t j = i * m; j < (i + 1) * m; ++j) out[j] = static_cast<T>(mu[j] + sigma[j] * (mn * gamma[j]));
  }
  return out;
}

}  // namespace cflab::guidance

#endif  // CFLAB_GUIDANCE_CONE_HPP
