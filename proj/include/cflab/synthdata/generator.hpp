#ifndef CFLAB_SYNTHDATA_GENERATOR_HPP
#define CFLAB_SYNTHDATA_GENERATOR_HPP

// Procedural retina-like images. Fundus-like images grade severity by the
// number of dot lesions; OCT-like images perturb one of four layer bands.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "cflab/diffcore/rng.hpp"
#include "cflab/diffcore/tensor.hpp"

namespace cflab::synthdata {

using diffcore::Tensor;

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::uint64_t kGeneratorVersion = 1;
inline constexpr double kNoiseSigma = 0.02;
/// Pixels whose noise-free value moved by more than this belong to the mask.
inline constexpr double kMaskThreshold = 0.03;

enum class Modality { fundus, oct };
enum class Task { binary, multiclass };

inline int class_count(Modality m) { return m == Modality::fundus ? 5 : 4; }

inline const std::vector<std::string>& class_names(Modality m) {
  static const std::vector<std::string> fundus{"healthy", "mild", "moderate", "severe",
                                               "proliferative"};
  static const std::vector<std::string> oct{"normal", "drusen", "dme", "cnv"};
  return m == Modality::fundus ? fundus : oct;
}

inline std::string to_string(Modality m) { return m == Modality::fundus ? "fundus" : "oct"; }
inline std::string to_string(Task t) { return t == Task::binary ? "binary" : "multiclass"; }

inline Modality parse_modality(const std::string& s) {
  if (s == "fundus") return Modality::fundus;
  if (s == "oct") return Modality::oct;
  throw InvalidArgument("unknown modality: " + s);
}

inline Task parse_task(const std::string& s) {
  if (s == "binary") return Task::binary;
  if (s == "multiclass") return Task::multiclass;
  throw InvalidArgument("unknown task: " + s);
}

/// Number of classes the classifier sees for a task.
inline int task_class_count(Modality m, Task t) { return t == Task::binary ? 2 : class_count(m); }

/// Label under `task` of a generator class. The binary fundus task groups
/// healthy and mild into the normal category.
inline int task_label(Modality m, Task t, int cls) {
  if (t == Task::multiclass) return cls;
  return m == Modality::fundus ? (cls >= 2 ? 1 : 0) : (cls > 0 ? 1 : 0);
}

/// Inclusive lesion-count bin of a fundus grade.
inline std::array<int, 2> fundus_lesion_bin(int grade) {
  static constexpr std::array<std::array<int, 2>, 5> bins{
      {{0, 0}, {1, 2}, {3, 6}, {7, 12}, {13, 15}}};
  return bins.at(static_cast<std::size_t>(grade));
}

struct SynthSample {
  Tensor<float> image;           // (1, 32, 32) in [0, 1]
  int label = 0;                 // generator class
  Tensor<std::uint8_t> lesion_mask;  // (32, 32), values {0, 1}
  std::uint64_t seed = 0;
  Modality modality = Modality::fundus;
  int lesion_count = 0;          // lesions placed (fundus) or perturbations (oct)
};

namespace detail {

using Canvas = std::array<double, kImageSize * kImageSize>;

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Lesion {
  double x, y, r, amp;
};

inline double bezier_distance(double px, double py, const std::array<double, 6>& c) {
  double best = 1e9;
  for (int i = 0; i <= 48; ++i) {
    const double t = i / 48.0, u = 1 - t;
    const double bx = u * u * c[0] + 2 * u * t * c[2] + t * t * c[4];
    const double by = u * u * c[1] + 2 * u * t * c[3] + t * t * c[5];
    best = std::min(best, std::hypot(px - bx, py - by));
  }
  return best;
}

inline void render_fundus(int grade, Rng& rng, Canvas& clean, Canvas& lesioned, int& placed) {
  const double cx = 15.5 + rng.uniform(-0.5, 0.5), cy = 15.5 + rng.uniform(-0.5, 0.5);
  const double radius = 14.5 + rng.uniform(-0.5, 0.3);
  const double brightness = 0.45 + rng.uniform(-0.05, 0.05);
  const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double dx = cx + side * rng.uniform(6.0, 8.0), dy = cy + rng.uniform(-2.0, 2.0);

  const int vessels = rng.integer(2, 4);
  std::vector<std::array<double, 6>> curves;
  std::vector<double> widths;
  for (int v = 0; v < vessels; ++v) {
    const double ang = rng.uniform(0, 2 * std::numbers::pi);
    const double ex = cx + radius * std::cos(ang), ey = cy + radius * std::sin(ang);
    const double mx = 0.5 * (dx + ex) + rng.uniform(-5, 5), my = 0.5 * (dy + ey) + rng.uniform(-5, 5);
    curves.push_back({dx, dy, mx, my, ex, ey});
    widths.push_back(rng.uniform(0.6, 0.9));
  }

  for (std::size_t yi = 0; yi < kImageSize; ++yi)
    for (std::size_t xi = 0; xi < kImageSize; ++xi) {
      const double px = xi + 0.5, py = yi + 0.5;
      const double r = std::hypot(px - cx, py - cy);
      const double inside = clamp01(radius - r + 0.5);
      double v = brightness + 0.15 * (1 - r * r / (radius * radius));
      v += 0.25 * std::exp(-((px - dx) * (px - dx) + (py - dy) * (py - dy)) / 4.5);
      for (std::size_t k = 0; k < curves.size(); ++k) {
        const double d = bezier_distance(px, py, curves[k]);
        v -= 0.18 * std::exp(-(d * d) / (widths[k] * widths[k]));
      }
      clean[yi * kImageSize + xi] = 0.02 + inside * (v - 0.02);
    }

  const auto bin = fundus_lesion_bin(grade);
  const int count = bin[0] == bin[1] ? bin[0] : rng.integer(bin[0], bin[1]);
  std::vector<Lesion> lesions;
  if (grade == 4) {
    // one large blob, placed first
    const double ang = rng.uniform(0, 2 * std::numbers::pi), rr = rng.uniform(3, 8);
    lesions.push_back({cx + rr * std::cos(ang), cy + rr * std::sin(ang), rng.uniform(2.5, 3.2),
                       rng.uniform() < 0.5 ? -0.3 : 0.3});
  }
  auto fits = [&](const Lesion& l, bool strict) {
    if (std::hypot(l.x - dx, l.y - dy) < 4.0) return false;
    for (const auto& o : lesions)
      if (std::hypot(l.x - o.x, l.y - o.y) < l.r + o.r + (strict ? 2.5 : 0.5)) return false;
    return true;
  };
  for (int k = 0; k < count; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < 6000 && !ok; ++attempt) {
      const double ang = rng.uniform(0, 2 * std::numbers::pi);
      const double rr = 12.5 * std::sqrt(rng.uniform());
      const double amp = (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.3, 0.4);
      Lesion l{cx + rr * std::cos(ang), cy + rr * std::sin(ang), rng.uniform(0.6, 1.1), amp};
      if (fits(l, attempt < 5000)) {
        lesions.push_back(l);
        ok = true;
      }
    }
  }
  placed = static_cast<int>(lesions.size()) - (grade == 4 ? 1 : 0);

  lesioned = clean;
  for (const auto& l : lesions)
    for (std::size_t yi = 0; yi < kImageSize; ++yi)
      for (std::size_t xi = 0; xi < kImageSize; ++xi) {
        const double d = std::hypot(xi + 0.5 - l.x, yi + 0.5 - l.y);
        lesioned[yi * kImageSize + xi] += l.amp * clamp01(l.r + 0.5 - d);
      }
}

/// Smooth indicator of top <= y < bottom for the pixel row centred at y.
inline double band(double y, double top, double bottom) {
  return clamp01(y + 0.5 - top) * clamp01(bottom - (y - 0.5));
}

inline void render_oct(int cls, Rng& rng, Canvas& clean, Canvas& lesioned, int& placed) {
  const double base = rng.uniform(7.0, 9.0), amp = rng.uniform(0.0, 1.5);
  const double freq = rng.uniform(0.5, 1.0), phase = rng.uniform(0, 2 * std::numbers::pi);
  const double gain = rng.uniform(0.95, 1.05);

  struct Perturb {
    std::vector<std::array<double, 3>> bumps;     // x, height, width
    std::vector<std::array<double, 4>> cavities;  // x, y offset, rx, ry
    bool cnv = false;
    double cnv_x = 0, cnv_rx = 0, cnv_ry = 0, gap = 0;
  } p;
  placed = 0;
  if (cls == 1) {
    placed = rng.integer(1, 4);
    for (int k = 0; k < placed; ++k)
      p.bumps.push_back({rng.uniform(4, 28), rng.uniform(2.0, 3.5), rng.uniform(1.5, 2.5)});
  } else if (cls == 2) {
    placed = rng.integer(1, 3);
    for (int k = 0; k < placed; ++k)
      p.cavities.push_back({rng.uniform(5, 27), rng.uniform(4.5, 6.5), rng.uniform(1.5, 3.0),
                            rng.uniform(1.0, 1.8)});
  } else if (cls == 3) {
    placed = 1;
    p.cnv = true;
    p.cnv_x = rng.uniform(8, 24);
    p.cnv_rx = rng.uniform(3, 5);
    p.cnv_ry = rng.uniform(1.5, 2.5);
    p.gap = rng.uniform(2, 4);
  }

  auto render = [&](bool perturbed, Canvas& out) {
    for (std::size_t xi = 0; xi < kImageSize; ++xi) {
      const double x = xi + 0.5;
      const double y0 = base + amp * std::sin(2 * std::numbers::pi * freq * x / 32.0 + phase);
      double lift = 0;
      if (perturbed)
        for (const auto& b : p.bumps)
          lift += b[1] * std::exp(-(x - b[0]) * (x - b[0]) / (2 * b[2] * b[2]));
      for (std::size_t yi = 0; yi < kImageSize; ++yi) {
        const double y = yi + 0.5;
        double v = 0.08;
        v += 0.14 * band(y, y0, y0 + 14);           // retina body
        v += 0.55 * band(y, y0, y0 + 2);            // band 1
        v += 0.25 * band(y, y0 + 3, y0 + 8);        // band 2
        double rpe = 0.7 * band(y, y0 + 12 - lift, y0 + 14 - lift);
        if (perturbed && lift > 0) rpe = std::max(rpe, 0.3 * band(y, y0 + 12 - lift, y0 + 14));
        if (perturbed && p.cnv && std::abs(x - p.cnv_x) < p.gap / 2) rpe = 0;
        v += rpe;                                   // band 3
        v += 0.35 * band(y, y0 + 15, y0 + 19);      // band 4
        if (perturbed) {
          for (const auto& c : p.cavities) {
            const double e = std::pow((x - c[0]) / c[2], 2) + std::pow((y - y0 - c[1]) / c[3], 2);
            if (e < 1) v = 0.08 + 0.2 * e;
          }
          if (p.cnv) {
            const double e = std::pow((x - p.cnv_x) / p.cnv_rx, 2) +
                             std::pow((y - y0 - 14.5 - p.cnv_ry * 0.5) / p.cnv_ry, 2);
            if (e < 1) v = std::max(v, 0.6 - 0.15 * e);
          }
        }
        out[yi * kImageSize + xi] = gain * v;
      }
    }
  };
  render(false, clean);
  render(true, lesioned);
}

}  // namespace detail

/// Deterministic sample for (seed, modality, class) under kGeneratorVersion.
inline SynthSample generate_sample(std::uint64_t seed, Modality modality, int cls) {
  if (cls < 0 || cls >= class_count(modality))
    throw InvalidArgument("class " + std::to_string(cls) + " invalid for modality " +
                          to_string(modality));
  Rng rng(derive_seed(seed, {kGeneratorVersion, static_cast<std::uint64_t>(modality),
                             static_cast<std::uint64_t>(cls)}));
  detail::Canvas clean{}, lesioned{};
  int placed = 0;
  if (modality == Modality::fundus)
    detail::render_fundus(cls, rng, clean, lesioned, placed);
  else
    detail::render_oct(cls, rng, clean, lesioned, placed);

  SynthSample s;
  s.seed = seed;
  s.modality = modality;
  s.label = cls;
  s.lesion_count = placed;
  s.image = Tensor<float>({1, kImageSize, kImageSize});
  s.lesion_mask = Tensor<std::uint8_t>({kImageSize, kImageSize});
  for (std::size_t i = 0; i < kImageSize * kImageSize; ++i) {
    s.image[i] = static_cast<float>(detail::clamp01(lesioned[i] + rng.normal(0, kNoiseSigma)));
    s.lesion_mask[i] = std::abs(lesioned[i] - clean[i]) > kMaskThreshold ? 1 : 0;
  }
  return s;
}

/// Number of 8-connected components of nonzero mask pixels.
inline int connected_components(const Tensor<std::uint8_t>& mask) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::vector<int> seen(h * w, 0);
  int comps = 0;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!mask[i] || seen[i]) continue;
    ++comps;
    stack.push_back(i);
    seen[i] = 1;
    while (!stack.empty()) {
      const std::size_t j = stack.back();
      stack.pop_back();
      const long y = static_cast<long>(j / w), x = static_cast<long>(j % w);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          const std::size_t k = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
          if (mask[k] && !seen[k]) {
            seen[k] = 1;
            stack.push_back(k);
          }
        }
    }
  }
  return comps;
}

}  // namespace cflab::synthdata

#endif  // CFLAB_SYNTHDATA_GENERATOR_HPP
