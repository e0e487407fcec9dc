#ifndef CFLAB_DIFFCORE_RNG_HPP
#define CFLAB_DIFFCORE_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

#include "cflab/diffcore/tensor.hpp"

namespace cflab {

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = mix_seed(base);
  for (auto k : keys) s = mix_seed(s ^ mix_seed(k + 0x632be59bd9b4e019ULL));
  return s;
}

/// Seeded random stream. Every random draw in the library goes through one.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Integer in [lo, hi].
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next() { return engine_(); }

  template <typename T>
  diffcore::Tensor<T> normal_tensor(const diffcore::Shape& shape, double stddev = 1.0) {
    diffcore::Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cflab

#endif  // CFLAB_DIFFCORE_RNG_HPP
