#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "distillkit/common.hpp"

namespace dk {

/// Uniform-bit source behind every stochastic operation. Keeping the
/// interface minimal lets tests script exact draw sequences.
class RandomStream {
 public:
  virtual ~RandomStream() = default;

  /// Uniform double in [0, 1).
  virtual double uniform() = 0;

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. No cached spare: each call consumes
  /// exactly two uniforms, so draw counts stay predictable.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }
};

/// Deterministic stream over std::mt19937_64. The 53-bit mantissa mapping is
/// fixed here rather than delegated to std::uniform_real_distribution, whose
/// output is not pinned by the standard.
class Mt64Stream final : public RandomStream {
 public:
  explicit Mt64Stream(std::uint64_t seed) : engine_(seed) {}

  using RandomStream::uniform;
  double uniform() override {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

 private:
  std::mt19937_64 engine_;
};

/// Replays a fixed list of uniforms; exhaustion is a test bug.
class ScriptedStream final : public RandomStream {
 public:
  explicit ScriptedStream(std::vector<double> values) : values_(std::move(values)) {}

  using RandomStream::uniform;
  double uniform() override {
    if (pos_ >= values_.size()) throw Error("scripted random stream exhausted");
    return values_[pos_++];
  }

  std::size_t consumed() const { return pos_; }

 private:
  std::vector<double> values_;
  std::size_t pos_ = 0;
};

/// Splitmix64 mix; derives decorrelated child seeds from a parent seed and
/// salt words (epoch counters, content hashes, ...).
inline std::uint64_t derive_seed(std::uint64_t base) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt, Rest... rest) {
  return derive_seed(derive_seed(base) ^ salt, rest...);
}

}  // namespace dk
