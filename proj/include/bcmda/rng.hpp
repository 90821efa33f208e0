#pragma once

#include <cmath>
#include <cstdint>

#include "bcmda/errors.hpp"

namespace bcmda {

// Counter-based splittable generator (SplitMix64 finalizer over key+counter).
// A draw depends only on (key, counter), so any consumer can be handed an
// independent stream derived from a tag instead of sharing mutable state.
// That keeps every run a pure function of the root seed: training iteration t
// re-derives its stream as root.fork(kStream).fork(t) and gets identical
// numbers whether the run started at 0 or resumed from a checkpoint.
class Rng {
 public:
  explicit Rng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), ctr_(counter) {}

  // Independent child stream; fork(a).fork(b) gives a stable path (a, b).
  Rng fork(std::uint64_t tag) const {
    return Rng(finalize(key_ ^ finalize(tag + kGamma)), 0);
  }

  std::uint64_t next_u64() {
    ctr_ += 1;
    return finalize(key_ + kGamma * ctr_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ParameterError("uniform_int: n must be positive");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (two draws per value, no cached twin, so
  // the stream position stays a simple function of the call count).
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Beta(a, b) by Johnk's rejection method; fast for the shape range we use.
  double beta(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) throw ParameterError("beta: shape parameters must be positive");
    for (;;) {
      double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
      double v = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
      double x = std::pow(u, 1.0 / a);
      double y = std::pow(v, 1.0 / b);
      if (x + y <= 1.0) return x / (x + y);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return ctr_; }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_;
};

// Stream tags used across the project so independent consumers never collide.
namespace streams {
inline constexpr std::uint64_t kData = 0x01;       // dataset generation
inline constexpr std::uint64_t kInit = 0x02;       // parameter init
inline constexpr std::uint64_t kAugment = 0x03;    // weak/strong augmentation
inline constexpr std::uint64_t kMix = 0x04;        // mixing coefficients + masks
inline constexpr std::uint64_t kSampler = 0x05;    // batch sampling
}  // namespace streams

}  // namespace bcmda
