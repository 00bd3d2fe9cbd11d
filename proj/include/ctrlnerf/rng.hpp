#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

// Deterministic random source. The engine (mt19937_64) is fully specified by
// the standard; the value mappings below are our own so that sequences are
// bit-identical across platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Derive an independent stream, e.g. one per image or per ray.
  static Rng stream(uint64_t seed, uint64_t index) {
    return Rng(mix(seed, index));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    if (!(lo <= hi)) throw ContractViolation("Rng::uniform: inverted range");
    return lo + (hi - lo) * uniform();
  }

  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    if (n == 0) throw ContractViolation("Rng::uniform_index: empty range");
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Serialized engine state, for replay files after a numeric abort.
  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    has_spare_ = false;
  }

 private:
  // splitmix64 finalizer; decorrelates (seed, index) pairs.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ctrlnerf
