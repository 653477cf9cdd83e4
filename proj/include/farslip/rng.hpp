#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace farslip {

// Counter-based PRNG (splitmix64 over a keyed counter). State is two
// integers, so streams serialize exactly and can be split by name.
class Rng {
 public:
  Rng() : key_(0), counter_(0) {}
  explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)), counter_(0) {}

  // Derives an independent stream; the parent is not advanced.
  Rng split(std::string_view stream_name) const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : stream_name) {
      h ^= static_cast<uint8_t>(c);
      h *= 1099511628211ull;
    }
    return Rng(mix(key_ ^ h));
  }

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (one draw per call, mate discarded
  // to keep the stream position a pure function of the call count).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }
  void restore(uint64_t key, uint64_t counter) {
    key_ = key;
    counter_ = counter;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t key_;
  uint64_t counter_;
};

}  // namespace farslip
