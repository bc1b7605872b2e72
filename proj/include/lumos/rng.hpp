#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <string_view>

namespace lumos {

// Counter-based stream: (key, position) fully determines every draw, so a
// stream can be re-created from its seed and tag path and will replay the
// exact bit pattern. split() derives statistically independent child streams
// without sharing state with the parent.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : key_(mix(seed ^ 0xA02C0DE5EEDull)) {}

  RngStream split(uint64_t tag) const {
    RngStream child(0);
    child.key_ = mix(key_ ^ mix(tag * 0x9E3779B97F4A7C15ull + 0x6A09E667F3BCC909ull));
    child.counter_ = 0;
    return child;
  }

  RngStream split(std::string_view tag) const { return split(fnv1a(tag)); }

  uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9E3779B97F4A7C15ull);
  }

  // Uniform on [0,1), 53-bit mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi) by rejection-free scaling; adequate for desk-scale index draws.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo));
  }

  double normal(double mean, double stddev) {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  uint64_t position() const { return counter_; }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace lumos
