#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace gridmind {

// splitmix64 step; used both as a PRNG kernel and for seed derivation.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic, platform-independent seed derivation: fold extra stream ids
// into a base seed. mix(seed, a, b) != mix(seed, b, a).
inline uint64_t mix_seed(uint64_t seed) { return seed; }

template <typename... Rest>
uint64_t mix_seed(uint64_t seed, uint64_t next, Rest... rest) {
  uint64_t s = seed ^ (next + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  uint64_t st = s;
  return mix_seed(splitmix64(st), rest...);
}

inline uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex16(uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, x >>= 4) s[size_t(i)] = digits[x & 0xf];
  return s;
}

// Hand-rolled generator so that streams are bit-reproducible across platforms
// and standard library versions (std::uniform_*_distribution is not).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {
    // decorrelate trivially close seeds
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n); n > 0
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  // standard normal via Box-Muller (fixed algorithm, cached pair half)
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // index sampled from an (unnormalized) nonnegative weight vector
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return int(i);
    }
    return int(weights.size()) - 1;
  }

 private:
  uint64_t state_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace gridmind
