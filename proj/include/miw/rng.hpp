#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace miw {

// Every random decision in the toolkit flows from one user seed, fanned out
// to independent streams by hashing a purpose string into the seed. The
// derivation is fixed so runs are reproducible across platforms.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return splitmix64(seed ^ fnv1a(purpose));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  Rng(std::uint64_t seed, std::string_view purpose) : gen_(derive_seed(seed, purpose)) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(gen_);
  }
  // in [0, n)
  std::uint64_t index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  template <typename It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace miw
