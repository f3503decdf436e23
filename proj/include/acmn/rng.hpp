#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

#include "acmn/common.hpp"

namespace acmn {

// Randomness is organized as named streams derived from one master seed, so
// every consumer (scene i, epoch e shuffle, tensor init, ...) draws the same
// values no matter what else ran before it.  Only bit-stable primitives are
// used: mt19937_64 plus hand-rolled integer/real mappings.  std::shuffle and
// the std distributions are implementation-defined and must not appear here.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Derives an independent generator identified by (master seed, name, index).
  static Rng stream(std::uint64_t seed, std::string_view name,
                    std::uint64_t index = 0) {
    std::uint64_t state = seed;
    splitmix64(state);
    state ^= fnv1a64(name);
    splitmix64(state);
    state ^= index;
    return Rng(splitmix64(state));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: n must be positive");
    std::uint64_t rem = std::uint64_t(-1) % n;
    std::uint64_t limit = std::uint64_t(-1) - rem;  // multiples of n fit below
    for (;;) {
      std::uint64_t x = next_u64();
      if (x <= limit) return x % n;
    }
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    if (lo > hi) throw ContractError("Rng::uniform_int: empty range");
    return lo + static_cast<int>(below(std::uint64_t(hi) - lo + 1));
  }

  // [0, 1) with 53 random mantissa bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  template <typename V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), order random (partial Fisher-Yates).
  std::vector<int> sample(int k, int n) {
    if (k > n) throw ContractError("Rng::sample: k exceeds n");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(below(std::uint64_t(n) - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace acmn
