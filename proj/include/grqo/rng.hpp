#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace grqo {

// Stream-splitting hash (splitmix64). Used to derive independent child seeds
// so that consumption in one stream never shifts another.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256** with hand-rolled distributions. std:: distributions are
// implementation-defined, which would break cross-stdlib reproducibility of
// generated datasets and runs.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : root_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) {
      sm += 0x9e3779b97f4a7c15ull;
      std::uint64_t z = sm;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      word = z ^ (z >> 31);
    }
  }

  // Child stream derived from the root seed and a tag; independent of how
  // much this generator has already been consumed.
  Rng fork(std::uint64_t tag) const { return Rng(mix_seed(root_, tag)); }

  std::uint64_t u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0,n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = u64();
    while (x >= limit) x = u64();
    return x % n;
  }

  // Standard normal via Box-Muller (no cached spare, keeps state minimal).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample k distinct indices from [0,n); falls back to with-replacement
  // draws when n < k.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    if (n >= k) {
      std::vector<int> all(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
      shuffle(all);
      out.assign(all.begin(), all.begin() + k);
    } else {
      for (int i = 0; i < k; ++i)
        out.push_back(static_cast<int>(uniform_int(static_cast<std::uint64_t>(n))));
    }
    return out;
  }

private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t root_;
  std::uint64_t s_[4];
};

}  // namespace grqo
