#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace pfedhr {

// Deterministic splitmix64 generator. The standard <random> distributions are
// implementation-defined, which would break byte-identical reruns of a saved
// manifest, so all stochastic draws in the library go through this class.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n). Modulo bias is negligible for the small n used here.
  int below(int n) { return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  bool coin() { return (next_u64() & 1ULL) != 0; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      const int j = below(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  // k distinct values from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k && i < n; ++i) {
      const int j = i + below(n - i);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable seed derivation for independent random streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

// Stream tags so unrelated draws never share a sequence.
namespace seed_tag {
inline constexpr std::uint64_t kData = 0x01;
inline constexpr std::uint64_t kPartition = 0x02;
inline constexpr std::uint64_t kAssign = 0x03;
inline constexpr std::uint64_t kInit = 0x04;
inline constexpr std::uint64_t kSample = 0x05;
inline constexpr std::uint64_t kLocal = 0x06;
inline constexpr std::uint64_t kProbe = 0x07;
inline constexpr std::uint64_t kCluster = 0x08;
inline constexpr std::uint64_t kStitch = 0x09;
inline constexpr std::uint64_t kFinetune = 0x0a;
inline constexpr std::uint64_t kFinetuneClient = 0x0b;
inline constexpr std::uint64_t kGlobalInit = 0x0c;
}  // namespace seed_tag

}  // namespace pfedhr
