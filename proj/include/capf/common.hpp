#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace capf {

// Error taxonomy. The CLI maps these onto exit codes: ConfigError -> 2,
// FormatError -> 3, NumericError -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what, std::uint64_t offset = 0)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::uint64_t byte_offset = 0;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contract violations: bad shapes, scalar-ness, length mismatches.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Seeding and randomness.
//
// Every random consumer in the project derives its own stream from one
// top-level seed via derive_seed(seed, tag, index). Streams never share
// state, so parallel generation and sample-order changes cannot alter
// content.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index);
}

inline std::uint64_t hash_str(const std::string& s) {
  // FNV-1a, then one mixing round.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

// Counter-based splitmix generator. Hand-rolled (not <random>) so that
// identical seeds give identical bits on every platform and standard
// library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ShapeError("Rng::below(0)");
    std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// 256-level discrete standard normal, used for procedurally generated pixel
// noise. Entry i is the quantile at (i + 0.5)/256, rescaled so the discrete
// distribution has unit variance exactly. A pixel's noise value is then
// table[hash & 0xff], which makes noise channels recomputable from a seed
// instead of stored.

namespace detail {

inline double normal_quantile(double p) {
  // Bisection on the CDF; one-time setup cost only.
  double lo = -9.0, hi = 9.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    double cdf = 0.5 * (1.0 + std::erf(mid / 1.4142135623730950488));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

inline const std::array<float, 256>& discrete_normal_table() {
  static const std::array<float, 256> table = [] {
    std::array<double, 256> q{};
    double var = 0.0;
    for (int i = 0; i < 256; ++i) {
      q[i] = detail::normal_quantile((i + 0.5) / 256.0);
      var += q[i] * q[i];
    }
    var /= 256.0;
    double scale = 1.0 / std::sqrt(var);
    std::array<float, 256> out{};
    for (int i = 0; i < 256; ++i) out[i] = static_cast<float>(q[i] * scale);
    return out;
  }();
  return table;
}

// Deterministic per-pixel noise draw: z-score for (stream, flat index).
inline float hashed_normal(std::uint64_t stream, std::uint64_t index) {
  return discrete_normal_table()[splitmix64(stream ^ splitmix64(index)) & 0xff];
}

}  // namespace capf
