#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace csf {

// Distribution transforms are written out by hand so that every stream is
// reproducible bit-for-bit across compilers and standard libraries; only the
// mt19937_64 engine (whose output sequence is fixed by the standard) is reused.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return (engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n).  Rejection-free modulo bias is negligible for
  // the index ranges used here, but use Lemire-style rejection to stay exact.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t x, r;
    do {
      x = engine_();
      r = x % n;
    } while (x - r > std::uint64_t(0) - n);
    return r;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
  }

  double exponential(double rate = 1.0) {
    double u = uniform01();
    while (u >= 1.0) u = uniform01();
    return -std::log1p(-u) / rate;
  }

  // Poisson by CDF inversion; fine for the small means used in simulations.
  long poisson(double mean) {
    const double u = uniform01();
    double p = std::exp(-mean);
    double cdf = p;
    long k = 0;
    while (u > cdf && k < 10000000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }

  // First k entries of a random permutation of {0,...,n-1} (partial Fisher-Yates).
  void sample_indices(int n, int k, std::vector<int>& out, std::vector<int>& scratch) {
    scratch.resize(n);
    for (int i = 0; i < n; ++i) scratch[i] = i;
    if (k > n) k = n;
    out.resize(k);
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(scratch[i], scratch[j]);
      out[i] = scratch[i];
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stable seed derivation: mixes a base seed with stream tags so that distinct
// components (trees, reps, arms) get decorrelated, reproducible streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag1, std::uint64_t tag2) {
  return derive_seed(derive_seed(base, tag1), tag2);
}

}  // namespace csf
