#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

namespace vseg {

// Deterministic RNG. mt19937_64 output is specified by the standard, and the
// distributions below are implemented here rather than with std::*_distribution
// (whose algorithms are implementation-defined), so identical seeds give
// identical streams on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    // Rejection sampling to avoid modulo bias.
    const uint64_t un = uint64_t(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return int64_t(x % un);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Exact state capture/restore (engine + Box-Muller spare) for resumable runs.
  std::string state() const {
    std::ostringstream os;
    os << eng_ << " " << (has_spare_ ? 1 : 0) << " " << bits_of(spare_);
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    int flag = 0;
    uint64_t bits = 0;
    is >> flag >> bits;
    has_spare_ = flag != 0;
    spare_ = double_of(bits);
  }

  // Derives an independent stream seed from a master seed (splitmix64 mix).
  static uint64_t derive(uint64_t master, uint64_t stream) {
    uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t bits_of(double d) {
    uint64_t u;
    static_assert(sizeof(u) == sizeof(d));
    std::memcpy(&u, &d, sizeof(u));
    return u;
  }
  static double double_of(uint64_t u) {
    double d;
    std::memcpy(&d, &u, sizeof(d));
    return d;
  }

  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace vseg
