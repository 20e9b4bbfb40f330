#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace flowvocoder {

// Deterministic RNG. mt19937_64 output is pinned by the standard, and the
// transforms below avoid std::*_distribution (whose algorithms are
// implementation-defined), so identical seeds give identical streams
// everywhere we build.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1), 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). Rejection-free modulo is fine here: n is tiny next to
  // 2^64 so the bias is unobservable, and determinism is what matters.
  uint64_t uniform_int(uint64_t n) { return engine_() % n; }

  // Standard normal via Box-Muller (cosine branch only, so there is no spare
  // sample to carry across serialization).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a 64-bit, used for the machine-independent train/test split.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace flowvocoder
