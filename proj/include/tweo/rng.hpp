#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tweo {

// Deterministic RNG for init, data order and synthetic probes.
// mt19937_64 has a pinned algorithm, and the gaussian transform is written
// out here instead of using std::normal_distribution, whose output sequence
// differs between standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform integer in [lo, hi] via rejection-free Lemire-style reduction is
  // overkill at this scale; modulo bias over a 64-bit draw is far below any
  // tolerance used in the tests.
  int64_t randint(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo + 1));
  }

  // standard normal, Marsaglia polar method with one cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tweo
