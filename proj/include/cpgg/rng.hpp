#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace cpgg {

/// Counter-based generator: output n is a pure function of (seed, stream, n).
/// Child streams are derived by index, so work split across threads or
/// reordered draws the same numbers.
class Rng {
 public:
  struct State {
    uint64_t seed = 0;
    uint64_t stream = 0;
    uint64_t counter = 0;
  };

  explicit Rng(uint64_t seed = 0, uint64_t stream = 0) : state_{seed, stream, 0} {}
  explicit Rng(State s) : state_(s) {}

  const State& state() const { return state_; }

  uint64_t next_u64() { return mix(key() + 0x9E3779B97F4A7C15ULL * (++state_.counter)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two counters per draw.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) (Lemire's multiply-shift, bias < 2^-64 * n).
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream keyed by index; does not advance this stream.
  Rng derive(uint64_t index) const {
    return Rng(mix(key() ^ mix(index + 0xD1B54A32D192ED03ULL)), 0);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  uint64_t key() const { return mix(state_.seed * 0xA0761D6478BD642FULL + mix(state_.stream)); }

  State state_;
};

}  // namespace cpgg
