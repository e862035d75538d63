#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace trigger_scope {

// Deterministic pseudo-random generator used everywhere randomness is needed.
//
// The core is splitmix64 (Steele, Lea & Flood 2014). It is trivially portable,
// so seeded runs produce the same draw sequence on every platform. The draw
// contract per call:
//   next_u64  -> one splitmix64 step
//   next_real -> one step, 53-bit mantissa in [0, 1)
//   below(n)  -> one step, value = step % n
//   normal()  -> two steps, Box-Muller, no cached spare
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double next_real() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Modulo reduction; the bias is ~n/2^64 and
  // irrelevant at the set sizes used here.
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller. u1 is mapped into (0, 1] so the log is
  // always finite.
  double normal() {
    const double u1 =
        static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_real();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Fisher-Yates, descending index order.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

private:
  std::uint64_t state_;
};

// Deterministic sub-seed for a named stream (per-instance poisoning, model
// init, shuffling, ...). Independent of call order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  return rng.next_u64();
}

}  // namespace trigger_scope
