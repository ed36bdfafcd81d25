#ifndef SPREFINE_RANDOM_HPP
#define SPREFINE_RANDOM_HPP

#include <cmath>
#include <cstdint>
#include <numbers>

namespace sprefine {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

/// Counter-based stream: draw n is a pure function of (key, n), so results do
/// not depend on thread scheduling or on how many draws other streams made.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per two draws).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream.
  RandomStream split(std::uint64_t tag) const { return RandomStream(mix_key(key_, tag), 0); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace sprefine

#endif
