#ifndef CL2GD_RNG_HPP_
#define CL2GD_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>

namespace cl2gd {

/// SplitMix64 finalizer; used to derive independent engine seeds from
/// (master seed, stream id) pairs.
constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Well-known stream ids. Client streams are kClientBase + i.
namespace stream {
inline constexpr std::uint64_t kCoin = 1;
inline constexpr std::uint64_t kMaster = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kClientBase = 1000;
}  // namespace stream

/// A seeded random stream. mt19937_64 is fully specified by the standard and
/// the conversions below do not go through std::*_distribution, so the
/// sequence is identical on every platform.
class Stream {
 public:
  Stream() : Stream(0, 0) {}
  Stream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), id_(stream_id),
        engine_(splitmix64(splitmix64(seed) ^ splitmix64(stream_id + 0x51ed27))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t id() const { return id_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double prob) { return uniform() < prob; }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    // Lemire-free simple rejection; bound is small in practice.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % bound;
  }

  /// Standard normal via Box-Muller (one value per call, the pair partner is
  /// cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t id_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cl2gd

#endif  // CL2GD_RNG_HPP_
