#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace vralign {

/// Deterministic xoshiro256++ generator. All randomness in the library flows
/// through this type so that runs are bit-reproducible across platforms;
/// standard-library distributions are avoided on purpose (their output is
/// implementation defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the full state.
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53 bits of randomness.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached second value, keeps the
  /// consumption pattern predictable).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). Lemire multiply-shift; the bias for the small
  /// n used here is far below anything observable.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

/// FNV-1a 64-bit hash, used for stream naming and artifact fingerprints.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives a named stream from a master seed. Every consumer of randomness
/// (init / shuffle / sampler / data / dropout) pulls from its own stream so
/// that changing one consumer cannot perturb another.
inline Rng derive_stream(std::uint64_t master, std::string_view name) {
  std::uint64_t x = master ^ fnv1a64(name);
  return Rng(Rng::splitmix64(x));
}

/// A per-index substream (per patient, per epoch, per fold, ...).
inline Rng derive_stream(std::uint64_t master, std::string_view name, std::uint64_t index) {
  std::uint64_t x = master ^ fnv1a64(name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  return Rng(Rng::splitmix64(x));
}

}  // namespace vralign
