#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace apn {

// Counter-based deterministic generator (splitmix64 finalizer over a keyed
// counter). A draw is a pure function of (key, counter), so streams can be
// forked by label or lane without consuming state from the parent. Forking
// by label keeps unrelated consumers on disjoint streams: adding a new
// consumer does not shift anyone else's draws.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  // Independent stream derived from a string label.
  Rng fork(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : label) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return Rng(key_, mix(key_ ^ mix(h)));
  }

  // Independent stream derived from an integer lane.
  Rng fork(std::uint64_t lane) const {
    return Rng(key_, mix(key_ ^ mix(lane * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull)));
  }

  std::uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ull;
    return mix(key_ ^ counter_);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uint64_t span = std::uint64_t(hi - lo) + 1;
    return lo + std::int64_t(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; draws exactly two uniforms per call.
  double normal() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

private:
  Rng(std::uint64_t /*parent_key*/, std::uint64_t derived_key) : key_(derived_key) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace apn
