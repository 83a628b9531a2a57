#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "duet/errors.hpp"

namespace duet {

/// Portable deterministic random stream keyed by (seed, rank, label).
///
/// Streams are pure values: the output bit sequence is a function of the
/// key and the number of raw draws taken, independent of platform, thread
/// count, or anything drawn from other streams. Weight init and the epoch
/// shuffle are created with rank 0 on every worker (shared across ranks);
/// data-pipeline streams use the worker's real rank.
class RngStream {
public:
  static constexpr std::size_t kMaxLabelBytes = 32;
  static constexpr const char* kAlgorithmId =
      "xoshiro256**/splitmix64/fnv1a64";

  RngStream(std::uint64_t seed, std::uint32_t rank, std::string_view label)
      : seed_(seed), rank_(rank), label_(label) {
    if (label.empty() || label.size() > kMaxLabelBytes) {
      throw BadLabel("label must be 1.." + std::to_string(kMaxLabelBytes) +
                     " bytes, got \"" + std::string(label) + "\"");
    }
    std::uint64_t mix = seed ^
                        (static_cast<std::uint64_t>(rank) *
                         0x9E3779B97F4A7C15ull) ^
                        fnv1a64(label);
    std::uint64_t sm = mix;
    for (auto& word : state_) word = splitmix64(sm);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint32_t rank() const { return rank_; }
  const std::string& label() const { return label_; }
  std::uint64_t draw_count() const { return draw_count_; }

  /// One raw 64-bit draw (xoshiro256**).
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    ++draw_count_;
    return result;
  }

  /// Advance by n raw draws (record-and-replay support).
  void skip(std::uint64_t n) {
    for (std::uint64_t i = 0; i < n; ++i) next_u64();
  }

  /// Uniform in [a, b). One raw draw.
  double uniform(double a, double b) {
    if (!(a < b)) {
      throw BadRange("uniform requires a < b, got [" + std::to_string(a) +
                     ", " + std::to_string(b) + ")");
    }
    double v = a + (b - a) * unit_double();
    if (v >= b) v = std::nextafter(b, a);
    return v;
  }

  /// Normal via Box-Muller. Always consumes exactly two raw draws so
  /// streams stay alignable across code paths.
  double normal(double mu, double sigma) {
    if (sigma < 0.0) {
      throw BadRange("normal requires sigma >= 0, got " +
                     std::to_string(sigma));
    }
    const double u1 =
        static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    const double z =
        std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mu + sigma * z;
  }

  /// Uniform integer in [0, n). One raw draw. The modulo bias is below
  /// 2^-32 for every n used here.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw BadRange("bounded requires n > 0");
    return next_u64() % n;
  }

private:
  double unit_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;  // [0, 1)
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

  std::uint64_t seed_;
  std::uint32_t rank_;
  std::string label_;
  std::uint64_t state_[4]{};
  std::uint64_t draw_count_ = 0;
};

/// Factory matching the (seed, rank, label) naming used throughout.
inline RngStream stream(std::uint64_t seed, std::uint32_t rank,
                        std::string_view label) {
  return RngStream(seed, rank, label);
}

/// Fisher-Yates permutation of 0..n-1. Consumes n-1 raw draws for n >= 2.
inline std::vector<std::size_t> shuffle(RngStream& s, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(s.bounded(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

}  // namespace duet
