#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <map>
#include <set>
#include <string_view>
#include <vector>

#include "duet/rng.hpp"

using duet::RngStream;
using duet::shuffle;
using duet::stream;

namespace {

// Independent reference for the stream construction: SplitMix64-seeded
// xoshiro256** over seed ^ (rank * golden) ^ FNV-1a(label). Kept separate
// from the library implementation on purpose.
struct RefStream {
  std::uint64_t s[4];

  static std::uint64_t splitmix(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  RefStream(std::uint64_t seed, std::uint32_t rank, std::string_view label) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : label) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    std::uint64_t mix =
        seed ^ (std::uint64_t(rank) * 0x9E3779B97F4A7C15ull) ^ h;
    for (auto& w : s) w = splitmix(mix);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

}  // namespace

TEST_CASE("stream matches the specified mixing function", "[rng]") {
  const std::uint64_t seeds[] = {0, 1, 42, 0xDEADBEEFull};
  const std::uint32_t ranks[] = {0, 1, 3};
  const char* labels[] = {"init", "shuffle:epoch_0", "augment", "synth"};
  for (auto seed : seeds) {
    for (auto rank : ranks) {
      for (auto label : labels) {
        RngStream s = stream(seed, rank, label);
        RefStream ref(seed, rank, label);
        for (int i = 0; i < 8; ++i) {
          REQUIRE(s.next_u64() == ref.next());
        }
      }
    }
  }
}

TEST_CASE("identical keys give identical sequences", "[rng]") {
  RngStream a = stream(0, 0, "init");
  RngStream b = stream(0, 0, "init");
  for (int i = 0; i < 10; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("rank and label changes decorrelate streams", "[rng]") {
  SECTION("rank changes the first output") {
    RngStream a = stream(0, 0, "init");
    RngStream b = stream(0, 1, "init");
    REQUIRE(a.next_u64() != b.next_u64());
  }
  SECTION("first 256 bits differ across distinct keys") {
    const std::uint32_t ranks[] = {0, 1, 2};
    const char* labels[] = {"init", "shuffle", "augment"};
    std::set<std::vector<std::uint64_t>> seen;
    for (auto rank : ranks) {
      for (auto label : labels) {
        RngStream s = stream(7, rank, label);
        std::vector<std::uint64_t> first4;
        for (int i = 0; i < 4; ++i) first4.push_back(s.next_u64());
        REQUIRE(seen.insert(first4).second);
      }
    }
  }
}

TEST_CASE("label validation", "[rng]") {
  REQUIRE_THROWS_AS(stream(0, 0, ""), duet::BadLabel);
  REQUIRE_THROWS_AS(stream(0, 0, std::string(33, 'x')), duet::BadLabel);
  REQUIRE_NOTHROW(stream(0, 0, std::string(32, 'x')));
}

TEST_CASE("uniform range and argument checks", "[rng]") {
  RngStream s = stream(1, 0, "u");
  for (int i = 0; i < 1000; ++i) {
    const double v = s.uniform(0.0, 1.0);
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
  }
  REQUIRE_THROWS_AS(s.uniform(1.0, 1.0), duet::BadRange);
  REQUIRE_THROWS_AS(s.uniform(2.0, 1.0), duet::BadRange);
  REQUIRE_THROWS_AS(s.normal(0.0, -1.0), duet::BadRange);
}

TEST_CASE("uniform empirical mean over 1e5 draws", "[rng]") {
  RngStream s = stream(0, 0, "mean");
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) acc += s.uniform(0.0, 1.0);
  const double mean = acc / n;
  REQUIRE(mean > 0.495);
  REQUIRE(mean < 0.505);
}

TEST_CASE("normal with zero sigma is exactly the mean", "[rng]") {
  RngStream s = stream(0, 0, "n");
  REQUIRE(s.normal(0.0, 0.0) == 0.0);
  REQUIRE(s.normal(2.5, 0.0) == 2.5);
}

TEST_CASE("normal consumes exactly two raw draws", "[rng]") {
  RngStream s = stream(0, 0, "n");
  const auto before = s.draw_count();
  (void)s.normal(0.0, 1.0);
  REQUIRE(s.draw_count() == before + 2);
  (void)s.normal(0.0, 0.0);
  REQUIRE(s.draw_count() == before + 4);
}

TEST_CASE("record and replay reproduces intermediate state", "[rng]") {
  RngStream a = stream(9, 2, "replay");
  for (int i = 0; i < 137; ++i) a.next_u64();
  RngStream b = stream(9, 2, "replay");
  b.skip(137);
  for (int i = 0; i < 5; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("streams are pure functions of their key", "[rng]") {
  RngStream a = stream(3, 1, "pure");
  const std::uint64_t first = a.next_u64();
  // Interleave unrelated work on other streams.
  RngStream noise = stream(99, 5, "noise");
  for (int i = 0; i < 64; ++i) noise.next_u64();
  RngStream b = stream(3, 1, "pure");
  REQUIRE(b.next_u64() == first);
}

TEST_CASE("shuffle basics", "[rng]") {
  RngStream s = stream(0, 0, "perm");
  REQUIRE(shuffle(s, 0).empty());
  REQUIRE(shuffle(s, 1) == std::vector<std::size_t>{0});
  RngStream a = stream(5, 0, "perm");
  RngStream b = stream(5, 0, "perm");
  REQUIRE(shuffle(a, 100) == shuffle(b, 100));
  const auto perm = shuffle(a, 50);
  std::set<std::size_t> uniq(perm.begin(), perm.end());
  REQUIRE(uniq.size() == 50);
}

TEST_CASE("shuffle of n=4 hits all permutations uniformly", "[rng]") {
  RngStream s = stream(0, 0, "chisq");
  std::map<std::vector<std::size_t>, int> counts;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) counts[shuffle(s, 4)]++;
  REQUIRE(counts.size() == 24);
  for (const auto& [perm, count] : counts) {
    const double freq = static_cast<double>(count) / trials;
    REQUIRE(freq > 1.0 / 24 - 0.01);
    REQUIRE(freq < 1.0 / 24 + 0.01);
  }
}
