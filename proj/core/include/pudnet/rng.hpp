#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace pudnet {

// xoshiro256** seeded through splitmix64. Every distribution below is
// implemented here so that a seed reproduces the same stream on any platform
// (the <random> distributions are implementation-defined).
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**/splitmix64";

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream derived from the root seed and a label.
  /// Depends only on (seed, label, index), never on how much of this
  /// stream has been consumed.
  Rng split(std::string_view label, std::uint64_t index = 0) const;

  template <class E>
  void shuffle(std::span<E> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace pudnet
