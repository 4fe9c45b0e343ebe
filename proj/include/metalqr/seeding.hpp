#pragma once

// Counter-based seed derivation. A stream is identified by a 64-bit key;
// child streams are derived by hashing (key, index), so the stream used for
// any (system, meta-perturbation, inner-perturbation) cell depends only on
// its coordinates and never on execution order.

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace metalqr {

/// SplitMix64 output finalizer (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// SplitMix64 generator; models UniformRandomBitGenerator.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

 private:
  std::uint64_t state_;
};

class SeedStream {
 public:
  constexpr explicit SeedStream(std::uint64_t key = 0) : key_(key) {}

  constexpr SeedStream child(std::uint64_t index) const {
    return SeedStream(mix64(key_ ^ mix64(index + 0x632be59bd9b4e019ULL)));
  }

  constexpr SeedStream at(std::initializer_list<std::uint64_t> path) const {
    SeedStream s = *this;
    for (auto i : path) s = s.child(i);
    return s;
  }

  constexpr SplitMix64 engine() const { return SplitMix64(key_); }
  constexpr std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

/// Purpose tags keeping sibling streams apart.
namespace stream_tag {
inline constexpr std::uint64_t meta_perturbation = 1;
inline constexpr std::uint64_t inner = 2;
inline constexpr std::uint64_t perturbation = 3;
inline constexpr std::uint64_t rollout = 4;
inline constexpr std::uint64_t outer_rollout = 5;
inline constexpr std::uint64_t batch = 6;
inline constexpr std::uint64_t iteration = 7;
}  // namespace stream_tag

}  // namespace metalqr
