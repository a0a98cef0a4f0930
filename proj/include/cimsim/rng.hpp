#pragma once

#include <cstdint>
#include <initializer_list>

namespace cimsim {

/// splitmix64 as a UniformRandomBitGenerator. Construction is free, which
/// matters because every cell and every MVM invocation gets its own engine.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  constexpr explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  static constexpr std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  constexpr result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return finalize(state_);
  }

 private:
  std::uint64_t state_;
};

using Engine = SplitMix64;

/// Hierarchically keyed random stream.
///
/// A stream is just a 64-bit key. Children are derived from (parent key, tag),
/// so any execution order that derives the same keys observes the same draws.
/// This is what lets the OpenMP kernels and the serial reference kernels
/// produce bit-identical results.
class RngStream {
 public:
  constexpr explicit RngStream(std::uint64_t key = 0) : key_(key) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    return SplitMix64::finalize(z + 0x9e3779b97f4a7c15ULL);
  }

  constexpr RngStream derive(std::uint64_t tag) const {
    return RngStream(mix(key_ ^ mix(tag)));
  }

  constexpr RngStream derive(std::initializer_list<std::uint64_t> tags) const {
    RngStream s = *this;
    for (auto t : tags) s = s.derive(t);
    return s;
  }

  Engine engine() const { return Engine(key_); }

  constexpr std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

}  // namespace cimsim
