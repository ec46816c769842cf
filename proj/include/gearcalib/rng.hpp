#pragma once

// Counter-based random numbers.
//
// Every stochastic component draws from Philox4x32-10 (Salmon et al., SC'11).
// A generator is fully determined by a 64-bit key and a 64-bit stream id; the
// 128-bit counter is (block index, stream id). Each counter block yields two
// 64-bit outputs. Distributions come from Boost.Random, whose algorithms are
// header-defined and therefore identical on every platform, unlike the
// implementation-defined std:: distributions.

#include <array>
#include <cstdint>
#include <limits>

#include <boost/random/binomial_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace gearcalib {

/// Philox4x32-10 block function.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

/// 64-bit mixer used to derive sub-seeds (SplitMix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

class Philox {
 public:
  using result_type = std::uint64_t;

  explicit Philox(std::uint64_t key = 0, std::uint64_t stream = 0)
      : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)},
        stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (lane_ == 2) refill();
    return buffer_[lane_++];
  }

  /// Skips whole blocks; draws are a pure function of (key, stream, position).
  void discard_blocks(std::uint64_t blocks) {
    block_ += blocks;
    lane_ = 2;
  }

  std::uint64_t stream() const { return stream_; }

 private:
  void refill();

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int lane_ = 2;
};

/// Convenience sampling front-end over a Philox stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) : engine_(seed, stream) {}

  double uniform() { return boost::random::uniform_01<double>()(engine_); }
  double normal() { return boost::random::normal_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Poisson variate; a non-positive or non-finite mean yields 0.
  std::int64_t poisson(double mean);
  std::int64_t binomial(std::int64_t trials, double p);

  Philox& engine() { return engine_; }

 private:
  Philox engine_;
};

}  // namespace gearcalib
