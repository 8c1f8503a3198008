#pragma once

#include <cstdint>
#include <string_view>

namespace rknet {

/// Counter-based generator: the i-th draw is a pure function of (key, i).
///
/// Built on the SplitMix64 output mix. A stream can be forked into
/// independent sub-streams by index, so the draws for (epoch, sample) do not
/// depend on the order in which samples are processed.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  // Independent generator keyed by (key, index); does not advance this one.
  CounterRng fork(std::uint64_t index) const;
  CounterRng fork(std::string_view label) const;

  static std::uint64_t mix(std::uint64_t x);

  friend bool operator==(const CounterRng&, const CounterRng&) = default;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace rknet
