#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>

namespace mtlab {

// xoshiro256** generator with an explicit, serializable state. Every draw
// advances `draws` so checkpoints can record how far a stream has progressed.
class RngState {
 public:
  using result_type = std::uint64_t;

  RngState() : RngState(0) {}
  explicit RngState(std::uint64_t seed);
  RngState(const std::array<std::uint64_t, 4>& words, std::uint64_t draws) : s_(words), draws_(draws) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next(); }
  std::uint64_t next();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n), rejection sampled (no modulo bias).
  std::size_t index(std::size_t n);
  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream (used to give workers or evaluators their own
  // sequence without perturbing this one beyond a single draw).
  RngState split();

  const std::array<std::uint64_t, 4>& words() const { return s_; }
  std::uint64_t draws() const { return draws_; }

  friend bool operator==(const RngState&, const RngState&) = default;

 private:
  std::array<std::uint64_t, 4> s_{};
  std::uint64_t draws_ = 0;
};

}  // namespace mtlab
