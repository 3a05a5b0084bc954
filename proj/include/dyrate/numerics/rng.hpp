#pragma once

#include <cstddef>
#include <cstdint>

namespace dyrate {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Counter-based generator: draw i of (seed, stream) is a pure function of
// the triple, so streams can be split across sessions without coordination.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  // Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept;
  // Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n) noexcept;

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dyrate
