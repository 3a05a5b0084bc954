#include "dyrate/numerics/rng.hpp"

namespace dyrate {
namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
    : key_(splitmix64(seed) ^ splitmix64(~stream * kGolden)) {}

std::uint64_t CounterRng::next_u64() noexcept {
  return splitmix64(key_ + kGolden * ++counter_);
}

double CounterRng::uniform() noexcept {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::uniform(double lo, double hi) noexcept {
  return lo + (hi - lo) * uniform();
}

std::size_t CounterRng::below(std::size_t n) noexcept {
  const unsigned __int128 wide =
      static_cast<unsigned __int128>(next_u64()) * static_cast<std::uint64_t>(n);
  return static_cast<std::size_t>(wide >> 64);
}

}  // namespace dyrate
