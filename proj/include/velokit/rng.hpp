#pragma once

#include <cmath>
#include <cstdint>

namespace velokit {

// Counter-based generator (SplitMix64 over a Weyl sequence). A draw depends
// only on (seed, stream, counter), so per-gene substreams produce the same
// values no matter which order genes are processed in. That keeps datasets
// bit-identical under parallel generation.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(finalize(finalize(seed + kWeyl) ^ (kStreamSalt * (stream + 1)))) {}

  // Independent child stream; `id` may be a gene/cell index or a purpose tag.
  CounterRng substream(std::uint64_t id) const noexcept {
    return CounterRng(key_, id);
  }

  std::uint64_t next_u64() noexcept {
    have_spare_ = false;
    return finalize(key_ + kWeyl * ++ctr_);
  }

  // Uniform on [0, 1).
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1]; safe as a log() argument.
  double uniform_pos() noexcept {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  // Standard normal via Box-Muller, caching the second draw of each pair.
  double normal() noexcept {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
    const double a = 6.283185307179586476925286766559 * uniform();
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static constexpr std::uint64_t kWeyl = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kStreamSalt = 0xda942042e4dd58b5ULL;

  static std::uint64_t finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace velokit
