#pragma once

// Counter-based random streams.
//
// Every draw is a pure function of (seed, path, step, channel, draw index),
// so simulated paths do not depend on iteration order or thread schedule.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace levydual {

/// Philox4x32 with 10 rounds (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static constexpr Counter generate(Counter ctr, Key key) noexcept {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }
};

/// Named sub-streams of a path step.
enum class Channel : std::uint32_t {
  kBrownian = 0,
  kBridge = 1,
  kRestart = 2,
  kJumpBase = 16,  // atom i uses kJumpBase + i
};

/// A stream of uniforms/normals for one (seed, path, step, channel) coordinate.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, std::uint32_t path, std::uint32_t step,
                std::uint32_t channel) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        path_(path),
        step_(step),
        channel_(channel) {}

  /// Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() noexcept {
    if (buffered_ == 0) refill();
    return buffer_[--buffered_];
  }

  double normal() noexcept {
    if (has_spare_normal_) {
      has_spare_normal_ = false;
      return spare_normal_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_normal_ = radius * std::sin(angle);
    has_spare_normal_ = true;
    return radius * std::cos(angle);
  }

  double exponential(double rate) noexcept { return -std::log(uniform()) / rate; }

 private:
  void refill() noexcept {
    const auto out = Philox4x32::generate({path_, step_, channel_, block_++}, key_);
    buffer_[0] = to_unit(out[0], out[1]);
    buffer_[1] = to_unit(out[2], out[3]);
    buffered_ = 2;
  }

  static double to_unit(std::uint32_t a, std::uint32_t b) noexcept {
    const std::uint64_t bits = (std::uint64_t{a >> 5} << 26) | std::uint64_t{b >> 6};
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  Philox4x32::Key key_;
  std::uint32_t path_;
  std::uint32_t step_;
  std::uint32_t channel_;
  std::uint32_t block_ = 0;
  std::array<double, 2> buffer_{};
  int buffered_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_normal_ = false;
};

}  // namespace levydual
