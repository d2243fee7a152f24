#pragma once

#include <array>
#include <cstdint>

#include "dyngrain/tensor.hpp"

namespace dyngrain {

/// Philox4x32-10 counter-based generator. A draw is a pure function of
/// (seed, stream, counter), so sequences are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  /// Number of 32-bit words consumed so far.
  std::uint64_t draws() const { return counter_ * 4 - static_cast<std::uint64_t>(4 - cursor_); }

  /// Independent generator for a named sub-stream.
  Rng fork(std::uint64_t stream) const;

  std::uint32_t next_u32();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in (0, 1].
  double uniform_open();
  float normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr,
                                             std::array<std::uint32_t, 2> key);

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int cursor_ = 4;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

Tensor randn(Shape shape, Rng& rng);
Tensor rand_uniform(Shape shape, Rng& rng, float lo = 0.0f, float hi = 1.0f);

/// Mixes a textual stream label into a 64-bit stream id (FNV-1a).
std::uint64_t stream_id(const char* label);

}  // namespace dyngrain
