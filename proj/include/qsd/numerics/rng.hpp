// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace qsd::num {

/// Counter-based random stream.
///
/// Draw `i` of a stream is a pure function of (seed, stream id, i): the
/// 64-bit key is derived from the seed and a hash of the stream id, and each
/// draw hashes the key together with the counter. Streams can therefore be
/// re-created anywhere and consumed in any order without coordination.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Jumps to an absolute draw index.
  void set_counter(std::uint64_t c) noexcept { counter_ = c; }

  /// Derived stream "<id>/<suffix>" with the same seed.
  RngStream child(std::string_view suffix) const;

  /// Raw 64 random bits; advances the counter by one.
  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() noexcept;

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) noexcept;

  /// Standard normal draw (one counter step per draw).
  double normal() noexcept;

 private:
  std::uint64_t seed_;
  std::string stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) noexcept;

}  // namespace qsd::num
