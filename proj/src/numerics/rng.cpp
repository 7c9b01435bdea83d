// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/numerics/rng.hpp"

#include <cmath>
#include <numbers>

namespace qsd::num {

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::string stream_id)
    : seed_(seed), stream_id_(std::move(stream_id)) {
  key_ = mix64(mix64(seed_ + 0x9e3779b97f4a7c15ULL) ^ fnv1a64(stream_id_));
}

RngStream RngStream::child(std::string_view suffix) const {
  std::string id = stream_id_;
  id += '/';
  id += suffix;
  return RngStream(seed_, std::move(id));
}

std::uint64_t RngStream::next_u64() noexcept {
  const std::uint64_t c = counter_++;
  // Two rounds: the inner one decorrelates consecutive counters before
  // they are combined with the key.
  return mix64(key_ ^ mix64(c * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_int(std::uint64_t n) noexcept {
  // Multiply-shift; bias is below 2^-64 * n and irrelevant here.
  const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(prod >> 64);
}

double RngStream::normal() noexcept {
  // Box-Muller, cosine branch only, from one 64-bit draw split in two
  // 32-bit halves. u1 lies in (0, 1] so the logarithm is finite.
  const std::uint64_t bits = next_u64();
  const double u1 = (static_cast<double>(bits >> 32) + 1.0) * 0x1.0p-32;
  const double u2 = static_cast<double>(bits & 0xffffffffULL) * 0x1.0p-32;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace qsd::num
