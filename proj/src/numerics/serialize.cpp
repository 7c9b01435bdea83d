// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/numerics/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "qsd/error.hpp"

namespace qsd::num {

namespace {
template <class U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) throw IoError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxString = 1u << 26;
}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > kMaxString) throw IoError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("unexpected end of stream in string");
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  const std::uint64_t len = 8 + 8 * t.rank() + 4 * t.numel();
  write_u64(os, len);
  write_u64(os, t.rank());
  for (auto d : t.shape()) write_u64(os, d);
  for (float v : t.data()) write_f32(os, v);
}

Tensor read_tensor(std::istream& is) {
  const std::uint64_t len = read_u64(is);
  const std::uint64_t rank = read_u64(is);
  if (rank == 0 || rank > kMaxRank) throw IoError("tensor block: invalid rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = read_u64(is);
    if (d == 0 || d > (1ULL << 32)) throw IoError("tensor block: invalid dimension");
    n *= d;
  }
  if (len != 8 + 8 * rank + 4 * n) throw IoError("tensor block: length prefix does not match shape");
  std::vector<float> v(n);
  for (auto& x : v) x = read_f32(is);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace qsd::num
