// SPDX-License-Identifier: Apache-2.0
//
// Shared vocabulary: vertex ids, id ranges, element types, alignment and the
// library error type.

#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pushgnn {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and written with memcpy");

using VertexId = std::uint64_t;

/// Half-open vertex id interval [begin, end).
struct IdRange {
  VertexId begin = 0;
  VertexId end = 0;

  [[nodiscard]] constexpr std::uint64_t size() const { return end - begin; }
  [[nodiscard]] constexpr bool empty() const { return end <= begin; }
  [[nodiscard]] constexpr bool contains(VertexId v) const { return v >= begin && v < end; }
  /// True when the closed interval [lo, hi] intersects this range.
  [[nodiscard]] constexpr bool overlaps_closed(VertexId lo, VertexId hi) const {
    return lo < end && hi >= begin;
  }
  friend constexpr bool operator==(const IdRange&, const IdRange&) = default;
};

enum class DType : std::uint8_t { f32 = 0, f16 = 1 };

constexpr std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 2; }

inline std::string_view dtype_name(DType t) { return t == DType::f32 ? "f32" : "f16"; }

constexpr std::size_t kAlignment = 4096;

constexpr std::uint64_t align_up(std::uint64_t n, std::uint64_t a = kAlignment) {
  return (n + a - 1) / a * a;
}
constexpr std::uint64_t align_down(std::uint64_t n, std::uint64_t a = kAlignment) {
  return n / a * a;
}

enum class Errc {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  offsets_not_monotonic,
  invalid_graph,
  out_of_range,
  malformed_input,
  precondition,
  coverage_gap,
  dim_mismatch,
  duplicate_vertex,
  contract_violation,
  consistency,
  illegal_transition,
  config,
  missing_messages,
  shape_mismatch,
  scale_guard,
  cancelled,
};

inline std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::truncated: return "truncated";
    case Errc::offsets_not_monotonic: return "offsets_not_monotonic";
    case Errc::invalid_graph: return "invalid_graph";
    case Errc::out_of_range: return "out_of_range";
    case Errc::malformed_input: return "malformed_input";
    case Errc::precondition: return "precondition";
    case Errc::coverage_gap: return "coverage_gap";
    case Errc::dim_mismatch: return "dim_mismatch";
    case Errc::duplicate_vertex: return "duplicate_vertex";
    case Errc::contract_violation: return "contract_violation";
    case Errc::consistency: return "consistency";
    case Errc::illegal_transition: return "illegal_transition";
    case Errc::config: return "config";
    case Errc::missing_messages: return "missing_messages";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::scale_guard: return "scale_guard";
    case Errc::cancelled: return "cancelled";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  [[nodiscard]] Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

/// "4096", "64K", "64KiB", "8M", "8MiB", "1G", "1GiB" (binary multiples).
inline std::uint64_t parse_byte_size(std::string_view s) {
  std::uint64_t n = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc{} || end == s.data()) fail(Errc::config, "bad size '" + std::string(s) + "'");
  std::string_view unit(end, static_cast<std::size_t>(s.data() + s.size() - end));
  std::uint64_t mult = 1;
  if (unit.empty() || unit == "B") mult = 1;
  else if (unit == "K" || unit == "KiB") mult = 1ull << 10;
  else if (unit == "M" || unit == "MiB") mult = 1ull << 20;
  else if (unit == "G" || unit == "GiB") mult = 1ull << 30;
  else fail(Errc::config, "bad size unit in '" + std::string(s) + "'");
  return n * mult;
}

// IEEE 754 binary16 storage. Arithmetic always happens in f32.
struct Half {
  std::uint16_t bits = 0;
  friend constexpr bool operator==(Half, Half) = default;
};

inline float half_to_float(Half h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h.bits & 0x8000u) << 16;
  std::uint32_t exp = (h.bits >> 10) & 0x1fu;
  std::uint32_t mant = h.bits & 0x3ffu;
  std::uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      mant &= 0x3ffu;
      out = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

inline Half float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs >= 0x7f800000u) {  // inf / nan
    const std::uint16_t nan_bit = abs > 0x7f800000u ? 0x200u : 0u;
    return Half{static_cast<std::uint16_t>(sign | 0x7c00u | nan_bit)};
  }
  if (abs >= 0x477ff000u) return Half{static_cast<std::uint16_t>(sign | 0x7c00u)};  // overflow
  if (abs < 0x33000001u) return Half{sign};  // rounds to zero
  std::uint32_t exp = abs >> 23;
  std::uint32_t mant = abs & 0x7fffffu;
  if (exp < 113) {
    // subnormal half
    mant |= 0x800000u;
    const std::uint32_t shift = 126 - exp;
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
    return Half{static_cast<std::uint16_t>(sign | h)};
  }
  std::uint32_t h = ((exp - 112) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return Half{static_cast<std::uint16_t>(sign | h)};
}

}  // namespace pushgnn
