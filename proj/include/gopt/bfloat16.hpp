#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace gopt {

/// Storage-only 16-bit brain floating point: the top 16 bits of a binary32
/// (1 sign, 8 exponent, 7 mantissa bits). All arithmetic happens after
/// widening to float; narrowing rounds to nearest-even.
struct bfloat16 {
  std::uint16_t bits = 0;

  bfloat16() = default;

  explicit bfloat16(float f) { bits = round_from(f); }
  explicit bfloat16(double d) : bfloat16(static_cast<float>(d)) {}

  explicit operator float() const {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
  }
  explicit operator double() const { return static_cast<float>(*this); }

  static std::uint16_t round_from(float f) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    if (std::isnan(f)) {
      // keep a quiet NaN with the original sign
      return static_cast<std::uint16_t>(((u >> 16) & 0x8000u) | 0x7FC0u);
    }
    std::uint32_t rounding_bias = 0x7FFFu + ((u >> 16) & 1u);
    return static_cast<std::uint16_t>((u + rounding_bias) >> 16);
  }
};

inline bool operator==(bfloat16 a, bfloat16 b) { return static_cast<float>(a) == static_cast<float>(b); }
inline bool operator!=(bfloat16 a, bfloat16 b) { return !(a == b); }

}  // namespace gopt
