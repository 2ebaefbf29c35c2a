#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "gopt/bfloat16.hpp"

namespace gopt {

enum class ScalarKind { binary64, binary32, bfloat16_storage };

inline const char* to_string(ScalarKind k) {
  switch (k) {
    case ScalarKind::binary64: return "binary64";
    case ScalarKind::binary32: return "binary32";
    case ScalarKind::bfloat16_storage: return "bfloat16_storage";
  }
  return "?";
}

inline int bit_width(ScalarKind k) {
  switch (k) {
    case ScalarKind::binary64: return 64;
    case ScalarKind::binary32: return 32;
    case ScalarKind::bfloat16_storage: return 16;
  }
  return 0;
}

/// Graph precision (descriptors, residuals, reductions) paired with the
/// linear-system storage precision. The system precision never exceeds the
/// graph precision in width.
struct PrecisionPair {
  ScalarKind graph_precision = ScalarKind::binary64;
  ScalarKind system_precision = ScalarKind::binary64;

  bool valid() const {
    if (graph_precision == ScalarKind::bfloat16_storage) return false;
    return bit_width(system_precision) <= bit_width(graph_precision);
  }

  void validate() const {
    if (!valid())
      throw std::invalid_argument(
          std::string("invalid precision pair: graph=") + to_string(graph_precision) +
          " system=" + to_string(system_precision));
  }
};

template <typename T>
struct scalar_kind_of;
template <>
struct scalar_kind_of<double> {
  static constexpr ScalarKind value = ScalarKind::binary64;
};
template <>
struct scalar_kind_of<float> {
  static constexpr ScalarKind value = ScalarKind::binary32;
};
template <>
struct scalar_kind_of<bfloat16> {
  static constexpr ScalarKind value = ScalarKind::bfloat16_storage;
};

template <typename T>
inline constexpr ScalarKind scalar_kind_of_v = scalar_kind_of<T>::value;

/// Arithmetic type backing a storage type: bfloat16 widens to float,
/// everything else computes in its own type.
template <typename SP>
struct arith_type {
  using type = SP;
};
template <>
struct arith_type<bfloat16> {
  using type = float;
};
template <typename SP>
using arith_t = typename arith_type<SP>::type;

template <typename SP>
inline constexpr std::size_t storage_width_v = sizeof(SP);

/// Round-to-nearest-even narrowing into the storage type.
template <typename SP, typename From>
inline SP narrow(From x) {
  if constexpr (std::is_same_v<SP, bfloat16>) {
    return bfloat16(static_cast<float>(x));
  } else {
    return static_cast<SP>(x);
  }
}

/// Exact widening out of the storage type.
template <typename To, typename SP>
inline To widen(SP x) {
  return static_cast<To>(x);
}

}  // namespace gopt
