#pragma once

// Deterministic parameter initialization.  Every component derives its own
// RNG stream from (user seed, component path), so adding or removing a
// sibling component never shifts another component's initial values, and the
// same path yields identical parameters across model variants.  Draws use an
// explicit 53-bit mapping rather than std::uniform_real_distribution, whose
// output is implementation-defined.

#include <cmath>
#include <random>
#include <string_view>

#include "gesme/common.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view component_path) {
    return Rng(fnv1a(component_path, seed));
}

inline double uniform_draw(Rng& rng, double lo, double hi) {
    const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
    return lo + (hi - lo) * unit;
}

template <typename T>
void uniform_fill(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.values()) v = static_cast<T>(uniform_draw(rng, lo, hi));
}

// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_fill(Tensor<T>& t, Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    uniform_fill(t, rng, -a, a);
}

}  // namespace gesme
