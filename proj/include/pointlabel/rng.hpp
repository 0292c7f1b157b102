#pragma once

#include <cstdint>
#include <random>

namespace pointlabel {

using Rng = std::mt19937_64;

/// Independent stream for one unit of work, derived from the run seed and
/// the unit's coordinates so serial and parallel runs draw identical values.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

}  // namespace pointlabel
