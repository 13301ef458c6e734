#pragma once

#include <cstdint>
#include <random>

namespace sketch3d {

// Independent stream keyed by (seed, tag, index), so each consumer draws the same
// numbers regardless of what ran before it.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace sketch3d
