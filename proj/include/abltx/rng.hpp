#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace abltx {

// Philox4x32-10 counter-based generator (Salmon et al., Random123). Output
// depends only on (key, counter), so any element of a stream can be drawn
// independently of evaluation order or worker count.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

inline std::uint32_t fnv1a32(std::string_view s) {
    std::uint32_t h = 2166136261u;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 16777619u;
    }
    return h;
}

// A keyed stream of uniform variates addressed by (index, lane).
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint32_t stream)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          stream_(stream) {}

    std::array<std::uint32_t, 4> block(std::uint64_t index, std::uint32_t lane = 0) const {
        return philox4x32({static_cast<std::uint32_t>(index),
                           static_cast<std::uint32_t>(index >> 32), lane, stream_},
                          key_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t index, std::uint32_t lane = 0) const {
        const auto b = block(index, lane);
        const std::uint64_t bits = (std::uint64_t{b[0]} << 32 | b[1]) >> 11;
        return static_cast<double>(bits) * 0x1.0p-53;
    }

    // Uniform in [-1, 1).
    double symmetric(std::uint64_t index, std::uint32_t lane = 0) const {
        return 2.0 * uniform(index, lane) - 1.0;
    }

    std::uint64_t bits64(std::uint64_t index, std::uint32_t lane = 0) const {
        const auto b = block(index, lane);
        return std::uint64_t{b[0]} << 32 | b[1];
    }

private:
    std::array<std::uint32_t, 2> key_;
    std::uint32_t stream_;
};

} // namespace abltx
