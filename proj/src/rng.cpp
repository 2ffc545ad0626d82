// SPDX-License-Identifier: Apache-2.0
#include "mdpo/rng.hpp"

#include <cmath>

namespace mdpo {

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;  // golden ratio
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;  // sqrt(3) - 1

inline void philox_round(std::array<uint32_t, 4>& ctr, uint32_t k0, uint32_t k1) noexcept {
    const uint64_t p0 = static_cast<uint64_t>(kPhiloxM0) * ctr[0];
    const uint64_t p1 = static_cast<uint64_t>(kPhiloxM1) * ctr[2];
    const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
    const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
}

}  // namespace

std::array<uint32_t, 4> SeededRng::philox_block(uint64_t block_index) const noexcept {
    std::array<uint32_t, 4> ctr = {
        static_cast<uint32_t>(block_index),
        static_cast<uint32_t>(block_index >> 32),
        static_cast<uint32_t>(stream_),
        static_cast<uint32_t>(stream_ >> 32),
    };
    uint32_t k0 = static_cast<uint32_t>(seed_);
    uint32_t k1 = static_cast<uint32_t>(seed_ >> 32);
    for (int round = 0; round < 10; ++round) {
        philox_round(ctr, k0, k1);
        k0 += kPhiloxW0;
        k1 += kPhiloxW1;
    }
    return ctr;
}

uint32_t SeededRng::next_u32() noexcept {
    if (block_pos_ == 4) {
        block_ = philox_block(block_index_++);
        block_pos_ = 0;
    }
    return block_[block_pos_++];
}

uint64_t SeededRng::next_u64() noexcept {
    const uint64_t hi = next_u32();
    const uint64_t lo = next_u32();
    return (hi << 32) | lo;
}

double SeededRng::next_double() noexcept {
    // 53-bit mantissa: (u64 >> 11) / 2^53, exact in double arithmetic.
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t SeededRng::below(uint64_t n) noexcept {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

double SeededRng::normal() noexcept {
    if (has_spare_normal_) {
        has_spare_normal_ = false;
        return spare_normal_;
    }
    // Box-Muller on (0, 1] uniforms so log() never sees zero.
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_normal_ = radius * std::sin(angle);
    has_spare_normal_ = true;
    return radius * std::cos(angle);
}

}  // namespace mdpo
