// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

namespace mdpo {

/// Counter-based pseudo-random generator (Philox4x32-10).
///
/// The output is a pure function of (seed, stream, draw index), so draws are
/// reproducible across platforms and independent of generation order: two
/// generators with the same seed and stream always produce the same sequence,
/// and distinct streams are statistically independent. This is what makes
/// parallel data generation deterministic regardless of worker count.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed, uint64_t stream = 0) noexcept
        : seed_(seed), stream_(stream) {}

    uint64_t seed() const noexcept { return seed_; }
    uint64_t stream() const noexcept { return stream_; }

    /// A generator over the same seed but a different stream, starting at
    /// draw index 0.
    SeededRng split(uint64_t stream) const noexcept { return SeededRng(seed_, stream); }

    uint32_t next_u32() noexcept;
    uint64_t next_u64() noexcept;

    /// Uniform in [0, 1) with 53 random bits.
    double next_double() noexcept;

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_double(); }

    /// Uniform in (lo, hi]: the reflected open-low/closed-high interval.
    double uniform_open_low(double lo, double hi) noexcept {
        return hi - (hi - lo) * next_double();
    }

    /// Unbiased integer in [0, n) via rejection sampling. n must be > 0.
    uint64_t below(uint64_t n) noexcept;

    /// Standard normal via Box-Muller (spare value cached).
    double normal() noexcept;
    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

private:
    std::array<uint32_t, 4> philox_block(uint64_t block_index) const noexcept;

    uint64_t seed_;
    uint64_t stream_;
    uint64_t block_index_ = 0;
    std::array<uint32_t, 4> block_{};
    int block_pos_ = 4;  // 4 == exhausted
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

}  // namespace mdpo
