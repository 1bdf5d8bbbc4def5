#pragma once

#include "roughsde/core.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace roughsde {

/// Philox4x32-10 block cipher (Salmon et al., SC'11). Stateless: the output
/// depends only on (counter, key).
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter generate(Counter ctr, Key key)
    {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kWeyl0;
                key[1] += kWeyl1;
            }
            ctr = single_round(ctr, key);
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static Counter single_round(const Counter& c, const Key& k)
    {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
};

/// Uniform double in (0, 1] from a 64-bit word.
inline double unit_open_closed(std::uint64_t bits)
{
    return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

/// Two independent standard normals addressed by (seed, a, b, c).
inline std::array<double, 2> counter_normal_pair(std::uint64_t seed, std::uint64_t a,
                                                 std::uint32_t b, std::uint32_t c)
{
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                                  b, c};
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed),
                              static_cast<std::uint32_t>(seed >> 32)};
    const auto r = Philox4x32::generate(ctr, key);
    const double u1 = unit_open_closed((static_cast<std::uint64_t>(r[0]) << 32) | r[1]);
    const double u2 = unit_open_closed((static_cast<std::uint64_t>(r[2]) << 32) | r[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return {radius * std::cos(angle), radius * std::sin(angle)};
}

/// Uniform 64-bit word addressed by (seed, a, b).
inline std::uint64_t counter_bits(std::uint64_t seed, std::uint64_t a, std::uint32_t b)
{
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                                  b, 0x5eedu};
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed),
                              static_cast<std::uint32_t>(seed >> 32)};
    const auto r = Philox4x32::generate(ctr, key);
    return (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
}

/// Brownian increments on [0, T] defined at a finest resolution of
/// `fine_steps` uniform steps. The increment for (path, fine step) depends
/// only on (seed, path, step); coarser steps are sums of fine ones, so every
/// refinement level, sub-window and backward replay sees the same path.
template <int D>
class NoiseStream {
public:
    NoiseStream() = default;

    NoiseStream(std::uint64_t seed, double horizon, int fine_steps)
        : seed_(seed), horizon_(horizon), fine_steps_(fine_steps)
    {
        check_dimension<D>();
        if (!(horizon > 0.0) || fine_steps < 1) {
            throw Error("noise stream needs T > 0 and at least one fine step");
        }
    }

    std::uint64_t seed() const { return seed_; }
    double horizon() const { return horizon_; }
    int fine_steps() const { return fine_steps_; }
    double fine_step() const { return horizon_ / fine_steps_; }

    /// Standard normal vector for (path, fine step).
    Vec<D> normal(std::uint64_t path, int fine_index) const
    {
        Vec<D> z;
        for (int block = 0; 2 * block < D; ++block) {
            const auto pair = counter_normal_pair(seed_, path, static_cast<std::uint32_t>(fine_index),
                                                  static_cast<std::uint32_t>(block));
            z[2 * block] = pair[0];
            if (2 * block + 1 < D) {
                z[2 * block + 1] = pair[1];
            }
        }
        return z;
    }

    Vec<D> fine_increment(std::uint64_t path, int fine_index) const
    {
        return std::sqrt(fine_step()) * normal(path, fine_index);
    }

    /// Number of fine steps per coarse step of size dt; dt must be a
    /// multiple of the fine step.
    int stride_for(double dt) const
    {
        const double ratio = dt / fine_step();
        const long r = std::lround(ratio);
        if (r < 1 || std::abs(ratio - r) > 1e-9 * ratio) {
            throw Error("step size is not a multiple of the noise stream's fine step");
        }
        return static_cast<int>(r);
    }

    /// Fine-step index of time t (t must lie on the fine grid).
    int index_of(double t) const
    {
        const double u = t / fine_step();
        const long k = std::lround(u);
        if (std::abs(u - k) > 1e-9 * std::max(1.0, u) || k < 0 || k > fine_steps_) {
            throw Error("time is not aligned with the noise stream grid");
        }
        return static_cast<int>(k);
    }

    /// Increment W(t_{first + stride}) - W(t_first) in fine-step indices.
    Vec<D> increment(std::uint64_t path, int first_fine, int stride) const
    {
        Vec<D> dw = Vec<D>::Zero();
        for (int j = 0; j < stride; ++j) {
            dw += fine_increment(path, first_fine + j);
        }
        return dw;
    }

    bool operator==(const NoiseStream& o) const
    {
        return seed_ == o.seed_ && horizon_ == o.horizon_ && fine_steps_ == o.fine_steps_;
    }

private:
    std::uint64_t seed_ = 0;
    double horizon_ = 1.0;
    int fine_steps_ = 1;
};

}  // namespace roughsde
