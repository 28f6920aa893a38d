// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "tinymoe/common.hpp"

namespace tinymoe {

/// Named, seedable, splittable counter-based random stream.
///
/// Each draw is a stateless hash of (key, counter), so streams derived from
/// the same seed and names are reproducible across runs and independent of
/// draw order elsewhere. State is two u64s, trivially serializable.
class RngStream {
public:
    RngStream(uint64_t seed, std::string_view name)
        : key_(mix(seed ^ fnv1a(name))), counter_(0) {}

    static RngStream restore(uint64_t key, uint64_t counter) {
        RngStream s;
        s.key_ = key;
        s.counter_ = counter;
        return s;
    }

    RngStream split(std::string_view child) const {
        RngStream s;
        s.key_ = mix(key_ ^ fnv1a(child));
        s.counter_ = 0;
        return s;
    }

    RngStream split(std::string_view child, uint64_t index) const {
        RngStream s;
        s.key_ = mix(mix(key_ ^ fnv1a(child)) + index * kGamma);
        s.counter_ = 0;
        return s;
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }

    uint64_t next_u64() { return mix(key_ ^ mix(counter_++ * kGamma + 1)); }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; always consumes two uniforms.
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        // Guard log(0).
        u1 = 1.0 - u1;
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, std) with any draw of magnitude > cutoff resampled.
    double next_trunc_normal(double std_dev, double cutoff) {
        check(cutoff > 0, "trunc normal cutoff must be > 0");
        for (;;) {
            double v = next_normal() * std_dev;
            if (std::abs(v) <= cutoff) return v;
        }
    }

private:
    RngStream() : key_(0), counter_(0) {}

    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    // splitmix64 finalizer
    static constexpr uint64_t mix(uint64_t z) {
        z += kGamma;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    static constexpr uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= uint64_t(uint8_t(c));
            h *= 0x100000001b3ull;
        }
        return h;
    }

    uint64_t key_;
    uint64_t counter_;
};

} // namespace tinymoe
