// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace esft {

// Deterministic RNG. std::mt19937_64 output is fixed by the standard; the
// value transforms below are hand-rolled so streams are identical across
// standard libraries (std::uniform_real_distribution et al. are not).
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n). Rejection-free modulo bias is irrelevant for
    // the small n used here, but keep it exact anyway.
    int64_t below(int64_t n) {
        const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % static_cast<uint64_t>(n));
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<int64_t>(x % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller (the cached second value keeps streams
    // reproducible regardless of call pattern parity).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace esft
