#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace affground {

// Deterministic RNG. std::mt19937_64 output is pinned by the standard;
// the value mappings below are pinned here, so sequences are identical
// across platforms and runs. Never use std::*_distribution (its output
// is implementation-defined).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // [0, 1)
    double real() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // [lo, hi)
    double real(double lo, double hi) { return lo + (hi - lo) * real(); }

    // integer in [lo, hi] inclusive
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    // standard normal, Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = real();
        double u2 = real();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace affground
