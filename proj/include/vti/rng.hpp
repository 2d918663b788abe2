#pragma once

// Seeded RNG wrapper. The engine is std::mt19937_64 (bit-exact per the
// standard); the distribution mappings are implemented here so draws are
// reproducible across standard libraries and serializable mid-stream.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace vti {

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        int v = static_cast<int>(uniform() * n);
        return v < n ? v : n - 1;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; the second draw is cached.
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    std::string serialize() const;
    void deserialize(const std::string& s);

  private:
    std::mt19937_64 eng_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

// Independent per-item stream keys: splitmix64 finalizer over (seed, index).
std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t index);

}  // namespace vti
