#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace kginject {

// Seeded generator with portable draws. std::mt19937_64 output is fully
// specified by the standard; the distribution helpers below are written out so
// that results do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform integer in [0, bound). Rejection sampling removes modulo bias.
    std::uint64_t uniform_index(std::uint64_t bound) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % bound;
    }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller, no cached spare so the stream position is draw-count exact.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform01();
        const double u2 = uniform01();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent child stream, e.g. one per epoch or per record.
    Rng fork(std::uint64_t salt) {
        std::seed_seq seq{static_cast<std::uint32_t>(engine_() >> 32), static_cast<std::uint32_t>(salt),
                          static_cast<std::uint32_t>(salt >> 32)};
        std::mt19937_64 e(seq);
        return Rng(e());
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace kginject
