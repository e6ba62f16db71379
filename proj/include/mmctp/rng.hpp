#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mmctp {

/**
 * Deterministic random source, threaded explicitly through everything that
 * draws randomness (weight initialization, dropout masks, batch shuffling).
 *
 * All draws are derived from raw mt19937_64 output so results are
 * bit-identical across platforms; standard-library distributions are
 * avoided because their output is implementation-defined.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /** Uniform draw in [0, 1) with 53 bits of precision. */
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    /** Uniform draw in [lo, hi). */
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /** Uniform integer in [0, n). n must be positive. */
    std::size_t bounded(std::size_t n) {
        return static_cast<std::size_t>(gen_() % n);
    }

    /** In-place Fisher-Yates shuffle. */
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = bounded(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /**
     * Mixes a base seed with a stream index (splitmix64 finalizer), used to
     * derive independent per-epoch generators so a resumed run reproduces
     * exactly the randomness of an uninterrupted one.
     */
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace mmctp
