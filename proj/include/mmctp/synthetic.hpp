#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mmctp/geolife.hpp"

namespace mmctp {

/**
 * Parameters of the superposed-sinusoid series generator. The defaults
 * produce one 2177-point series whose 70/10/20 split yields exactly 2000
 * stride-1 windows at input 48 / horizon 12 (1464 train, 159 val, 377 test).
 */
struct SinusoidSpec {
    std::size_t length = 2177;  // points in the single generated series
    double interval = 30.0;     // seconds between points
    double noise = 0.01;        // additive noise as a fraction of amplitude
    std::uint64_t seed = 17;
    double t0 = 1240000000.0;  // UTC timestamp of the first point
};

/**
 * A fully prepared dataset whose three variables are distinct mixtures of
 * three fixed-period sinusoids plus uniform noise. Split boundaries and
 * normalization statistics are fit exactly as for real data, so training
 * and evaluation code sees no difference.
 */
Dataset sinusoid_dataset(const SinusoidSpec& spec);

/**
 * Parameters of the on-disk GPS corpus generator. The defaults give every
 * user 25 distinct recording dates whose files each resample to 201 points,
 * which is precisely enough to survive the length and date filters.
 */
struct PltCorpusSpec {
    std::size_t users = 3;
    std::size_t files_per_user = 25;    // one file per calendar date
    std::size_t points_per_file = 401;  // raw fixes per file
    double raw_interval = 15.0;         // seconds between raw fixes
    double noise = 0.05;                // fraction of the motion amplitude
    std::uint64_t seed = 99;
};

/**
 * Writes a GeoLife-layout directory tree (root/Data/<user>/Trajectory/)
 * of smooth synthetic .plt trajectories around Beijing coordinates, suitable as
 * input to prepare_dataset. Deterministic for a fixed spec.
 */
void write_plt_corpus(const std::string& root, const PltCorpusSpec& spec);

}  // namespace mmctp
