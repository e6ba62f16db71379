#include "mmctp/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "mmctp/rng.hpp"

namespace mmctp {

namespace {

constexpr std::array<double, 3> kCenters = {116.30, 39.90, 55.0};
constexpr std::array<double, 3> kAmplitudes = {0.04, 0.03, 30.0};
constexpr std::array<double, 3> kPeriods = {1800.0, 750.0, 330.0};  // seconds
constexpr std::array<double, 3> kWeights = {1.0, 0.6, 0.3};

/** Mixture of three sinusoids for one variable, phases supplied per call. */
double mixture(double t, const std::array<double, 3>& phases) {
    double s = 0.0;
    for (std::size_t h = 0; h < 3; ++h) {
        s += kWeights[h] *
             std::sin(2.0 * std::numbers::pi * t / kPeriods[h] + phases[h]);
    }
    return s;
}

using PhaseTable = std::array<std::array<double, 3>, 3>;  // [variable][harmonic]

PhaseTable draw_phases(Rng& rng) {
    PhaseTable p;
    for (auto& var : p) {
        for (double& ph : var) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    return p;
}

}  // namespace

Dataset sinusoid_dataset(const SinusoidSpec& spec) {
    if (spec.length < 2) {
        throw std::invalid_argument("sinusoid_dataset: length must be at least 2");
    }
    if (spec.interval <= 0.0) {
        throw std::invalid_argument("sinusoid_dataset: interval must be positive");
    }
    Rng rng(spec.seed);
    const PhaseTable phases = draw_phases(rng);

    UniformSeries series;
    series.user = "synthetic";
    series.interval = spec.interval;
    series.points.reserve(spec.length);
    for (std::size_t i = 0; i < spec.length; ++i) {
        const double t = spec.t0 + static_cast<double>(i) * spec.interval;
        TrajectoryPoint p;
        p.t = t;
        double vals[3];
        for (std::size_t v = 0; v < 3; ++v) {
            vals[v] = kCenters[v] +
                      kAmplitudes[v] * (mixture(t, phases[v]) +
                                        spec.noise * rng.uniform(-1.0, 1.0));
        }
        p.lon = vals[0];
        p.lat = vals[1];
        p.alt = vals[2];
        series.points.push_back(p);
    }

    Dataset data;
    data.raw_interval = spec.interval / 2.0;
    data.series_interval = spec.interval;
    data.series.push_back(std::move(series));
    data.splits = split_all(data.series);
    data.stats = compute_stats(data.series, data.splits);
    return data;
}

void write_plt_corpus(const std::string& root, const PltCorpusSpec& spec) {
    namespace fs = std::filesystem;
    if (spec.users == 0 || spec.files_per_user == 0 || spec.points_per_file < 2) {
        throw std::invalid_argument("write_plt_corpus: degenerate spec");
    }
    if (spec.raw_interval <= 0.0) {
        throw std::invalid_argument("write_plt_corpus: interval must be positive");
    }
    Rng rng(spec.seed);
    const std::time_t base = 1230768000;  // 2009-01-01 00:00:00 UTC

    for (std::size_t u = 0; u < spec.users; ++u) {
        char user[8];
        std::snprintf(user, sizeof(user), "%03zu", 100 + u);
        const fs::path dir = fs::path(root) / "Data" / user / "Trajectory";
        fs::create_directories(dir);

        for (std::size_t k = 0; k < spec.files_per_user; ++k) {
            const PhaseTable phases = draw_phases(rng);
            const std::time_t start =
                base + static_cast<std::time_t>(k) * 86400 + 8 * 3600;

            std::tm tm_start{};
            gmtime_r(&start, &tm_start);
            char stamp[32];
            std::strftime(stamp, sizeof(stamp), "%Y%m%d%H%M%S", &tm_start);
            std::ofstream out(dir / (std::string(stamp) + ".plt"));
            if (!out) {
                throw std::runtime_error("write_plt_corpus: cannot write under " +
                                         dir.string());
            }
            out << "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved"
                   " 3\n0,2,255,My Track,0,0,2,8421376\n0\n";

            for (std::size_t i = 0; i < spec.points_per_file; ++i) {
                const double t = static_cast<double>(start) +
                                 static_cast<double>(i) * spec.raw_interval;
                double vals[3];
                for (std::size_t v = 0; v < 3; ++v) {
                    vals[v] = kCenters[v] + 0.01 * static_cast<double>(u) +
                              kAmplitudes[v] *
                                  (mixture(t, phases[v]) +
                                   spec.noise * rng.uniform(-1.0, 1.0));
                }
                const std::time_t tt = static_cast<std::time_t>(t);
                std::tm tm{};
                gmtime_r(&tt, &tm);
                char date[16], clock[16], line[160];
                std::strftime(date, sizeof(date), "%Y-%m-%d", &tm);
                std::strftime(clock, sizeof(clock), "%H:%M:%S", &tm);
                std::snprintf(line, sizeof(line),
                              "%.6f,%.6f,0,%.2f,39925.0,%s,%s\n", vals[1],
                              vals[0], vals[2] / 0.3048, date, clock);
                out << line;
            }
        }
    }
}

}  // namespace mmctp
