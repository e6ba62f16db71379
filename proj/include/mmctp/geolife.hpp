#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mmctp {

/** One raw GPS fix as parsed from a PLT record. */
struct RawPoint {
    double t = 0.0;  // UTC seconds since epoch
    double lon = 0.0;
    double lat = 0.0;
    double alt = 0.0;       // meters
    bool alt_valid = true;  // false for the -777 sentinel
};

/** Result of parsing one PLT file. */
struct PltParse {
    std::vector<RawPoint> points;
    std::size_t malformed = 0;      // records skipped for bad syntax or range
    std::size_t nonmonotonic = 0;   // records dropped for non-increasing time
};

/** One GPS fix on a uniform grid; altitude always valid after resampling. */
struct TrajectoryPoint {
    double t = 0.0;
    double lon = 0.0;
    double lat = 0.0;
    double alt = 0.0;
};

/** An evenly spaced sub-trajectory belonging to one user. */
struct UniformSeries {
    std::string user;
    double interval = 0.0;  // seconds between consecutive points
    std::vector<TrajectoryPoint> points;
};

/** Per-variable normalization constants, fit on the training split only. */
struct DatasetStats {
    std::array<double, 3> mean{};    // lon, lat, alt
    std::array<double, 3> stddev{};  // population standard deviation
};

/** Point-index boundaries of one series' contribution to the three splits. */
struct SeriesSplit {
    std::size_t train_end = 0;  // points [0, train_end) are training data
    std::size_t val_end = 0;    // points [train_end, val_end) are validation
};

enum class Split { train, val, test };

/** A prepared dataset: resampled series, split boundaries, and statistics. */
struct Dataset {
    double raw_interval = 0.0;     // seconds, one of 5/10/15
    double series_interval = 0.0;  // seconds, 2x raw
    DatasetStats stats;
    std::vector<UniformSeries> series;
    std::vector<SeriesSplit> splits;  // parallel to series
};

/** One standardized training example with its time-feature rows. */
struct WindowSample {
    std::vector<double> input;        // m x 3, standardized lon/lat/alt
    std::vector<double> target;       // n x 3, standardized
    std::vector<double> input_time;   // m x 6 feature rows in [-0.5, 0.5]
    std::vector<double> target_time;  // n x 6
    double t0 = 0.0;                  // timestamp of the first input point
    double interval = 0.0;
};

/**
 * Parses one PLT file. The six header lines are skipped; each record is
 * lat,lon,flag,altitude_feet,serial_date,date,time. Altitude converts at
 * 0.3048 m/ft, with the value -777 marking a missing reading. Malformed
 * records and records whose timestamp does not increase are counted and
 * skipped rather than aborting the file.
 */
PltParse parse_plt(const std::string& text);

/**
 * Splits a point stream into maximal runs whose consecutive gaps match the
 * raw sampling interval within the tolerance. Runs shorter than 2 points
 * are discarded.
 */
std::vector<std::vector<RawPoint>> select_by_interval(const std::vector<RawPoint>& points,
                                                      double raw_interval,
                                                      double tolerance = 1.0);

/**
 * Linearly interpolates a run onto the grid t0, t0+target, t0+2*target, ...
 * Invalid-altitude points are bridged from the nearest valid neighbors
 * (flat extension at the edges; an all-invalid run gets altitude 0).
 * Returns a series with no points when the run spans less than one interval.
 */
UniformSeries resample_linear(const std::vector<RawPoint>& run, double target_interval);

/**
 * Keeps series longer than 200 points and drops users whose kept series
 * start on fewer than 25 distinct UTC calendar dates. Output is ordered by
 * user then first timestamp.
 */
std::vector<UniformSeries> segment_and_filter(std::vector<UniformSeries> series);

/**
 * Chronological 70/10/20 split of a user's total point count using
 * cumulative floor boundaries: train gets floor(0.7 L), train+val gets
 * floor(0.8 L), the remainder is test. Returns per-series boundaries;
 * `series` must be the user's series in chronological order.
 */
std::vector<SeriesSplit> split_user_series(const std::vector<const UniformSeries*>& series);

/** Applies split_user_series to every user in the dataset (series must be grouped). */
std::vector<SeriesSplit> split_all(const std::vector<UniformSeries>& series);

/**
 * Per-variable mean and population standard deviation over every training
 * point. Throws if a variable is constant (zero variance).
 */
DatasetStats compute_stats(const std::vector<UniformSeries>& series,
                           const std::vector<SeriesSplit>& splits);

/** (x - mean) / std per variable. */
std::array<double, 3> standardize(const DatasetStats& stats, double lon, double lat,
                                  double alt);
/** Inverse of standardize. */
std::array<double, 3> unstandardize(const DatasetStats& stats, double lon, double lat,
                                    double alt);

/**
 * Six calendar features of a UTC timestamp, each mapped into [-0.5, 0.5]:
 * second/59, minute/59, hour/23, weekday/6 (Monday = 0), (day-1)/30,
 * (dayofyear-1)/365, minus 0.5 each.
 */
std::array<double, 6> time_features(std::int64_t utc_seconds);

/** The n timestamps continuing the input grid: last+d, last+2d, ... */
std::vector<double> future_timestamps(double last, double interval, std::size_t n);

/**
 * All windows of one series that lie inside the given split segment,
 * stride 1: a segment of length L yields max(0, L - (m+n) + 1) samples.
 * Values are standardized with `stats`; feature rows come from the point
 * timestamps (targets continue the grid by construction).
 */
std::vector<WindowSample> make_windows(const UniformSeries& series,
                                       const SeriesSplit& split, Split which,
                                       std::size_t m, std::size_t n,
                                       const DatasetStats& stats);

/** Windows of every series in the dataset for one split. */
std::vector<WindowSample> windows_for_split(const Dataset& data, Split which,
                                            std::size_t m, std::size_t n);

/**
 * Full pipeline over a GeoLife directory tree (either the layout root that
 * contains Data/ or the Data/ directory itself): parse every
 * .plt file under the per-user Trajectory directories, select runs at the
 * raw interval, resample to
 * twice that interval, filter, split, and fit statistics. Deterministic:
 * users and files are processed in sorted order.
 */
Dataset prepare_dataset(const std::string& raw_dir, double raw_interval,
                        double tolerance = 1.0);

/**
 * Writes manifest.json plus one versioned binary blob of series per user
 * under `cache_dir`. Rewriting an unchanged dataset is byte-identical.
 */
void save_cache(const Dataset& data, const std::string& cache_dir);

/** Loads a cache written by save_cache. Throws on version or format errors. */
Dataset load_cache(const std::string& cache_dir);

}  // namespace mmctp
