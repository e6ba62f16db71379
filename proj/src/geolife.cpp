#include "mmctp/geolife.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmctp {

namespace {

constexpr double kFeetToMeters = 0.3048;
constexpr double kAltSentinel = -777.0;
constexpr std::size_t kMinSeriesLen = 201;  // strictly more than 200 points
constexpr std::size_t kMinUserDates = 25;
constexpr char kBlobMagic[8] = {'M', 'M', 'C', 'T', 'P', 'S', 'E', 'R'};
constexpr std::uint8_t kBlobVersion = 1;
constexpr int kManifestVersion = 1;

// Civil-calendar conversions on the proleptic Gregorian calendar
// (Howard Hinnant's algorithms), used instead of timegm so parsing does not
// depend on the process time zone or libc extensions.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yr = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y = static_cast<int>(yr + (m <= 2));
}

bool is_leap(int y) { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

unsigned day_of_year(int y, unsigned m, unsigned d) {
    static const unsigned before[12] = {0,   31,  59,  90,  120, 151,
                                        181, 212, 243, 273, 304, 334};
    unsigned doy = before[m - 1] + d;
    if (m > 2 && is_leap(y)) ++doy;
    return doy;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

bool parse_double(const std::string& s, double& out) {
    const char* begin = s.c_str();
    char* end = nullptr;
    out = std::strtod(begin, &end);
    return end != begin && *end == '\0' && std::isfinite(out);
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

bool parse_timestamp(const std::string& date, const std::string& time, double& out) {
    int y = 0;
    unsigned mo = 0, d = 0, h = 0, mi = 0, se = 0;
    if (std::sscanf(date.c_str(), "%d-%u-%u", &y, &mo, &d) != 3) return false;
    if (std::sscanf(time.c_str(), "%u:%u:%u", &h, &mi, &se) != 3) return false;
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 59) return false;
    out = static_cast<double>(days_from_civil(y, mo, d)) * 86400.0 + h * 3600.0 +
          mi * 60.0 + se;
    return true;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in, const char* what) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error(std::string("cache: truncated ") + what);
    return v;
}

void write_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

double read_f64(std::istream& in, const char* what) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error(std::string("cache: truncated ") + what);
    return v;
}

}  // namespace

PltParse parse_plt(const std::string& text) {
    PltParse out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    double last_t = -std::numeric_limits<double>::infinity();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno <= 6) continue;  // fixed-size header
        if (line.empty()) continue;
        const std::vector<std::string> f = split_fields(line, ',');
        double lat = 0, lon = 0, alt_ft = 0, t = 0;
        if (f.size() != 7 || !parse_double(f[0], lat) || !parse_double(f[1], lon) ||
            !parse_double(f[3], alt_ft) || !parse_timestamp(f[5], f[6], t) ||
            lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) {
            ++out.malformed;
            continue;
        }
        if (t <= last_t) {
            ++out.nonmonotonic;
            continue;
        }
        last_t = t;
        RawPoint p;
        p.t = t;
        p.lon = lon;
        p.lat = lat;
        p.alt_valid = alt_ft != kAltSentinel;
        p.alt = p.alt_valid ? alt_ft * kFeetToMeters : 0.0;
        out.points.push_back(p);
    }
    return out;
}

std::vector<std::vector<RawPoint>> select_by_interval(const std::vector<RawPoint>& points,
                                                      double raw_interval,
                                                      double tolerance) {
    if (raw_interval <= 0.0) throw std::invalid_argument("select_by_interval: bad interval");
    std::vector<std::vector<RawPoint>> runs;
    std::size_t i = 0;
    while (i + 1 < points.size()) {
        std::size_t j = i;
        while (j + 1 < points.size() &&
               std::fabs(points[j + 1].t - points[j].t - raw_interval) <= tolerance) {
            ++j;
        }
        if (j > i) {
            runs.emplace_back(points.begin() + static_cast<long>(i),
                              points.begin() + static_cast<long>(j) + 1);
            i = j;
        } else {
            ++i;
        }
    }
    return runs;
}

UniformSeries resample_linear(const std::vector<RawPoint>& run, double target_interval) {
    if (target_interval <= 0.0) {
        throw std::invalid_argument("resample_linear: bad interval");
    }
    UniformSeries out;
    out.interval = target_interval;
    if (run.size() < 2 || run.back().t - run.front().t < target_interval) return out;

    // Bridge the altitude sentinel before interpolating so every grid value
    // comes from real readings where any exist.
    std::vector<double> alt(run.size());
    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < run.size(); ++i) {
        alt[i] = run[i].alt;
        if (run[i].alt_valid) valid.push_back(i);
    }
    if (valid.empty()) {
        std::fill(alt.begin(), alt.end(), 0.0);
    } else {
        for (std::size_t i = 0; i < run.size(); ++i) {
            if (run[i].alt_valid) continue;
            auto next = std::lower_bound(valid.begin(), valid.end(), i);
            if (next == valid.begin()) {
                alt[i] = alt[*next];
            } else if (next == valid.end()) {
                alt[i] = alt[*(next - 1)];
            } else {
                const std::size_t a = *(next - 1), b = *next;
                const double u = (run[i].t - run[a].t) / (run[b].t - run[a].t);
                alt[i] = (1.0 - u) * alt[a] + u * alt[b];
            }
        }
    }

    const double t0 = run.front().t;
    const double span = run.back().t - t0;
    const std::size_t count = static_cast<std::size_t>(std::floor(span / target_interval)) + 1;
    out.points.reserve(count);
    std::size_t seg = 0;
    for (std::size_t k = 0; k < count; ++k) {
        const double t = t0 + static_cast<double>(k) * target_interval;
        while (seg + 2 < run.size() && run[seg + 1].t < t) ++seg;
        const double ta = run[seg].t, tb = run[seg + 1].t;
        const double u = (t - ta) / (tb - ta);
        TrajectoryPoint p;
        p.t = t;
        p.lon = (1.0 - u) * run[seg].lon + u * run[seg + 1].lon;
        p.lat = (1.0 - u) * run[seg].lat + u * run[seg + 1].lat;
        p.alt = (1.0 - u) * alt[seg] + u * alt[seg + 1];
        out.points.push_back(p);
    }
    return out;
}

std::vector<UniformSeries> segment_and_filter(std::vector<UniformSeries> series) {
    std::map<std::string, std::vector<UniformSeries>> by_user;
    for (UniformSeries& s : series) {
        if (s.points.size() < kMinSeriesLen) continue;
        by_user[s.user].push_back(std::move(s));
    }
    std::vector<UniformSeries> out;
    for (auto& [user, list] : by_user) {
        std::sort(list.begin(), list.end(), [](const UniformSeries& a, const UniformSeries& b) {
            return a.points.front().t < b.points.front().t;
        });
        std::set<std::int64_t> dates;
        for (const UniformSeries& s : list) {
            dates.insert(floor_div(static_cast<std::int64_t>(s.points.front().t), 86400));
        }
        if (dates.size() < kMinUserDates) continue;
        for (UniformSeries& s : list) out.push_back(std::move(s));
    }
    return out;
}

std::vector<SeriesSplit> split_user_series(const std::vector<const UniformSeries*>& series) {
    std::size_t total = 0;
    for (const UniformSeries* s : series) total += s->points.size();
    // Integer arithmetic gives the exact floors of 0.7 L and 0.8 L.
    const std::size_t train_end = total * 7 / 10;
    const std::size_t val_end = total * 8 / 10;
    std::vector<SeriesSplit> out;
    out.reserve(series.size());
    std::size_t offset = 0;
    for (const UniformSeries* s : series) {
        const std::size_t len = s->points.size();
        auto clamp_local = [&](std::size_t bound) {
            if (bound <= offset) return static_cast<std::size_t>(0);
            return std::min(bound - offset, len);
        };
        out.push_back({clamp_local(train_end), clamp_local(val_end)});
        offset += len;
    }
    return out;
}

std::vector<SeriesSplit> split_all(const std::vector<UniformSeries>& series) {
    std::vector<SeriesSplit> out(series.size());
    std::size_t i = 0;
    while (i < series.size()) {
        std::size_t j = i;
        while (j < series.size() && series[j].user == series[i].user) ++j;
        std::vector<const UniformSeries*> group;
        for (std::size_t k = i; k < j; ++k) group.push_back(&series[k]);
        std::vector<SeriesSplit> splits = split_user_series(group);
        for (std::size_t k = i; k < j; ++k) out[k] = splits[k - i];
        i = j;
    }
    return out;
}

DatasetStats compute_stats(const std::vector<UniformSeries>& series,
                           const std::vector<SeriesSplit>& splits) {
    if (series.size() != splits.size()) {
        throw std::invalid_argument("compute_stats: series/split size mismatch");
    }
    std::array<double, 3> sum{};
    std::size_t n = 0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t p = 0; p < splits[i].train_end; ++p) {
            const TrajectoryPoint& pt = series[i].points[p];
            sum[0] += pt.lon;
            sum[1] += pt.lat;
            sum[2] += pt.alt;
            ++n;
        }
    }
    if (n == 0) throw std::runtime_error("compute_stats: empty training split");
    DatasetStats stats;
    for (int v = 0; v < 3; ++v) stats.mean[v] = sum[v] / static_cast<double>(n);
    std::array<double, 3> sq{};
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t p = 0; p < splits[i].train_end; ++p) {
            const TrajectoryPoint& pt = series[i].points[p];
            const double d0 = pt.lon - stats.mean[0];
            const double d1 = pt.lat - stats.mean[1];
            const double d2 = pt.alt - stats.mean[2];
            sq[0] += d0 * d0;
            sq[1] += d1 * d1;
            sq[2] += d2 * d2;
        }
    }
    static const char* names[3] = {"lon", "lat", "alt"};
    for (int v = 0; v < 3; ++v) {
        stats.stddev[v] = std::sqrt(sq[v] / static_cast<double>(n));
        if (stats.stddev[v] == 0.0) {
            throw std::runtime_error(std::string("compute_stats: variable ") + names[v] +
                                     " is constant in the training split");
        }
    }
    return stats;
}

std::array<double, 3> standardize(const DatasetStats& stats, double lon, double lat,
                                  double alt) {
    return {(lon - stats.mean[0]) / stats.stddev[0],
            (lat - stats.mean[1]) / stats.stddev[1],
            (alt - stats.mean[2]) / stats.stddev[2]};
}

std::array<double, 3> unstandardize(const DatasetStats& stats, double lon, double lat,
                                    double alt) {
    return {lon * stats.stddev[0] + stats.mean[0], lat * stats.stddev[1] + stats.mean[1],
            alt * stats.stddev[2] + stats.mean[2]};
}

std::array<double, 6> time_features(std::int64_t utc_seconds) {
    const std::int64_t days = floor_div(utc_seconds, 86400);
    const std::int64_t in_day = utc_seconds - days * 86400;
    const double sec = static_cast<double>(in_day % 60);
    const double minute = static_cast<double>((in_day / 60) % 60);
    const double hour = static_cast<double>(in_day / 3600);
    // 1970-01-01 was a Thursday; Monday = 0.
    const double weekday = static_cast<double>((days % 7 + 7 + 3) % 7);
    int y = 0;
    unsigned mo = 0, d = 0;
    civil_from_days(days, y, mo, d);
    const double doy = static_cast<double>(day_of_year(y, mo, d));
    return {sec / 59.0 - 0.5,
            minute / 59.0 - 0.5,
            hour / 23.0 - 0.5,
            weekday / 6.0 - 0.5,
            (static_cast<double>(d) - 1.0) / 30.0 - 0.5,
            (doy - 1.0) / 365.0 - 0.5};
}

std::vector<double> future_timestamps(double last, double interval, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        out[k] = last + static_cast<double>(k + 1) * interval;
    }
    return out;
}

std::vector<WindowSample> make_windows(const UniformSeries& series,
                                       const SeriesSplit& split, Split which,
                                       std::size_t m, std::size_t n,
                                       const DatasetStats& stats) {
    if (m == 0 || n == 0) throw std::invalid_argument("make_windows: m and n must be positive");
    std::size_t begin = 0, end = 0;
    switch (which) {
        case Split::train: begin = 0; end = split.train_end; break;
        case Split::val: begin = split.train_end; end = split.val_end; break;
        case Split::test: begin = split.val_end; end = series.points.size(); break;
    }
    std::vector<WindowSample> out;
    const std::size_t len = end - begin;
    if (len < m + n) return out;
    const std::size_t count = len - (m + n) + 1;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t base = begin + w;
        WindowSample s;
        s.t0 = series.points[base].t;
        s.interval = series.interval;
        s.input.reserve(m * 3);
        s.input_time.reserve(m * 6);
        for (std::size_t i = 0; i < m; ++i) {
            const TrajectoryPoint& p = series.points[base + i];
            const std::array<double, 3> z = standardize(stats, p.lon, p.lat, p.alt);
            s.input.insert(s.input.end(), z.begin(), z.end());
            const std::array<double, 6> f =
                time_features(static_cast<std::int64_t>(std::llround(p.t)));
            s.input_time.insert(s.input_time.end(), f.begin(), f.end());
        }
        s.target.reserve(n * 3);
        s.target_time.reserve(n * 6);
        for (std::size_t i = 0; i < n; ++i) {
            const TrajectoryPoint& p = series.points[base + m + i];
            const std::array<double, 3> z = standardize(stats, p.lon, p.lat, p.alt);
            s.target.insert(s.target.end(), z.begin(), z.end());
            const std::array<double, 6> f =
                time_features(static_cast<std::int64_t>(std::llround(p.t)));
            s.target_time.insert(s.target_time.end(), f.begin(), f.end());
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<WindowSample> windows_for_split(const Dataset& data, Split which,
                                            std::size_t m, std::size_t n) {
    std::vector<WindowSample> out;
    for (std::size_t i = 0; i < data.series.size(); ++i) {
        std::vector<WindowSample> w =
            make_windows(data.series[i], data.splits[i], which, m, n, data.stats);
        for (WindowSample& s : w) out.push_back(std::move(s));
    }
    return out;
}

Dataset prepare_dataset(const std::string& raw_dir, double raw_interval, double tolerance) {
    fs::path root(raw_dir);
    if (!fs::exists(root)) throw std::runtime_error("prepare: directory not found: " + raw_dir);
    if (fs::exists(root / "Data")) root /= "Data";

    std::vector<fs::path> users;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) users.push_back(entry.path());
    }
    std::sort(users.begin(), users.end());

    Dataset data;
    data.raw_interval = raw_interval;
    data.series_interval = 2.0 * raw_interval;
    std::vector<UniformSeries> all;
    for (const fs::path& user_dir : users) {
        const fs::path traj = user_dir / "Trajectory";
        if (!fs::exists(traj)) continue;
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(traj)) {
            if (entry.path().extension() == ".plt") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        const std::string user = user_dir.filename().string();
        for (const fs::path& file : files) {
            const PltParse parsed = parse_plt(read_file(file));
            for (const std::vector<RawPoint>& run :
                 select_by_interval(parsed.points, raw_interval, tolerance)) {
                UniformSeries s = resample_linear(run, data.series_interval);
                if (s.points.empty()) continue;
                s.user = user;
                all.push_back(std::move(s));
            }
        }
    }
    data.series = segment_and_filter(std::move(all));
    if (data.series.empty()) {
        throw std::runtime_error("prepare: no data (no series survived filtering)");
    }
    data.splits = split_all(data.series);
    data.stats = compute_stats(data.series, data.splits);
    return data;
}

void save_cache(const Dataset& data, const std::string& cache_dir) {
    const fs::path dir(cache_dir);
    fs::create_directories(dir / "series");

    json manifest;
    manifest["format"] = "mmctp-cache";
    manifest["version"] = kManifestVersion;
    manifest["raw_interval"] = data.raw_interval;
    manifest["series_interval"] = data.series_interval;
    manifest["stats"]["mean"] = data.stats.mean;
    manifest["stats"]["std"] = data.stats.stddev;
    json list = json::array();
    for (std::size_t i = 0; i < data.series.size(); ++i) {
        const UniformSeries& s = data.series[i];
        json item;
        item["user"] = s.user;
        item["length"] = s.points.size();
        item["train_end"] = data.splits[i].train_end;
        item["val_end"] = data.splits[i].val_end;
        item["first_t"] = s.points.front().t;
        list.push_back(std::move(item));
    }
    manifest["series"] = std::move(list);

    std::ofstream mf(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!mf) throw std::runtime_error("cache: cannot write manifest.json");
    mf << manifest.dump(2) << "\n";

    // One blob per user, series in manifest order.
    std::map<std::string, std::vector<const UniformSeries*>> by_user;
    for (const UniformSeries& s : data.series) by_user[s.user].push_back(&s);
    for (const auto& [user, list_ptr] : by_user) {
        std::ofstream out(dir / "series" / (user + ".bin"), std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cache: cannot write blob for user " + user);
        out.write(kBlobMagic, sizeof(kBlobMagic));
        out.put(static_cast<char>(kBlobVersion));
        write_u64(out, list_ptr.size());
        for (const UniformSeries* s : list_ptr) {
            write_u64(out, s->points.size());
            write_f64(out, s->interval);
            for (const TrajectoryPoint& p : s->points) {
                write_f64(out, p.t);
                write_f64(out, p.lon);
                write_f64(out, p.lat);
                write_f64(out, p.alt);
            }
        }
        if (!out) throw std::runtime_error("cache: write failed for user " + user);
    }
}

Dataset load_cache(const std::string& cache_dir) {
    const fs::path dir(cache_dir);
    std::ifstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("cache: manifest.json not found in " + cache_dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("cache: bad manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "mmctp-cache" ||
        manifest.value("version", -1) != kManifestVersion) {
        throw std::runtime_error("cache: unsupported manifest format or version");
    }

    Dataset data;
    data.raw_interval = manifest.at("raw_interval").get<double>();
    data.series_interval = manifest.at("series_interval").get<double>();
    data.stats.mean = manifest.at("stats").at("mean").get<std::array<double, 3>>();
    data.stats.stddev = manifest.at("stats").at("std").get<std::array<double, 3>>();

    // Per-user blob readers, consumed in manifest order.
    std::map<std::string, std::ifstream> blobs;
    std::map<std::string, std::uint64_t> remaining;
    for (const json& item : manifest.at("series")) {
        const std::string user = item.at("user").get<std::string>();
        auto it = blobs.find(user);
        if (it == blobs.end()) {
            std::ifstream in(dir / "series" / (user + ".bin"), std::ios::binary);
            if (!in) throw std::runtime_error("cache: missing blob for user " + user);
            char magic[8];
            in.read(magic, sizeof(magic));
            if (!in || std::memcmp(magic, kBlobMagic, sizeof(magic)) != 0) {
                throw std::runtime_error("cache: bad blob magic for user " + user);
            }
            const int version = in.get();
            if (version != kBlobVersion) {
                throw std::runtime_error("cache: unsupported blob version for user " + user);
            }
            remaining[user] = read_u64(in, "series count");
            it = blobs.emplace(user, std::move(in)).first;
        }
        if (remaining[user] == 0) {
            throw std::runtime_error("cache: blob for user " + user +
                                     " has fewer series than the manifest");
        }
        --remaining[user];
        std::ifstream& in = it->second;
        UniformSeries s;
        s.user = user;
        const std::uint64_t len = read_u64(in, "series length");
        if (len != item.at("length").get<std::uint64_t>()) {
            throw std::runtime_error("cache: blob/manifest length mismatch for user " + user);
        }
        s.interval = read_f64(in, "interval");
        s.points.resize(len);
        for (std::uint64_t p = 0; p < len; ++p) {
            s.points[p].t = read_f64(in, "point");
            s.points[p].lon = read_f64(in, "point");
            s.points[p].lat = read_f64(in, "point");
            s.points[p].alt = read_f64(in, "point");
        }
        data.series.push_back(std::move(s));
        data.splits.push_back({item.at("train_end").get<std::size_t>(),
                               item.at("val_end").get<std::size_t>()});
    }
    return data;
}

}  // namespace mmctp
