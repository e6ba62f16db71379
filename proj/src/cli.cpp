#include "mmctp/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mmctp/eval.hpp"
#include "mmctp/geolife.hpp"
#include "mmctp/model.hpp"
#include "mmctp/ops.hpp"
#include "mmctp/train.hpp"

namespace mmctp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Dataset load_cache_checked(const ExperimentConfig& cfg, const char* who) {
    Dataset data = load_cache(cfg.cache_dir);
    if (data.raw_interval != cfg.interval) {
        std::ostringstream msg;
        msg << who << ": cache was prepared at interval " << data.raw_interval
            << " s but the config asks for " << cfg.interval << " s";
        throw std::runtime_error(msg.str());
    }
    return data;
}

std::size_t count_users(const Dataset& data) {
    std::set<std::string> users;
    for (const UniformSeries& s : data.series) users.insert(s.user);
    return users.size();
}

std::size_t count_points(const Dataset& data) {
    std::size_t n = 0;
    for (const UniformSeries& s : data.series) n += s.points.size();
    return n;
}

void print_counts(const Dataset& data, const ModelConfig& mc,
                  std::ostream& out) {
    const auto train = windows_for_split(data, Split::train, mc.input_steps,
                                         mc.pred_steps);
    const auto val =
        windows_for_split(data, Split::val, mc.input_steps, mc.pred_steps);
    const auto test =
        windows_for_split(data, Split::test, mc.input_steps, mc.pred_steps);
    out << "users: " << count_users(data) << "\n"
        << "series: " << data.series.size() << "\n"
        << "points: " << count_points(data) << "\n"
        << "samples (" << mc.input_steps << " in / " << mc.pred_steps
        << " out): " << train.size() << " train / " << val.size()
        << " val / " << test.size() << " test\n";
}

std::string run_tag(const ModelConfig& mc) {
    std::ostringstream tag;
    tag << variant_name(mc.variant) << "-m" << mc.input_steps << "-n"
        << mc.pred_steps;
    return tag.str();
}

/** Per-seed training outcome persisted beside the checkpoint. */
void write_final_json(const fs::path& path, std::uint64_t seed,
                      const TrainResult& result) {
    json j;
    j["seed"] = seed;
    j["best_val_loss"] = result.best_val_loss;
    j["best_epoch"] = result.best_epoch;
    j["epochs_run"] = result.epochs_run;
    j["early_stopped"] = result.early_stopped;
    std::ofstream(path) << j.dump(2) << "\n";
}

void train_one_config(const ExperimentConfig& cfg, const ModelConfig& mc,
                      const Dataset& data, bool resume, bool force,
                      std::ostream& out) {
    mc.validate();
    const auto train_w =
        windows_for_split(data, Split::train, mc.input_steps, mc.pred_steps);
    const auto val_w =
        windows_for_split(data, Split::val, mc.input_steps, mc.pred_steps);
    if (train_w.empty() || val_w.empty()) {
        throw std::runtime_error(
            "train: the cached series are too short for input length " +
            std::to_string(mc.input_steps) + " and horizon " +
            std::to_string(mc.pred_steps));
    }

    const fs::path dir = fs::path(cfg.out_dir) / run_tag(mc);
    fs::create_directories(dir);
    {
        ExperimentConfig resolved = cfg;
        resolved.model = mc;
        std::ofstream(dir / "config.txt") << render_config(resolved);
    }

    json per_seed = json::array();
    for (const std::uint64_t seed : cfg.seeds) {
        const fs::path seed_dir = dir / ("seed" + std::to_string(seed));
        fs::create_directories(seed_dir);
        const fs::path ckpt = seed_dir / "checkpoint.bin";
        const fs::path state = seed_dir / "state.bin";
        const fs::path final_path = seed_dir / "final.json";

        if (fs::exists(ckpt) && !force && !resume) {
            out << run_tag(mc) << " seed " << seed
                << ": checkpoint exists, skipping (use --force to retrain)\n";
            std::ifstream fin(final_path);
            if (fin) per_seed.push_back(json::parse(fin));
            continue;
        }

        Rng init(seed);
        Model model(mc, init);
        Trainer trainer(model, cfg.train, seed);
        if (resume && fs::exists(state)) {
            trainer.load_state(state.string());
            out << run_tag(mc) << " seed " << seed << ": resuming at epoch "
                << trainer.next_epoch() << "\n";
        }
        std::ofstream log(seed_dir / "train_log.jsonl");
        TrainResult result =
            trainer.run(train_w, val_w, &log, state.string());
        save_checkpoint(model, data.stats, ckpt.string());
        write_final_json(final_path, seed, result);

        json j;
        j["seed"] = seed;
        j["best_val_loss"] = result.best_val_loss;
        j["best_epoch"] = result.best_epoch;
        j["epochs_run"] = result.epochs_run;
        j["early_stopped"] = result.early_stopped;
        per_seed.push_back(j);
        out << run_tag(mc) << " seed " << seed << ": best val loss "
            << result.best_val_loss << " at epoch " << result.best_epoch
            << " (" << result.epochs_run << " epochs)\n";
    }

    json summary;
    summary["tag"] = run_tag(mc);
    summary["per_seed"] = per_seed;
    if (!per_seed.empty()) {
        double mean = 0.0;
        for (const json& j : per_seed) {
            mean += j.at("best_val_loss").get<double>();
        }
        mean /= static_cast<double>(per_seed.size());
        summary["best_val_loss_mean"] = mean;
        out << run_tag(mc) << ": seed-mean best val loss " << mean << "\n";
    }
    std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
}

double parse_cell(const std::string& cell, const std::string& path,
                  std::size_t lineno) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (cell.empty() || errno != 0 || end != cell.c_str() + cell.size()) {
        throw std::runtime_error("predict: line " + std::to_string(lineno) +
                                 " of " + path +
                                 " is not 'timestamp,lon,lat,alt'");
    }
    return v;
}

}  // namespace

void cmd_prepare(const ExperimentConfig& cfg, bool force, std::ostream& out) {
    const fs::path manifest = fs::path(cfg.cache_dir) / "manifest.json";
    if (fs::exists(manifest) && !force) {
        out << "reusing cache at " << cfg.cache_dir
            << " (use --force to rebuild)\n";
        Dataset data = load_cache(cfg.cache_dir);
        print_counts(data, cfg.model, out);
        return;
    }
    if (cfg.raw_dir.empty()) {
        throw std::runtime_error("prepare: raw_dir is not configured");
    }
    Dataset data = prepare_dataset(cfg.raw_dir, cfg.interval);
    save_cache(data, cfg.cache_dir);
    out << "prepared cache at " << cfg.cache_dir << " (interval "
        << cfg.interval << " s)\n";
    print_counts(data, cfg.model, out);
}

void cmd_train(const ExperimentConfig& cfg, bool resume, bool force,
               const std::string& grid, std::ostream& out) {
    const Dataset data = load_cache_checked(cfg, "train");
    std::vector<std::pair<std::size_t, std::size_t>> lengths;
    if (grid.empty()) {
        lengths.emplace_back(cfg.model.input_steps, cfg.model.pred_steps);
    } else {
        lengths = grid_preset(grid);
    }
    for (const auto& [m, n] : lengths) {
        ModelConfig mc = cfg.model;
        mc.input_steps = m;
        mc.pred_steps = n;
        train_one_config(cfg, mc, data, resume, force, out);
    }
}

void cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint,
              const std::string& split, bool force, std::ostream& out) {
    Split which;
    if (split == "train") {
        which = Split::train;
    } else if (split == "val") {
        which = Split::val;
    } else if (split == "test") {
        which = Split::test;
    } else {
        throw std::runtime_error("eval: unknown split '" + split +
                                 "' (expected train, val, or test)");
    }

    const Dataset data = load_cache_checked(cfg, "eval");
    Model model = load_checkpoint(checkpoint, data.stats);
    const ModelConfig& mc = model.config();

    const fs::path dir = fs::path(cfg.out_dir) / ("eval-" + split);
    const fs::path json_path = dir / "report.json";
    if (fs::exists(json_path) && !force) {
        out << "report exists at " << json_path.string()
            << ", skipping (use --force to re-evaluate)\n";
        return;
    }
    fs::create_directories(dir);

    const auto windows =
        windows_for_split(data, which, mc.input_steps, mc.pred_steps);
    if (windows.empty()) {
        throw std::runtime_error("eval: the " + split +
                                 " split has no windows at these lengths");
    }

    SplitMetrics sm = evaluate_split(model, windows, data.stats,
                                     cfg.train.batch_size);
    InferenceTiming timing = time_inference(model, windows);

    MetricsReport report;
    report.dataset = cfg.cache_dir;
    report.interval = data.raw_interval;
    report.input_steps = mc.input_steps;
    report.pred_steps = mc.pred_steps;
    report.variant = variant_name(mc.variant);
    report.mse_per_seed = {sm.mse_norm};
    report.mae_per_seed = {sm.mae_norm};
    report.mse_raw_per_seed = {sm.mse_raw};
    report.mae_raw_per_seed = {sm.mae_raw};
    report.mse_mean = sm.mse_norm;
    report.mae_mean = sm.mae_norm;
    report.mse_raw_mean = sm.mse_raw;
    report.mae_raw_mean = sm.mae_raw;
    report.inference_ms_mean = timing.mean_ms;
    report.inference_ms_median3 = timing.median3_ms;
    report.sample_count = windows.size();
    report.param_count = model.param_count();
    report.persistence_mse = persistence_mse_of(windows, mc);

    write_report_json(json_path.string(), report);
    append_report_csv((dir / "report.csv").string(), report);
    write_predictions_csv((dir / "predictions.csv").string(), model, windows,
                          data.stats, cfg.train.batch_size);

    out << split << " mse " << report.mse_mean << " mae " << report.mae_mean
        << " (raw " << report.mse_raw_mean << " / " << report.mae_raw_mean
        << "), persistence mse " << report.persistence_mse << ", "
        << report.inference_ms_mean << " ms/sample over "
        << report.sample_count << " samples\n";
    out << "reports written to " << dir.string() << "\n";
}

void cmd_ablate(const ExperimentConfig& cfg, bool force, std::ostream& out) {
    const Dataset data = load_cache_checked(cfg, "ablate");
    const ModelConfig& mc = cfg.model;
    const auto train_w =
        windows_for_split(data, Split::train, mc.input_steps, mc.pred_steps);
    const auto val_w =
        windows_for_split(data, Split::val, mc.input_steps, mc.pred_steps);
    const auto test_w =
        windows_for_split(data, Split::test, mc.input_steps, mc.pred_steps);
    if (train_w.empty() || val_w.empty() || test_w.empty()) {
        throw std::runtime_error(
            "ablate: the cached series are too short for these lengths");
    }

    const fs::path dir = fs::path(cfg.out_dir) / "ablation";
    const fs::path csv = dir / "report.csv";
    if (fs::exists(csv) && !force) {
        out << "ablation report exists at " << csv.string()
            << ", skipping (use --force to rerun)\n";
        return;
    }
    fs::create_directories(dir);
    std::error_code ec;
    fs::remove(csv, ec);

    AblationSetup setup;
    setup.model = cfg.model;
    setup.train = cfg.train;
    setup.seeds = cfg.seeds;
    setup.dataset = cfg.cache_dir;
    setup.interval = data.raw_interval;

    const Variant variants[] = {Variant::full,     Variant::no_mlp,
                                Variant::no_mscnn, Variant::no_ca,
                                Variant::fixed_kernel_5, Variant::swapped_ca};
    for (Variant v : variants) {
        MetricsReport report =
            run_ablation(v, setup, train_w, val_w, test_w, data.stats);
        write_report_json((dir / (report.variant + ".json")).string(), report);
        append_report_csv(csv.string(), report);
        out << report.variant << ": mse " << report.mse_mean << " mae "
            << report.mae_mean << " (" << report.param_count
            << " parameters)\n";
    }
    out << "ablation reports written to " << dir.string() << "\n";
}

void cmd_predict(const ExperimentConfig& cfg, const std::string& checkpoint,
                 const std::string& input_csv, const std::string& output_csv,
                 std::ostream& out) {
    const Dataset data = load_cache_checked(cfg, "predict");
    Model model = load_checkpoint(checkpoint, data.stats);
    const ModelConfig& mc = model.config();
    const std::size_t m = mc.input_steps;
    const std::size_t n = mc.pred_steps;

    std::ifstream in(input_csv);
    if (!in) throw std::runtime_error("predict: cannot read " + input_csv);
    std::vector<std::array<double, 4>> fixes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const char first = line[0];
        if (fixes.empty() && !std::isdigit(first) && first != '-' &&
            first != '+' && first != '.') {
            continue;  // header row
        }
        std::istringstream cells(line);
        std::string cell;
        std::array<double, 4> row{};
        std::size_t field = 0;
        while (std::getline(cells, cell, ',')) {
            if (field >= 4) break;
            row[field++] = parse_cell(cell, input_csv, lineno);
        }
        if (field != 4) {
            throw std::runtime_error("predict: line " +
                                     std::to_string(lineno) + " of " +
                                     input_csv +
                                     " is not 'timestamp,lon,lat,alt'");
        }
        fixes.push_back(row);
    }
    if (fixes.size() != m) {
        throw std::runtime_error(
            "predict: expected exactly " + std::to_string(m) +
            " input fixes, got " + std::to_string(fixes.size()));
    }

    const double interval = fixes[1][0] - fixes[0][0];
    if (interval <= 0.0) {
        throw std::runtime_error("predict: timestamps must increase");
    }
    for (std::size_t i = 1; i < m; ++i) {
        const double gap = fixes[i][0] - fixes[i - 1][0];
        if (std::abs(gap - interval) > 1e-6 * std::max(1.0, interval)) {
            throw std::runtime_error(
                "predict: input fixes are not on a uniform time grid");
        }
    }

    Tensor input = Tensor::zeros({1, m, 3});
    Tensor input_time = Tensor::zeros({1, m, kTimeFeatures});
    for (std::size_t i = 0; i < m; ++i) {
        const auto z =
            standardize(data.stats, fixes[i][1], fixes[i][2], fixes[i][3]);
        for (std::size_t v = 0; v < 3; ++v) {
            input.mutable_val()[i * 3 + v] = z[v];
        }
        const auto f =
            time_features(static_cast<std::int64_t>(std::llround(fixes[i][0])));
        for (std::size_t k = 0; k < kTimeFeatures; ++k) {
            input_time.mutable_val()[i * kTimeFeatures + k] = f[k];
        }
    }
    const std::vector<double> future =
        future_timestamps(fixes.back()[0], interval, n);
    Tensor target_time = Tensor::zeros({1, n, kTimeFeatures});
    for (std::size_t j = 0; j < n; ++j) {
        const auto f =
            time_features(static_cast<std::int64_t>(std::llround(future[j])));
        for (std::size_t k = 0; k < kTimeFeatures; ++k) {
            target_time.mutable_val()[j * kTimeFeatures + k] = f[k];
        }
    }

    NoGradGuard guard;
    Rng rng(0);
    Tensor pred =
        model.forward(input, input_time, target_time, Mode::eval, rng);

    std::ofstream csv(output_csv);
    if (!csv) throw std::runtime_error("predict: cannot write " + output_csv);
    csv << "timestamp,lon,lat,alt\n" << std::setprecision(12);
    for (std::size_t j = 0; j < n; ++j) {
        const auto raw = unstandardize(data.stats, pred.at({0, j, 0}),
                                       pred.at({0, j, 1}), pred.at({0, j, 2}));
        csv << future[j] << "," << raw[0] << "," << raw[1] << "," << raw[2]
            << "\n";
    }
    out << "wrote " << n << " predicted fixes to " << output_csv << "\n";
}

}  // namespace mmctp
