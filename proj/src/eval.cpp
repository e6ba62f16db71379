#include "mmctp/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mmctp/ops.hpp"

namespace mmctp {

namespace {

void check_pair(const Tensor& pred, const Tensor& truth, const char* who) {
    if (pred.shape().size() != 3 || truth.shape().size() != 3) {
        throw std::invalid_argument(std::string(who) +
                                    ": expected rank-3 forecast tensors");
    }
    if (pred.shape() != truth.shape()) {
        throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                    shape_str(pred.shape()) + " vs " +
                                    shape_str(truth.shape()));
    }
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) /
           static_cast<double>(v.size());
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

std::vector<std::size_t> identity_order(std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    return order;
}

}  // namespace

double mse(const Tensor& pred, const Tensor& truth) {
    check_pair(pred, truth, "mse");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred.val()[i] - truth.val()[i];
        sum += r * r;
    }
    return sum / static_cast<double>(pred.size());
}

double mae(const Tensor& pred, const Tensor& truth) {
    check_pair(pred, truth, "mae");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        sum += std::abs(pred.val()[i] - truth.val()[i]);
    }
    return sum / static_cast<double>(pred.size());
}

Tensor persistence_baseline(const Tensor& inputs, std::size_t pred_steps) {
    if (inputs.shape().size() != 3) {
        throw std::invalid_argument(
            "persistence_baseline: expected rank-3 inputs");
    }
    if (pred_steps == 0) {
        throw std::invalid_argument(
            "persistence_baseline: pred_steps must be positive");
    }
    const std::size_t s = inputs.shape()[0];
    const std::size_t m = inputs.shape()[1];
    const std::size_t c = inputs.shape()[2];
    Tensor out = Tensor::zeros({s, pred_steps, c});
    for (std::size_t i = 0; i < s; ++i) {
        const double* last = inputs.val().data() + (i * m + (m - 1)) * c;
        for (std::size_t j = 0; j < pred_steps; ++j) {
            std::copy(last, last + c,
                      out.mutable_val().begin() +
                          static_cast<long>((i * pred_steps + j) * c));
        }
    }
    return out;
}

InferenceTiming time_inference(Model& model,
                               const std::vector<WindowSample>& windows,
                               std::size_t max_samples) {
    if (windows.empty()) {
        throw std::invalid_argument("time_inference: no windows");
    }
    const ModelConfig& cfg = model.config();
    const std::size_t count = std::min(max_samples, windows.size());
    const std::vector<std::size_t> order = identity_order(windows.size());

    // Assemble every single-sample batch up front so only the forward pass
    // is inside the timed region.
    std::vector<BatchTensors> batches;
    batches.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        batches.push_back(gather_batch(windows, order, i, i + 1, cfg));
    }

    NoGradGuard guard;
    Rng rng(0);
    for (std::size_t w = 0; w < 10; ++w) {
        const BatchTensors& b = batches[w % count];
        model.forward(b.input, b.input_time, b.target_time, Mode::eval, rng);
    }

    InferenceTiming timing;
    timing.samples = count;
    std::vector<double> rep_means;
    double pooled = 0.0;
    for (std::size_t rep = 0; rep < 3; ++rep) {
        const auto start = std::chrono::steady_clock::now();
        for (const BatchTensors& b : batches) {
            model.forward(b.input, b.input_time, b.target_time, Mode::eval,
                          rng);
        }
        const auto stop = std::chrono::steady_clock::now();
        const double ms =
            std::chrono::duration<double, std::milli>(stop - start).count();
        rep_means.push_back(ms / static_cast<double>(count));
        pooled += ms;
    }
    timing.mean_ms = pooled / static_cast<double>(3 * count);
    timing.median3_ms = median3(rep_means);
    return timing;
}

SplitMetrics evaluate_split(Model& model,
                            const std::vector<WindowSample>& windows,
                            const DatasetStats& stats,
                            std::size_t batch_size) {
    if (windows.empty()) {
        throw std::invalid_argument("evaluate_split: no windows");
    }
    if (batch_size == 0) {
        throw std::invalid_argument("evaluate_split: batch_size must be positive");
    }
    const ModelConfig& cfg = model.config();
    const std::vector<std::size_t> order = identity_order(windows.size());

    NoGradGuard guard;
    Rng rng(0);
    double sq_norm = 0.0, abs_norm = 0.0, sq_raw = 0.0, abs_raw = 0.0;
    std::size_t elements = 0;
    for (std::size_t from = 0; from < windows.size(); from += batch_size) {
        const std::size_t to = std::min(from + batch_size, windows.size());
        BatchTensors b = gather_batch(windows, order, from, to, cfg);
        Tensor pred =
            model.forward(b.input, b.input_time, b.target_time, Mode::eval, rng);
        const std::size_t s = to - from;
        for (std::size_t i = 0; i < s * cfg.pred_steps; ++i) {
            for (std::size_t v = 0; v < cfg.variables; ++v) {
                const double r =
                    pred.val()[i * cfg.variables + v] -
                    b.target.val()[i * cfg.variables + v];
                const double raw = r * stats.stddev[v];
                sq_norm += r * r;
                abs_norm += std::abs(r);
                sq_raw += raw * raw;
                abs_raw += std::abs(raw);
                ++elements;
            }
        }
    }
    SplitMetrics out;
    out.samples = windows.size();
    const double denom = static_cast<double>(elements);
    out.mse_norm = sq_norm / denom;
    out.mae_norm = abs_norm / denom;
    out.mse_raw = sq_raw / denom;
    out.mae_raw = abs_raw / denom;
    return out;
}

double persistence_mse_of(const std::vector<WindowSample>& windows,
                          const ModelConfig& config) {
    if (windows.empty()) {
        throw std::invalid_argument("persistence_mse_of: no windows");
    }
    const std::vector<std::size_t> order = identity_order(windows.size());
    double sum = 0.0;
    std::size_t elements = 0;
    for (std::size_t from = 0; from < windows.size(); from += 256) {
        const std::size_t to = std::min(from + 256, windows.size());
        BatchTensors b = gather_batch(windows, order, from, to, config);
        Tensor base = persistence_baseline(b.input, config.pred_steps);
        for (std::size_t i = 0; i < base.size(); ++i) {
            const double r = base.val()[i] - b.target.val()[i];
            sum += r * r;
            ++elements;
        }
    }
    return sum / static_cast<double>(elements);
}

MetricsReport run_ablation(Variant variant, const AblationSetup& setup,
                           const std::vector<WindowSample>& train_windows,
                           const std::vector<WindowSample>& val_windows,
                           const std::vector<WindowSample>& test_windows,
                           const DatasetStats& stats) {
    if (setup.seeds.empty()) {
        throw std::invalid_argument("run_ablation: at least one seed required");
    }
    ModelConfig cfg = setup.model;
    cfg.variant = variant;

    MetricsReport report;
    report.dataset = setup.dataset;
    report.interval = setup.interval;
    report.input_steps = cfg.input_steps;
    report.pred_steps = cfg.pred_steps;
    report.variant = variant_name(variant);
    report.seeds = setup.seeds;
    report.sample_count = test_windows.size();
    report.best_val_loss = std::numeric_limits<double>::infinity();
    report.persistence_mse = persistence_mse_of(test_windows, cfg);

    for (std::size_t k = 0; k < setup.seeds.size(); ++k) {
        const std::uint64_t seed = setup.seeds[k];
        Rng init(seed);
        Model model(cfg, init);
        if (k == 0) report.param_count = model.param_count();
        Trainer trainer(model, setup.train, seed);
        TrainResult result = trainer.run(train_windows, val_windows);
        report.best_val_loss = std::min(report.best_val_loss, result.best_val_loss);

        SplitMetrics metrics = evaluate_split(model, test_windows, stats,
                                              setup.train.batch_size);
        report.mse_per_seed.push_back(metrics.mse_norm);
        report.mae_per_seed.push_back(metrics.mae_norm);
        report.mse_raw_per_seed.push_back(metrics.mse_raw);
        report.mae_raw_per_seed.push_back(metrics.mae_raw);

        if (setup.time_it && k + 1 == setup.seeds.size()) {
            InferenceTiming timing = time_inference(model, test_windows);
            report.inference_ms_mean = timing.mean_ms;
            report.inference_ms_median3 = timing.median3_ms;
        }
    }
    report.mse_mean = mean_of(report.mse_per_seed);
    report.mae_mean = mean_of(report.mae_per_seed);
    report.mse_raw_mean = mean_of(report.mse_raw_per_seed);
    report.mae_raw_mean = mean_of(report.mae_raw_per_seed);
    return report;
}

void write_report_json(const std::string& path, const MetricsReport& report) {
    nlohmann::json j;
    j["dataset"] = report.dataset;
    j["interval"] = report.interval;
    j["input_steps"] = report.input_steps;
    j["pred_steps"] = report.pred_steps;
    j["variant"] = report.variant;
    j["seeds"] = report.seeds;
    j["mse_per_seed"] = report.mse_per_seed;
    j["mae_per_seed"] = report.mae_per_seed;
    j["mse_raw_per_seed"] = report.mse_raw_per_seed;
    j["mae_raw_per_seed"] = report.mae_raw_per_seed;
    j["mse_mean"] = report.mse_mean;
    j["mae_mean"] = report.mae_mean;
    j["mse_raw_mean"] = report.mse_raw_mean;
    j["mae_raw_mean"] = report.mae_raw_mean;
    j["inference_ms_mean"] = report.inference_ms_mean;
    j["inference_ms_median3"] = report.inference_ms_median3;
    j["sample_count"] = report.sample_count;
    j["param_count"] = report.param_count;
    j["best_val_loss"] = report.best_val_loss;
    j["persistence_mse"] = report.persistence_mse;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot write " + path);
    out << j.dump(2) << "\n";
}

void append_report_csv(const std::string& path, const MetricsReport& report) {
    namespace fs = std::filesystem;
    std::error_code ec;
    const bool fresh = !fs::exists(path, ec) || fs::file_size(path, ec) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("report: cannot write " + path);
    if (fresh) {
        out << "variant,dataset,interval,input_steps,pred_steps,seeds,"
               "mse_mean,mae_mean,mse_raw_mean,mae_raw_mean,"
               "inference_ms_mean,inference_ms_median3,samples,params,"
               "persistence_mse\n";
    }
    std::ostringstream seeds;
    for (std::size_t i = 0; i < report.seeds.size(); ++i) {
        if (i) seeds << "|";
        seeds << report.seeds[i];
    }
    out << report.variant << "," << report.dataset << ","
        << std::setprecision(12) << report.interval << ","
        << report.input_steps << "," << report.pred_steps << ","
        << seeds.str() << "," << report.mse_mean << "," << report.mae_mean
        << "," << report.mse_raw_mean << "," << report.mae_raw_mean << ","
        << report.inference_ms_mean << "," << report.inference_ms_median3
        << "," << report.sample_count << "," << report.param_count << ","
        << report.persistence_mse << "\n";
}

void write_predictions_csv(const std::string& path, Model& model,
                           const std::vector<WindowSample>& windows,
                           const DatasetStats& stats,
                           std::size_t batch_size) {
    if (windows.empty()) {
        throw std::invalid_argument("predictions: no windows");
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("predictions: cannot write " + path);
    out << "timestamp,true_lon,true_lat,true_alt,pred_lon,pred_lat,pred_alt\n";
    out << std::setprecision(12);

    const ModelConfig& cfg = model.config();
    const std::vector<std::size_t> order = identity_order(windows.size());
    NoGradGuard guard;
    Rng rng(0);
    for (std::size_t from = 0; from < windows.size(); from += batch_size) {
        const std::size_t to = std::min(from + batch_size, windows.size());
        BatchTensors b = gather_batch(windows, order, from, to, cfg);
        Tensor pred =
            model.forward(b.input, b.input_time, b.target_time, Mode::eval, rng);
        for (std::size_t i = from; i < to; ++i) {
            const WindowSample& w = windows[i];
            const double last =
                w.t0 + static_cast<double>(cfg.input_steps - 1) * w.interval;
            const std::vector<double> times =
                future_timestamps(last, w.interval, cfg.pred_steps);
            for (std::size_t j = 0; j < cfg.pred_steps; ++j) {
                out << times[j];
                for (std::size_t v = 0; v < cfg.variables; ++v) {
                    const double truth =
                        w.target[j * cfg.variables + v] * stats.stddev[v] +
                        stats.mean[v];
                    out << "," << truth;
                }
                for (std::size_t v = 0; v < cfg.variables; ++v) {
                    const double p =
                        pred.at({i - from, j, v}) * stats.stddev[v] +
                        stats.mean[v];
                    out << "," << p;
                }
                out << "\n";
            }
        }
    }
}

}  // namespace mmctp
