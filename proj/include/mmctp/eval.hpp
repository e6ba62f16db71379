#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mmctp/geolife.hpp"
#include "mmctp/model.hpp"
#include "mmctp/train.hpp"

namespace mmctp {

/**
 * Mean squared error over every element of two s x n x 3 forecast tensors:
 * the sum of squared residuals divided by 3*s*n. Throws on shape mismatch
 * or wrong rank.
 */
double mse(const Tensor& pred, const Tensor& truth);

/** Mean absolute error, same reduction as mse. */
double mae(const Tensor& pred, const Tensor& truth);

/**
 * Forecast that repeats the last observed input point for every horizon
 * step: inputs of shape s x m x 3 produce predictions of shape s x n x 3.
 * The weakest sane forecaster, used as a floor any trained model must beat.
 */
Tensor persistence_baseline(const Tensor& inputs, std::size_t pred_steps);

/** Per-sample wall-clock inference cost, measured at batch size 1. */
struct InferenceTiming {
    double mean_ms = 0.0;     // mean per-sample time pooled over repetitions
    double median3_ms = 0.0;  // median of the three per-repetition means
    std::size_t samples = 0;  // samples timed per repetition
};

/**
 * Times eval-mode forwards one sample at a time. Runs 10 untimed warm-up
 * inferences first, then three timed repetitions over up to `max_samples`
 * windows. The forward pass includes normalization and denormalization;
 * batch assembly is excluded. Ordinary metric evaluation stays separate,
 * so timing noise never contaminates the error fields.
 */
InferenceTiming time_inference(Model& model,
                               const std::vector<WindowSample>& windows,
                               std::size_t max_samples = 64);

/** Error of one model on one window set, in both coordinate systems. */
struct SplitMetrics {
    double mse_norm = 0.0;  // standardized coordinates, as trained
    double mae_norm = 0.0;
    double mse_raw = 0.0;  // degrees / metres, residuals scaled back
    double mae_raw = 0.0;
    std::size_t samples = 0;
};

/**
 * Mean squared and absolute error of eval-mode predictions over all
 * windows, batched for throughput. Normalized-space numbers are the
 * primary metrics; raw-space numbers rescale each residual by the
 * dataset's per-variable standard deviation before reducing.
 */
SplitMetrics evaluate_split(Model& model,
                            const std::vector<WindowSample>& windows,
                            const DatasetStats& stats,
                            std::size_t batch_size = 64);

/** One trained-and-measured configuration, ready for serialization. */
struct MetricsReport {
    std::string dataset;  // cache label the windows came from
    double interval = 0.0;
    std::size_t input_steps = 0;
    std::size_t pred_steps = 0;
    std::string variant = "full";
    std::vector<std::uint64_t> seeds;
    std::vector<double> mse_per_seed;  // normalized space, one per seed
    std::vector<double> mae_per_seed;
    std::vector<double> mse_raw_per_seed;
    std::vector<double> mae_raw_per_seed;
    double mse_mean = 0.0;  // arithmetic means over seeds
    double mae_mean = 0.0;
    double mse_raw_mean = 0.0;
    double mae_raw_mean = 0.0;
    double inference_ms_mean = 0.0;
    double inference_ms_median3 = 0.0;
    std::size_t sample_count = 0;
    std::size_t param_count = 0;
    double best_val_loss = 0.0;     // lowest per-seed validation loss seen
    double persistence_mse = 0.0;   // last-point-repeat floor, normalized
};

/**
 * Normalized-space MSE of the last-point-repeat forecast over a window
 * set: the floor any trained model is expected to beat.
 */
double persistence_mse_of(const std::vector<WindowSample>& windows,
                          const ModelConfig& config);

/** Everything run_ablation needs besides the variant under test. */
struct AblationSetup {
    ModelConfig model;  // variant field is overridden per run
    TrainConfig train;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string dataset = "dataset";
    double interval = 0.0;
    bool time_it = true;  // timing can be skipped in tests
};

/**
 * Trains the requested variant once per seed on the given windows and
 * evaluates it on the test split. Metric fields are deterministic for a
 * fixed (setup, windows) pair; only the timing fields vary run to run.
 */
MetricsReport run_ablation(Variant variant, const AblationSetup& setup,
                           const std::vector<WindowSample>& train_windows,
                           const std::vector<WindowSample>& val_windows,
                           const std::vector<WindowSample>& test_windows,
                           const DatasetStats& stats);

/** Serializes a report to pretty-printed JSON at `path`. */
void write_report_json(const std::string& path, const MetricsReport& report);

/**
 * Appends one spreadsheet row per report; writes the header first when the
 * file does not exist yet or is empty.
 */
void append_report_csv(const std::string& path, const MetricsReport& report);

/**
 * Writes one CSV row per predicted fix: timestamp, true lon/lat/alt,
 * predicted lon/lat/alt, all in raw coordinates. Rows appear in window
 * order, horizon-step major within a window.
 */
void write_predictions_csv(const std::string& path, Model& model,
                           const std::vector<WindowSample>& windows,
                           const DatasetStats& stats,
                           std::size_t batch_size = 64);

}  // namespace mmctp
