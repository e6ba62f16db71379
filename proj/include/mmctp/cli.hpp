#pragma once

#include <iosfwd>
#include <string>

#include "mmctp/config.hpp"

namespace mmctp {

/**
 * Builds (or reuses) the dataset cache at config.cache_dir from the raw
 * GPS corpus at config.raw_dir and prints user/series/point/window counts.
 * An existing cache is reused unless `force` is set. Throws on a missing
 * corpus or when filtering leaves no data.
 */
void cmd_prepare(const ExperimentConfig& config, bool force, std::ostream& out);

/**
 * Trains one model per seed on the cached dataset and writes, per run,
 * a checkpoint, a JSON-lines epoch log, a resumable optimizer state, and
 * a per-seed summary, plus a seed-mean summary per configuration. `grid`
 * selects a (input length, horizon) sweep preset; empty trains just the
 * configured lengths. Completed seeds are skipped unless `force` is set;
 * `resume` continues interrupted runs from their saved state.
 */
void cmd_train(const ExperimentConfig& config, bool resume, bool force,
               const std::string& grid, std::ostream& out);

/**
 * Evaluates a checkpoint on one split of the cached dataset and writes
 * report.json, report.csv, and predictions.csv. The checkpoint must have
 * been trained on a cache with identical normalization statistics.
 */
void cmd_eval(const ExperimentConfig& config, const std::string& checkpoint,
              const std::string& split, bool force, std::ostream& out);

/**
 * Trains and evaluates all six model variants under the same config and
 * seeds, one report row each, into out_dir/ablation.
 */
void cmd_ablate(const ExperimentConfig& config, bool force, std::ostream& out);

/**
 * Forecasts from a CSV of observed fixes (timestamp,lon,lat,alt rows on a
 * uniform time grid, exactly as many as the checkpoint's input length) and
 * writes the predicted fixes as CSV to output_csv.
 */
void cmd_predict(const ExperimentConfig& config, const std::string& checkpoint,
                 const std::string& input_csv, const std::string& output_csv,
                 std::ostream& out);

}  // namespace mmctp
