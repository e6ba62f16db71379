#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmctp/model.hpp"
#include "mmctp/train.hpp"

namespace mmctp {

/**
 * Everything one experiment needs: data locations, the raw sampling
 * interval, model and training settings, and the seed list. Every field
 * has a working default, so an empty config file is a valid experiment.
 */
struct ExperimentConfig {
    std::string raw_dir;            // GPS corpus root (prepare input)
    std::string cache_dir = "cache";
    std::string out_dir = "runs";
    double interval = 15.0;  // raw sampling interval in seconds

    ModelConfig model;
    TrainConfig train;
    std::vector<std::uint64_t> seeds = {1, 2, 3};

    bool operator==(const ExperimentConfig&) const = default;

    /** Validates every overlay plus the config-only fields. */
    void validate() const;
};

/**
 * Parses flat `key = value` config text. `#` starts a comment, blank lines
 * are ignored, keys may appear at most once, and unknown keys are rejected
 * so typos cannot silently fall back to defaults. The parsed config is
 * validated before it is returned. Errors name the offending key.
 */
ExperimentConfig parse_config_text(const std::string& text);

/** parse_config_text over a file's contents; errors name the path. */
ExperimentConfig parse_config_file(const std::string& path);

/**
 * Renders a config as parseable `key = value` text containing every field,
 * so the echoed copy stored beside a run reproduces it exactly:
 * parse_config_text(render_config(c)) == c.
 */
std::string render_config(const ExperimentConfig& config);

/**
 * Named (input length, horizon) sweeps: "input-lengths" is 24/48/96/192
 * steps in with 12 out; "horizons" is 48 in with 3/6/12/24/48 out.
 * Throws on any other name.
 */
std::vector<std::pair<std::size_t, std::size_t>> grid_preset(
    const std::string& name);

}  // namespace mmctp
