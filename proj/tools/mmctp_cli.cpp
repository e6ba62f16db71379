#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "mmctp/cli.hpp"
#include "mmctp/config.hpp"

namespace {

/** Config file plus command-line overrides, validated as a whole. */
mmctp::ExperimentConfig resolve_config(const std::string& config_path,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::string& variant,
                                       const std::string& raw_dir,
                                       const std::string& cache_dir,
                                       const std::string& out_dir) {
    mmctp::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = mmctp::parse_config_file(config_path);
    if (!seeds.empty()) cfg.seeds = seeds;
    if (!variant.empty()) cfg.model.variant = mmctp::variant_from_string(variant);
    if (!raw_dir.empty()) cfg.raw_dir = raw_dir;
    if (!cache_dir.empty()) cfg.cache_dir = cache_dir;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-step GPS trajectory forecasting pipeline"};
    app.require_subcommand(1);

    std::string config_path, variant, raw_dir, cache_dir, out_dir;
    std::vector<std::uint64_t> seeds;
    std::string grid, checkpoint, split = "test", input_csv, output_csv;
    bool force = false, resume = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config file");
        cmd->add_option("--seed", seeds, "override the seed list");
        cmd->add_option("--variant", variant, "override the model variant");
        cmd->add_option("--cache", cache_dir, "override cache_dir");
        cmd->add_option("--out", out_dir, "override out_dir");
        cmd->add_flag("--force", force, "overwrite existing outputs");
    };

    CLI::App* prepare =
        app.add_subcommand("prepare", "build the dataset cache from raw GPS files");
    add_common(prepare);
    prepare->add_option("--raw", raw_dir, "raw corpus root (overrides raw_dir)");

    CLI::App* train = app.add_subcommand("train", "train one model per seed");
    add_common(train);
    train->add_flag("--resume", resume, "continue from saved training state");
    train->add_option("--grid", grid,
                      "length sweep preset: input-lengths or horizons");

    CLI::App* eval_cmd =
        app.add_subcommand("eval", "evaluate a checkpoint on one split");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")
        ->required();
    eval_cmd->add_option("--split", split, "train, val, or test");

    CLI::App* ablate =
        app.add_subcommand("ablate", "train and compare all six model variants");
    add_common(ablate);

    CLI::App* predict =
        app.add_subcommand("predict", "forecast from a CSV of observed fixes");
    add_common(predict);
    predict->add_option("--checkpoint", checkpoint, "trained checkpoint")
        ->required();
    predict->add_option("--input", input_csv, "CSV of observed fixes")
        ->required();
    predict->add_option("--output", output_csv, "where to write predictions")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const mmctp::ExperimentConfig cfg = resolve_config(
            config_path, seeds, variant, raw_dir, cache_dir, out_dir);
        if (prepare->parsed()) {
            mmctp::cmd_prepare(cfg, force, std::cout);
        } else if (train->parsed()) {
            mmctp::cmd_train(cfg, resume, force, grid, std::cout);
        } else if (eval_cmd->parsed()) {
            mmctp::cmd_eval(cfg, checkpoint, split, force, std::cout);
        } else if (ablate->parsed()) {
            mmctp::cmd_ablate(cfg, force, std::cout);
        } else if (predict->parsed()) {
            mmctp::cmd_predict(cfg, checkpoint, input_csv, output_csv,
                               std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
