#include "mmctp/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mmctp {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    errno = 0;
    char* end = nullptr;
    if (value.empty() || value[0] == '-' || value[0] == '+') {
        throw std::invalid_argument("config: key '" + key +
                                    "' expects a non-negative integer, got '" +
                                    value + "'");
    }
    const unsigned long long parsed = std::strtoull(value.c_str(), &end, 10);
    if (errno != 0 || end != value.c_str() + value.size()) {
        throw std::invalid_argument("config: key '" + key +
                                    "' expects a non-negative integer, got '" +
                                    value + "'");
    }
    return static_cast<std::size_t>(parsed);
}

double parse_double(const std::string& key, const std::string& value) {
    errno = 0;
    char* end = nullptr;
    const double parsed = std::strtod(value.c_str(), &end);
    if (value.empty() || errno != 0 || end != value.c_str() + value.size()) {
        throw std::invalid_argument("config: key '" + key +
                                    "' expects a number, got '" + value + "'");
    }
    return parsed;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
    std::vector<T> out;
    std::istringstream in(value);
    std::string item;
    while (std::getline(in, item, ',')) {
        out.push_back(static_cast<T>(parse_size(key, trim(item))));
    }
    if (out.empty()) {
        throw std::invalid_argument("config: key '" + key +
                                    "' expects a comma-separated list");
    }
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::ostringstream out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ",";
        out << v[i];
    }
    return out.str();
}

}  // namespace

void ExperimentConfig::validate() const {
    if (interval <= 0.0) {
        throw std::invalid_argument("config: interval must be positive");
    }
    if (cache_dir.empty()) {
        throw std::invalid_argument("config: cache_dir must not be empty");
    }
    if (out_dir.empty()) {
        throw std::invalid_argument("config: out_dir must not be empty");
    }
    if (seeds.empty()) {
        throw std::invalid_argument("config: seeds must not be empty");
    }
    model.validate();
    train.validate();
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = trim(raw);
        if (line.empty()) continue;

        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(
                "config: line " + std::to_string(lineno) +
                " is not of the form 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config: line " +
                                        std::to_string(lineno) +
                                        " has an empty key");
        }
        if (!seen.insert(key).second) {
            throw std::invalid_argument("config: duplicate key '" + key + "'");
        }

        if (key == "raw_dir") {
            cfg.raw_dir = value;
        } else if (key == "cache_dir") {
            cfg.cache_dir = value;
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else if (key == "interval") {
            cfg.interval = parse_double(key, value);
        } else if (key == "input_steps") {
            cfg.model.input_steps = parse_size(key, value);
        } else if (key == "pred_steps") {
            cfg.model.pred_steps = parse_size(key, value);
        } else if (key == "prior_len") {
            cfg.model.prior_len = parse_size(key, value);
        } else if (key == "width") {
            cfg.model.width = parse_size(key, value);
        } else if (key == "mlp_hidden") {
            cfg.model.mlp_hidden = parse_size(key, value);
        } else if (key == "mlp_blocks") {
            cfg.model.mlp_blocks = parse_size(key, value);
        } else if (key == "conv_blocks") {
            cfg.model.conv_blocks = parse_size(key, value);
        } else if (key == "kernels") {
            cfg.model.kernels = parse_list<std::size_t>(key, value);
        } else if (key == "heads") {
            cfg.model.heads = parse_size(key, value);
        } else if (key == "dropout") {
            cfg.model.dropout = parse_double(key, value);
        } else if (key == "revin_eps") {
            cfg.model.revin_eps = parse_double(key, value);
        } else if (key == "variant") {
            cfg.model.variant = variant_from_string(value);
        } else if (key == "max_epochs") {
            cfg.train.max_epochs = parse_size(key, value);
        } else if (key == "patience") {
            cfg.train.patience = parse_size(key, value);
        } else if (key == "batch_size") {
            cfg.train.batch_size = parse_size(key, value);
        } else if (key == "initial_lr") {
            cfg.train.initial_lr = parse_double(key, value);
        } else if (key == "lr_decay") {
            cfg.train.lr_decay = parse_double(key, value);
        } else if (key == "huber_delta") {
            cfg.train.huber_delta = parse_double(key, value);
        } else if (key == "seeds") {
            cfg.seeds = parse_list<std::uint64_t>(key, value);
        } else {
            throw std::invalid_argument("config: unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("config: cannot read " + path);
    }
    std::ostringstream text;
    text << in.rdbuf();
    try {
        return parse_config_text(text.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string(e.what()) + " (" + path + ")");
    }
}

std::string render_config(const ExperimentConfig& c) {
    std::ostringstream out;
    out << "raw_dir = " << c.raw_dir << "\n";
    out << "cache_dir = " << c.cache_dir << "\n";
    out << "out_dir = " << c.out_dir << "\n";
    out << "interval = " << format_double(c.interval) << "\n";
    out << "input_steps = " << c.model.input_steps << "\n";
    out << "pred_steps = " << c.model.pred_steps << "\n";
    out << "prior_len = " << c.model.prior_len << "\n";
    out << "width = " << c.model.width << "\n";
    out << "mlp_hidden = " << c.model.mlp_hidden << "\n";
    out << "mlp_blocks = " << c.model.mlp_blocks << "\n";
    out << "conv_blocks = " << c.model.conv_blocks << "\n";
    out << "kernels = " << join(c.model.kernels) << "\n";
    out << "heads = " << c.model.heads << "\n";
    out << "dropout = " << format_double(c.model.dropout) << "\n";
    out << "revin_eps = " << format_double(c.model.revin_eps) << "\n";
    out << "variant = " << variant_name(c.model.variant) << "\n";
    out << "max_epochs = " << c.train.max_epochs << "\n";
    out << "patience = " << c.train.patience << "\n";
    out << "batch_size = " << c.train.batch_size << "\n";
    out << "initial_lr = " << format_double(c.train.initial_lr) << "\n";
    out << "lr_decay = " << format_double(c.train.lr_decay) << "\n";
    out << "huber_delta = " << format_double(c.train.huber_delta) << "\n";
    out << "seeds = " << join(c.seeds) << "\n";
    return out.str();
}

std::vector<std::pair<std::size_t, std::size_t>> grid_preset(
    const std::string& name) {
    if (name == "input-lengths") {
        return {{24, 12}, {48, 12}, {96, 12}, {192, 12}};
    }
    if (name == "horizons") {
        return {{48, 3}, {48, 6}, {48, 12}, {48, 24}, {48, 48}};
    }
    throw std::invalid_argument(
        "config: unknown grid preset '" + name +
        "' (expected 'input-lengths' or 'horizons')");
}

}  // namespace mmctp
