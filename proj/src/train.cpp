#include "mmctp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mmctp/ops.hpp"
#include "mmctp/rng.hpp"

namespace mmctp {

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64s(std::ostream& out, const std::vector<double>& v) {
    write_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::uint64_t read_u64(std::istream& in, const char* what) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

double read_f64(std::istream& in, const char* what) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

std::vector<double> read_f64s(std::istream& in, const char* what) {
    const std::uint64_t count = read_u64(in, what);
    std::vector<double> v(count);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error(std::string(what) + ": truncated file");
    return v;
}

constexpr char kCheckpointMagic[8] = {'M', 'M', 'C', 'T', 'P', 'C', 'K', 'P'};
constexpr char kStateMagic[8] = {'M', 'M', 'C', 'T', 'P', 'T', 'R', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kStateVersion = 1;

void write_magic(std::ostream& out, const char (&magic)[8], std::uint32_t version) {
    out.write(magic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
}

void read_magic(std::istream& in, const char (&magic)[8], std::uint32_t version,
                const char* what) {
    char got[8] = {};
    in.read(got, 8);
    if (!in || std::memcmp(got, magic, 8) != 0) {
        throw std::runtime_error(std::string(what) + ": unrecognized file format");
    }
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error(std::string(what) + ": truncated file");
    if (v != version) {
        throw std::runtime_error(std::string(what) + ": unsupported version " +
                                 std::to_string(v));
    }
}

void write_config(std::ostream& out, const ModelConfig& c) {
    write_u64(out, c.input_steps);
    write_u64(out, c.pred_steps);
    write_u64(out, c.variables);
    write_u64(out, c.prior_len);
    write_u64(out, c.width);
    write_u64(out, c.mlp_hidden);
    write_u64(out, c.mlp_blocks);
    write_u64(out, c.conv_blocks);
    write_u64(out, c.kernels.size());
    for (std::size_t k : c.kernels) write_u64(out, k);
    write_u64(out, c.heads);
    write_f64(out, c.dropout);
    write_f64(out, c.revin_eps);
    write_u64(out, static_cast<std::uint64_t>(c.variant));
}

ModelConfig read_config(std::istream& in, const char* what) {
    ModelConfig c;
    c.input_steps = read_u64(in, what);
    c.pred_steps = read_u64(in, what);
    c.variables = read_u64(in, what);
    c.prior_len = read_u64(in, what);
    c.width = read_u64(in, what);
    c.mlp_hidden = read_u64(in, what);
    c.mlp_blocks = read_u64(in, what);
    c.conv_blocks = read_u64(in, what);
    const std::uint64_t nk = read_u64(in, what);
    c.kernels.clear();
    for (std::uint64_t i = 0; i < nk; ++i) c.kernels.push_back(read_u64(in, what));
    c.heads = read_u64(in, what);
    c.dropout = read_f64(in, what);
    c.revin_eps = read_f64(in, what);
    const std::uint64_t v = read_u64(in, what);
    if (v > static_cast<std::uint64_t>(Variant::swapped_ca)) {
        throw std::runtime_error(std::string(what) + ": invalid variant field");
    }
    c.variant = static_cast<Variant>(v);
    return c;
}

void write_params(std::ostream& out, const std::vector<Tensor>& params) {
    write_u64(out, params.size());
    for (const Tensor& p : params) write_f64s(out, p.val());
}

void read_params_into(std::istream& in, const std::vector<Tensor>& params,
                      const char* what) {
    const std::uint64_t count = read_u64(in, what);
    if (count != params.size()) {
        throw std::runtime_error(std::string(what) +
                                 ": parameter tensor count mismatch");
    }
    for (const Tensor& p : params) {
        std::vector<double> vals = read_f64s(in, what);
        if (vals.size() != p.size()) {
            throw std::runtime_error(std::string(what) +
                                     ": parameter tensor size mismatch");
        }
        Tensor handle = p;
        handle.mutable_val() = std::move(vals);
    }
}

void write_bn(std::ostream& out, const std::vector<BatchNormState*>& states) {
    write_u64(out, states.size());
    for (const BatchNormState* s : states) {
        write_f64s(out, s->running_mean);
        write_f64s(out, s->running_var);
        out.put(s->initialized ? 1 : 0);
    }
}

void read_bn_into(std::istream& in, const std::vector<BatchNormState*>& states,
                  const char* what) {
    const std::uint64_t count = read_u64(in, what);
    if (count != states.size()) {
        throw std::runtime_error(std::string(what) + ": batch-norm state mismatch");
    }
    for (BatchNormState* s : states) {
        std::vector<double> mean = read_f64s(in, what);
        std::vector<double> var = read_f64s(in, what);
        if (mean.size() != s->running_mean.size() ||
            var.size() != s->running_var.size()) {
            throw std::runtime_error(std::string(what) +
                                     ": batch-norm channel mismatch");
        }
        s->running_mean = std::move(mean);
        s->running_var = std::move(var);
        const int flag = in.get();
        if (flag < 0) throw std::runtime_error(std::string(what) + ": truncated file");
        s->initialized = flag != 0;
    }
}

}  // namespace

double huber(double r, double delta) {
    if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be positive");
    const double a = std::abs(r);
    if (a <= delta) return 0.5 * r * r;
    return delta * (a - 0.5 * delta);
}

Tensor batch_loss(const Tensor& pred, const Tensor& truth, double delta) {
    if (!(delta > 0.0)) {
        throw std::invalid_argument("batch_loss: delta must be positive");
    }
    if (pred.rank() != 3 || pred.shape() != truth.shape()) {
        throw std::invalid_argument("batch_loss: prediction shape " +
                                    shape_str(pred.shape()) + " does not match " +
                                    shape_str(truth.shape()));
    }
    const std::size_t s = pred.dim(0);
    const std::size_t n = pred.dim(1);
    const double norm = 1.0 / static_cast<double>(s * n);
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        total += huber(pred.val()[i] - truth.val()[i], delta);
    }
    std::vector<Tensor> parents = {pred, truth};
    return make_node(
        {}, {total * norm}, std::move(parents),
        [delta, norm](detail::Node& self) {
            const double g = self.grad[0] * norm;
            detail::Node& p = *self.parents[0];
            detail::Node& t = *self.parents[1];
            auto apply = [&](std::vector<double>& dst, double sign) {
                for (std::size_t i = 0; i < p.val.size(); ++i) {
                    const double r = p.val[i] - t.val[i];
                    const double dr =
                        std::abs(r) <= delta ? r : (r > 0 ? delta : -delta);
                    dst[i] += sign * g * dr;
                }
            };
            if (p.requires_grad) apply(p.ensure_grad(), 1.0);
            if (t.requires_grad) apply(t.ensure_grad(), -1.0);
        });
}

double lr_schedule(double initial_lr, double decay, std::size_t epoch) {
    if (epoch == 0) throw std::invalid_argument("lr_schedule: epochs are 1-based");
    return initial_lr * std::pow(decay, static_cast<double>(epoch - 1));
}

std::uint64_t stats_hash(const DatasetStats& stats) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV offset basis
    auto mix = [&h](double v) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffULL;
            h *= 1099511628211ULL;  // FNV prime
        }
    };
    for (double v : stats.mean) mix(v);
    for (double v : stats.stddev) mix(v);
    return h;
}

void TrainConfig::validate() const {
    if (max_epochs == 0) throw std::invalid_argument("train: max_epochs must be >= 1");
    if (patience == 0) throw std::invalid_argument("train: patience must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(initial_lr > 0.0)) {
        throw std::invalid_argument("train: initial_lr must be positive");
    }
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
        throw std::invalid_argument("train: lr_decay must be in (0, 1]");
    }
    if (!(huber_delta > 0.0)) {
        throw std::invalid_argument("train: huber_delta must be positive");
    }
}

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw std::invalid_argument("early stopping: patience >= 1");
}

bool EarlyStopping::observe(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        counter_ = 0;
        return true;
    }
    ++counter_;
    return false;
}

BatchTensors gather_batch(const std::vector<WindowSample>& windows,
                          const std::vector<std::size_t>& order, std::size_t from,
                          std::size_t to, const ModelConfig& cfg) {
    if (from >= to || to > order.size()) {
        throw std::invalid_argument("gather_batch: empty or out-of-range batch");
    }
    const std::size_t b = to - from;
    const std::size_t m = cfg.input_steps;
    const std::size_t n = cfg.pred_steps;
    const std::size_t c = cfg.variables;
    BatchTensors out;
    out.input = Tensor::zeros({b, m, c});
    out.target = Tensor::zeros({b, n, c});
    out.input_time = Tensor::zeros({b, m, kTimeFeatures});
    out.target_time = Tensor::zeros({b, n, kTimeFeatures});
    for (std::size_t k = 0; k < b; ++k) {
        const WindowSample& w = windows[order[from + k]];
        if (w.input.size() != m * c || w.target.size() != n * c ||
            w.input_time.size() != m * kTimeFeatures ||
            w.target_time.size() != n * kTimeFeatures) {
            throw std::invalid_argument(
                "gather_batch: window does not match the model configuration");
        }
        std::copy(w.input.begin(), w.input.end(),
                  out.input.mutable_val().begin() + static_cast<long>(k * m * c));
        std::copy(w.target.begin(), w.target.end(),
                  out.target.mutable_val().begin() + static_cast<long>(k * n * c));
        std::copy(w.input_time.begin(), w.input_time.end(),
                  out.input_time.mutable_val().begin() +
                      static_cast<long>(k * m * kTimeFeatures));
        std::copy(w.target_time.begin(), w.target_time.end(),
                  out.target_time.mutable_val().begin() +
                      static_cast<long>(k * n * kTimeFeatures));
    }
    return out;
}

double dataset_loss(Model& model, const std::vector<WindowSample>& windows,
                    std::size_t batch_size, double delta) {
    if (windows.empty()) {
        throw std::invalid_argument("dataset_loss: no windows");
    }
    NoGradGuard guard;
    Rng unused(0);
    std::vector<std::size_t> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double total = 0.0;
    for (std::size_t from = 0; from < order.size(); from += batch_size) {
        const std::size_t to = std::min(order.size(), from + batch_size);
        BatchTensors batch = gather_batch(windows, order, from, to, model.config());
        Tensor out = model.forward(batch.input, batch.input_time, batch.target_time,
                                   Mode::eval, unused);
        Tensor loss = batch_loss(out, batch.target, delta);
        total += loss.item() * static_cast<double>(to - from);
    }
    return total / static_cast<double>(windows.size());
}

Trainer::Trainer(Model& model, const TrainConfig& config, std::uint64_t seed)
    : model_(model), cfg_(config), seed_(seed),
      opt_(model.params(), config.initial_lr) {
    cfg_.validate();
}

Trainer::Snapshot Trainer::take_snapshot() const {
    Snapshot snap;
    for (const Tensor& p : model_.params()) snap.params.push_back(p.val());
    for (BatchNormState* bn : model_.batch_norm_states()) {
        snap.bn_mean.push_back(bn->running_mean);
        snap.bn_var.push_back(bn->running_var);
        snap.bn_init.push_back(bn->initialized ? 1 : 0);
    }
    return snap;
}

void Trainer::apply_snapshot(const Snapshot& snap) {
    const auto& params = model_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor handle = params[i];
        handle.mutable_val() = snap.params[i];
    }
    auto bns = model_.batch_norm_states();
    for (std::size_t i = 0; i < bns.size(); ++i) {
        bns[i]->running_mean = snap.bn_mean[i];
        bns[i]->running_var = snap.bn_var[i];
        bns[i]->initialized = snap.bn_init[i] != 0;
    }
}

TrainResult Trainer::run(const std::vector<WindowSample>& train_windows,
                         const std::vector<WindowSample>& val_windows,
                         std::ostream* log, const std::string& state_path) {
    if (train_windows.empty()) throw std::invalid_argument("train: no training windows");
    if (val_windows.empty()) throw std::invalid_argument("train: no validation windows");

    TrainResult result;
    result.best_val_loss = best_val_;
    result.best_epoch = best_epoch_;

    // A resumed state that had already met the stopping rule runs no further.
    if (patience_counter_ >= cfg_.patience) {
        if (has_best_) apply_snapshot(best_);
        result.epochs_run = next_epoch_ - 1;
        result.early_stopped = true;
        return result;
    }

    std::vector<std::size_t> order(train_windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    while (next_epoch_ <= cfg_.max_epochs) {
        const std::size_t epoch = next_epoch_;
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_schedule(cfg_.initial_lr, cfg_.lr_decay, epoch);
        opt_.set_lr(lr);

        Rng epoch_rng(Rng::mix(seed_, epoch));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        epoch_rng.shuffle(order);

        double train_loss = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t from = 0; from < order.size();
             from += cfg_.batch_size, ++batch_index) {
            const std::size_t to = std::min(order.size(), from + cfg_.batch_size);
            BatchTensors batch =
                gather_batch(train_windows, order, from, to, model_.config());
            opt_.zero_grad();
            Tensor out = model_.forward(batch.input, batch.input_time,
                                        batch.target_time, Mode::train, epoch_rng);
            Tensor loss = batch_loss(out, batch.target, cfg_.huber_delta);
            const double loss_v = loss.item();
            if (!std::isfinite(loss_v)) {
                throw std::runtime_error(
                    "train: diverged (non-finite loss) at epoch " +
                    std::to_string(epoch) + ", batch " + std::to_string(batch_index));
            }
            loss.backward();
            opt_.step();
            train_loss += loss_v * static_cast<double>(to - from);
        }
        train_loss /= static_cast<double>(order.size());

        const double val_loss =
            dataset_loss(model_, val_windows, cfg_.batch_size, cfg_.huber_delta);
        if (!std::isfinite(val_loss)) {
            throw std::runtime_error("train: diverged (non-finite validation loss) "
                                     "at epoch " + std::to_string(epoch));
        }

        if (val_loss < best_val_) {
            best_val_ = val_loss;
            best_epoch_ = epoch;
            patience_counter_ = 0;
            best_ = take_snapshot();
            has_best_ = true;
        } else {
            ++patience_counter_;
        }

        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        EpochRecord rec{epoch, train_loss, val_loss, lr, patience_counter_, wall};
        result.log.push_back(rec);
        if (log) {
            nlohmann::json line = {
                {"epoch", rec.epoch},       {"train_loss", rec.train_loss},
                {"val_loss", rec.val_loss}, {"lr", rec.lr},
                {"patience", rec.patience}, {"wall_time_s", rec.wall_time_s}};
            *log << line.dump() << "\n";
        }

        ++next_epoch_;
        if (!state_path.empty()) save_state(state_path);
        if (patience_counter_ >= cfg_.patience) {
            result.early_stopped = true;
            break;
        }
    }

    if (has_best_) apply_snapshot(best_);
    result.best_val_loss = best_val_;
    result.best_epoch = best_epoch_;
    result.epochs_run = next_epoch_ - 1;
    return result;
}

void Trainer::save_state(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("train state: cannot write " + path);
    write_magic(out, kStateMagic, kStateVersion);
    write_u64(out, seed_);
    write_u64(out, next_epoch_);
    write_f64(out, best_val_);
    write_u64(out, best_epoch_);
    write_u64(out, patience_counter_);
    write_params(out, model_.params());
    write_bn(out, model_.batch_norm_states());
    out.put(has_best_ ? 1 : 0);
    if (has_best_) {
        write_u64(out, best_.params.size());
        for (const auto& p : best_.params) write_f64s(out, p);
        write_u64(out, best_.bn_mean.size());
        for (std::size_t i = 0; i < best_.bn_mean.size(); ++i) {
            write_f64s(out, best_.bn_mean[i]);
            write_f64s(out, best_.bn_var[i]);
            out.put(best_.bn_init[i]);
        }
    }
    opt_.save_state(out);
    if (!out) throw std::runtime_error("train state: write failed for " + path);
}

void Trainer::load_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("train state: cannot open " + path);
    read_magic(in, kStateMagic, kStateVersion, "train state");
    const std::uint64_t stored_seed = read_u64(in, "train state");
    if (stored_seed != seed_) {
        throw std::runtime_error("train state: seed mismatch (stored " +
                                 std::to_string(stored_seed) + ", running " +
                                 std::to_string(seed_) + ")");
    }
    next_epoch_ = read_u64(in, "train state");
    best_val_ = read_f64(in, "train state");
    best_epoch_ = read_u64(in, "train state");
    patience_counter_ = read_u64(in, "train state");
    read_params_into(in, model_.params(), "train state");
    read_bn_into(in, model_.batch_norm_states(), "train state");
    const int flag = in.get();
    if (flag < 0) throw std::runtime_error("train state: truncated file");
    has_best_ = flag != 0;
    if (has_best_) {
        best_ = Snapshot{};
        const std::uint64_t np = read_u64(in, "train state");
        if (np != model_.params().size()) {
            throw std::runtime_error("train state: snapshot parameter mismatch");
        }
        for (std::uint64_t i = 0; i < np; ++i) {
            best_.params.push_back(read_f64s(in, "train state"));
        }
        const std::uint64_t nb = read_u64(in, "train state");
        if (nb != model_.batch_norm_states().size()) {
            throw std::runtime_error("train state: snapshot batch-norm mismatch");
        }
        for (std::uint64_t i = 0; i < nb; ++i) {
            best_.bn_mean.push_back(read_f64s(in, "train state"));
            best_.bn_var.push_back(read_f64s(in, "train state"));
            const int init = in.get();
            if (init < 0) throw std::runtime_error("train state: truncated file");
            best_.bn_init.push_back(static_cast<char>(init != 0));
        }
    }
    opt_.load_state(in);
}

void save_checkpoint(Model& model, const DatasetStats& stats,
                     const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    write_magic(out, kCheckpointMagic, kCheckpointVersion);
    write_config(out, model.config());
    write_u64(out, stats_hash(stats));
    write_params(out, model.params());
    write_bn(out, model.batch_norm_states());
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

namespace {

void load_checkpoint_body(std::istream& in, Model& model, const DatasetStats& stats,
                          const ModelConfig& stored) {
    if (!(stored == model.config())) {
        throw std::runtime_error(
            "checkpoint: model configuration does not match the stored one");
    }
    const std::uint64_t hash = read_u64(in, "checkpoint");
    if (hash != stats_hash(stats)) {
        throw std::runtime_error(
            "checkpoint: dataset statistics hash mismatch (checkpoint was trained "
            "on a different cache)");
    }
    read_params_into(in, model.params(), "checkpoint");
    read_bn_into(in, model.batch_norm_states(), "checkpoint");
}

}  // namespace

void load_checkpoint_into(Model& model, const DatasetStats& stats,
                          const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    read_magic(in, kCheckpointMagic, kCheckpointVersion, "checkpoint");
    const ModelConfig stored = read_config(in, "checkpoint");
    load_checkpoint_body(in, model, stats, stored);
}

Model load_checkpoint(const std::string& path, const DatasetStats& stats) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    read_magic(in, kCheckpointMagic, kCheckpointVersion, "checkpoint");
    const ModelConfig stored = read_config(in, "checkpoint");
    Rng init_rng(0);
    Model model(stored, init_rng);
    load_checkpoint_body(in, model, stats, stored);
    return model;
}

}  // namespace mmctp
