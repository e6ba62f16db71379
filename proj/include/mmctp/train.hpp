#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "mmctp/adam.hpp"
#include "mmctp/geolife.hpp"
#include "mmctp/model.hpp"
#include "mmctp/tensor.hpp"

namespace mmctp {

/**
 * Pointwise robust loss: r^2/2 when |r| <= delta, delta*(|r| - delta/2)
 * beyond; continuous at the threshold. Requires delta > 0.
 */
double huber(double r, double delta);

/**
 * Differentiable batch objective over [s, n, C] predictions and targets:
 * per-variable Huber terms are summed over the C variables and averaged
 * over samples and horizon steps (normalizer 1/(s*n), not 1/(s*n*C)).
 */
Tensor batch_loss(const Tensor& pred, const Tensor& truth, double delta);

/** Learning rate for 1-based epoch: initial * decay^(epoch-1). */
double lr_schedule(double initial_lr, double decay, std::size_t epoch);

/** FNV-1a over the standardization constants; ties checkpoints to a cache. */
std::uint64_t stats_hash(const DatasetStats& stats);

struct TrainConfig {
    std::size_t max_epochs = 50;
    std::size_t patience = 5;
    std::size_t batch_size = 32;
    double initial_lr = 2e-5;
    double lr_decay = 0.5;
    double huber_delta = 0.001;

    bool operator==(const TrainConfig&) const = default;

    /** Throws std::invalid_argument naming the violated constraint. */
    void validate() const;
};

/**
 * Validation-driven stopping rule: only a strictly smaller loss counts as
 * improvement and resets the counter; the run stops once the counter
 * reaches the patience threshold.
 */
class EarlyStopping {
  public:
    explicit EarlyStopping(std::size_t patience);
    /** Feeds one epoch's validation loss; returns true on improvement. */
    bool observe(double val_loss);
    bool should_stop() const { return counter_ >= patience_; }
    double best() const { return best_; }
    std::size_t counter() const { return counter_; }

  private:
    std::size_t patience_;
    std::size_t counter_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    std::size_t patience = 0;  // counter value after this epoch
    double wall_time_s = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> log;  // epochs run by this call
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;  // 1-based, 0 if never improved
    std::size_t epochs_run = 0;  // total epochs completed, including resumed
    bool early_stopped = false;
};

/** One mini-batch of window samples in tensor form. */
struct BatchTensors {
    Tensor input;        // [b, m, 3]
    Tensor target;       // [b, n, 3]
    Tensor input_time;   // [b, m, 6]
    Tensor target_time;  // [b, n, 6]
};

/**
 * Packs windows order[from..to) into contiguous tensors shaped for
 * Model::forward. Throws std::invalid_argument on an empty range.
 */
BatchTensors gather_batch(const std::vector<WindowSample>& windows,
                          const std::vector<std::size_t>& order, std::size_t from,
                          std::size_t to, const ModelConfig& cfg);

/**
 * Mean per-sample batch_loss of the model over a window set, eval mode,
 * no gradient recording. Used for validation and test losses.
 */
double dataset_loss(Model& model, const std::vector<WindowSample>& windows,
                    std::size_t batch_size, double delta);

/**
 * Runs the optimization loop on one model: per epoch a seeded shuffle,
 * mini-batch Adam steps on batch_loss, a validation pass, early stopping on
 * strict improvement, and a halving learning-rate schedule. Each epoch draws
 * its RNG stream from (seed, epoch), so a resumed run replays the identical
 * remaining schedule. After the loop the model carries the parameters and
 * batch-norm statistics of the best validation epoch.
 *
 * `save_state`/`load_state` serialize the full mid-training state (current
 * and best parameters, optimizer moments, counters) at epoch granularity.
 */
class Trainer {
  public:
    Trainer(Model& model, const TrainConfig& config, std::uint64_t seed);

    /**
     * Trains until early stop or max_epochs, appending one JSON object per
     * epoch to `log` (newline-delimited) when given. When `state_path` is
     * nonempty the full training state is rewritten there after every epoch,
     * before the final best-parameter restoration, so an interrupted run can
     * resume exactly. Throws on empty splits and on divergence (non-finite
     * loss, identifying epoch and batch).
     */
    TrainResult run(const std::vector<WindowSample>& train_windows,
                    const std::vector<WindowSample>& val_windows,
                    std::ostream* log = nullptr, const std::string& state_path = "");

    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

    const TrainConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    /** 1-based index of the next epoch to run. */
    std::size_t next_epoch() const { return next_epoch_; }

  private:
    struct Snapshot {
        std::vector<std::vector<double>> params;
        std::vector<std::vector<double>> bn_mean, bn_var;
        std::vector<char> bn_init;
    };
    Snapshot take_snapshot() const;
    void apply_snapshot(const Snapshot& snap);

    Model& model_;
    TrainConfig cfg_;
    std::uint64_t seed_;
    Adam opt_;
    std::size_t next_epoch_ = 1;
    double best_val_ = std::numeric_limits<double>::infinity();
    std::size_t best_epoch_ = 0;
    std::size_t patience_counter_ = 0;
    bool has_best_ = false;
    Snapshot best_;
};

/**
 * Versioned binary checkpoint: magic, version, the model configuration,
 * parameter tensors in declared order, batch-norm running statistics, and
 * the dataset-statistics hash. Rewrites are byte-identical.
 */
void save_checkpoint(Model& model, const DatasetStats& stats,
                     const std::string& path);

/**
 * Loads a checkpoint into an existing model; the stored configuration must
 * equal the model's and the stats hash must match, otherwise a structured
 * std::runtime_error is thrown (version/hash/config/truncation all named).
 */
void load_checkpoint_into(Model& model, const DatasetStats& stats,
                          const std::string& path);

/** Reconstructs the model (config included) from a checkpoint file. */
Model load_checkpoint(const std::string& path, const DatasetStats& stats);

}  // namespace mmctp
