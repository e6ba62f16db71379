#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmctp/ops.hpp"
#include "mmctp/rng.hpp"
#include "mmctp/tensor.hpp"

namespace mmctp {

/** Number of per-timestamp calendar feature columns. */
inline constexpr std::size_t kTimeFeatures = 6;

/**
 * Architecture variants. `full` is the complete network; the others remove
 * or rewire one component while preserving the s x n x C output contract:
 * - no_mlp: the global branch is absent, the fusion keys/values are zero.
 * - no_mscnn: the local branch is absent, the fusion query block is a
 *   learned constant.
 * - no_ca: attention is replaced by concatenation plus a linear head.
 * - fixed_kernel_5: the conv branch uses the single kernel size 5.
 * - swapped_ca: the query comes from the global branch, keys/values from
 *   the local branch.
 */
enum class Variant { full, no_mlp, no_mscnn, no_ca, fixed_kernel_5, swapped_ca };

/** Parses names like "full" or "no-mscnn"; throws std::invalid_argument. */
Variant variant_from_string(const std::string& name);
std::string variant_name(Variant v);

/** Hyperparameters of the network; `validate()` enforces the invariants. */
struct ModelConfig {
    std::size_t input_steps = 48;    // lookback window length
    std::size_t pred_steps = 12;     // forecast horizon
    std::size_t variables = 3;       // lon, lat, alt
    std::size_t prior_len = 24;      // recent-history rows fed to the conv branch
    std::size_t width = 256;         // shared embedding width
    std::size_t mlp_hidden = 2048;   // hidden neurons of the global mixer
    std::size_t mlp_blocks = 1;
    std::size_t conv_blocks = 2;
    std::vector<std::size_t> kernels = {3, 5, 7};
    std::size_t heads = 8;
    double dropout = 0.05;
    double revin_eps = 1e-5;
    Variant variant = Variant::full;

    std::size_t head_dim() const { return width / heads; }

    /** Throws std::invalid_argument naming the violated constraint. */
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/**
 * Deterministic sine/cosine position table, shape [length, width]:
 * column 2v holds sin(pos / 10000^(2v/width)), column 2v+1 the cosine.
 * Requires even width. Constant (not learned).
 */
Tensor positional_embedding(std::size_t length, std::size_t width);

/**
 * Per-sample, per-variable statistics captured by instance normalization;
 * the matching denormalization consumes them on the same forward pass.
 */
struct RevinState {
    Tensor mean;   // [s, C]
    Tensor denom;  // [s, C], sqrt(var + eps)
};

/** Intermediate shapes recorded during forward, for tests and diagnostics. */
struct ForwardTrace {
    Shape global_embedded;  // [s, input_steps, C]
    Shape global_summary;   // [s, C, width]
    Shape local_embedded;   // [s, prior_len + pred_steps, width]
    Shape local_summary;    // [s, pred_steps, width]
    Shape fused;            // [s, pred_steps, width]
    Shape output;           // [s, pred_steps, C]
};

/**
 * Multi-step trajectory forecaster. Instance-normalizes each input window,
 * runs a global mixer branch over the full lookback and a multi-scale
 * convolution branch over recent history plus zero-filled future slots,
 * fuses the two with multi-head cross-attention, projects to the variables,
 * and denormalizes.
 *
 * Parameters are registered in a fixed declared order so checkpoints can
 * serialize them positionally; `batch_norm_states()` exposes the running
 * statistics in the same deterministic order.
 */
class Model {
  public:
    Model(const ModelConfig& config, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    /** Learnable tensors in fixed declared order (shared handles). */
    const std::vector<Tensor>& params() const { return params_; }
    /** Total learnable element count; a pure function of the config. */
    std::size_t param_count() const;
    /** Batch-norm states in declared order, for serialization and freezing. */
    std::vector<BatchNormState*> batch_norm_states();

    /**
     * One forward pass.
     *
     * input is [s, input_steps, variables]; input_time [s, input_steps, 6];
     * future_time [s, pred_steps, 6]. Returns [s, pred_steps, variables]
     * predictions in the caller's (dataset-normalized) coordinates. Train
     * mode applies dropout and updates batch-norm statistics; eval mode is
     * deterministic. Every stage checks its output shape and a violation
     * throws std::runtime_error naming the stage.
     */
    Tensor forward(const Tensor& input, const Tensor& input_time,
                   const Tensor& future_time, Mode mode, Rng& rng,
                   ForwardTrace* trace = nullptr);

    /**
     * Instance normalization: per sample and variable, subtract the temporal
     * mean, divide by sqrt(var + eps), apply the learned affine. Exposed for
     * direct testing; forward() calls it internally.
     */
    std::pair<Tensor, RevinState> revin_normalize(const Tensor& input) const;
    /** Inverse of revin_normalize given the state of the same pass. */
    Tensor revin_denormalize(const Tensor& output, const RevinState& state) const;

    /**
     * Runs one global mixer block on [s, input_steps, C]: batch-norm, a
     * two-layer network along the time axis, and a skip connection. Exposed
     * so the skip identity (zero inner weights leave the input unchanged)
     * can be tested directly. Throws std::out_of_range on a bad index.
     */
    Tensor mixer_block(std::size_t index, const Tensor& x, Mode mode);
    /**
     * Runs one multi-scale conv block on [s, prior_len + pred_steps, width];
     * zero conv weights reduce it to the identity via the skip path.
     */
    Tensor conv_block(std::size_t index, const Tensor& x, Mode mode);
    /**
     * Multi-head cross-attention read-out: queries from `query_src`
     * [s, Lq, width], keys/values from `kv_src` [s, Lk, width]. Requires a
     * variant that builds attention weights.
     */
    Tensor fuse_attention(const Tensor& query_src, const Tensor& kv_src) const;

  private:
    struct Embedding {
        Tensor value_w, value_b;        // [C_in, width], [width]
        Tensor temporal_w, temporal_b;  // [6, width], [width]
        Tensor post_w, post_b;          // [width, out], [out]
        Tensor table;                   // [length, width], constant
    };
    struct MlpBlock {
        BatchNormState bn;  // over the C variable channels
        Tensor w1, b1;      // [input_steps, mlp_hidden]
        Tensor w2, b2;      // [mlp_hidden, input_steps]
        explicit MlpBlock(std::size_t channels) : bn(channels) {}
    };
    struct ConvStack {
        Tensor w;  // [width, in_channels, kernel]
        Tensor b;  // [width]
    };
    struct MscnnBlock {
        BatchNormState bn;  // over the width channels
        std::vector<ConvStack> convs;
        Tensor merge_w, merge_b;  // [width, g*width, 1]
        explicit MscnnBlock(std::size_t channels) : bn(channels) {}
    };
    struct Attention {
        Tensor wq, wk, wv;                     // [width, width]
        std::vector<Tensor> hq, hk, hv;        // heads x [width, head_dim]
        Tensor wz;                             // [width, width]
    };

    Tensor init_weight(const Shape& shape, std::size_t fan_in, Rng& rng);
    Tensor init_bias(std::size_t size);
    void register_param(const Tensor& t);
    void register_embedding(Embedding& e);

    Embedding make_embedding(std::size_t length, std::size_t out, Rng& rng);
    Tensor run_embedding(const Embedding& e, const Tensor& values,
                         const Tensor& features, Mode mode, Rng& rng) const;
    Tensor run_mlp_block(MlpBlock& blk, const Tensor& x, Mode mode) const;
    Tensor run_mscnn_block(MscnnBlock& blk, const Tensor& x, Mode mode) const;
    Tensor run_attention(const Attention& a, const Tensor& q_src,
                         const Tensor& kv_src) const;

    ModelConfig cfg_;
    Tensor revin_gamma_, revin_beta_;  // [C]

    std::optional<Embedding> global_embed_;
    std::vector<MlpBlock> mlp_blocks_;
    Tensor bridge_w_, bridge_b_;  // [input_steps, width]

    std::optional<Embedding> local_embed_;
    std::vector<MscnnBlock> mscnn_blocks_;
    Tensor local_const_;  // [pred_steps, width] for the no_mscnn variant

    std::optional<Attention> attn_;
    Tensor rowmix_w_, rowmix_b_;  // fusion head for no_ca / swapped_ca

    Tensor out_w_, out_b_;  // [width, C]

    std::vector<Tensor> params_;
};

}  // namespace mmctp
