#pragma once

#include <vector>

#include "mmctp/tensor.hpp"

namespace mmctp {

class Rng;

/** Forward behavior switch shared by dropout, batch norm, and the model. */
enum class Mode { train, eval };

/** C = A @ B for rank-2 tensors. */
Tensor matmul(const Tensor& a, const Tensor& b);

/**
 * x @ w with x of any rank >= 1; leading axes are folded into rows, the
 * last axis must match w's first. Output keeps the leading axes with the
 * last replaced by w's column count.
 */
Tensor linear(const Tensor& x, const Tensor& w);
/** x @ w + b with b broadcast over rows. */
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/**
 * Length-preserving 1-D convolution over the last axis.
 *
 * x is [s, C_in, L] (or [C_in, L], treated as one sample), w is
 * [C_out, C_in, width] with odd width, b is [C_out]. Positions outside
 * [0, L) read as zero, so the output length equals L for stride 1.
 */
Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b);

/**
 * Per-channel standardization state: learnable scale/shift plus running
 * statistics folded in during training (biased variance, fixed momentum).
 */
struct BatchNormState {
    explicit BatchNormState(std::size_t channels, double eps = 1e-5,
                            double momentum = 0.1);
    Tensor gamma;  // [C]
    Tensor beta;   // [C]
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;
    double eps;
    double momentum;
};

/**
 * Batch normalization over [s, C, L]: each channel is standardized over the
 * batch and length axes in train mode (updating running statistics), or by
 * the stored running statistics in eval mode. Eval before any train-mode
 * call is an error.
 */
Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode);

Tensor relu(const Tensor& x);
Tensor tanh_act(const Tensor& x);

/** Softmax over the last axis, computed with max subtraction. */
Tensor softmax_lastdim(const Tensor& x);

/**
 * Inverted dropout: in train mode each element is zeroed with probability
 * rate and survivors are scaled by 1/(1-rate), so the expectation equals
 * the input. Identity in eval mode or at rate 0.
 */
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

/** [A, B] -> [B, A]. */
Tensor transpose2(const Tensor& x);
/** [s, A, B] -> [s, B, A]. */
Tensor permute_last2(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor mul(const Tensor& a, const Tensor& b);  // same shape, elementwise
Tensor scale(const Tensor& x, double c);
Tensor square(const Tensor& x);
Tensor sum_all(const Tensor& x);  // -> scalar

/** [s, L, D] + [L, D], the table broadcast over the batch axis. */
Tensor add_table(const Tensor& x, const Tensor& table);
/** [A, B] -> [s, A, B]; gradients sum over the batch axis. */
Tensor repeat_batch(const Tensor& t, std::size_t s);

/** Rows [from, to) of axis 1 of an [s, A, B] tensor. */
Tensor slice_axis1(const Tensor& x, std::size_t from, std::size_t to);
/** Concatenation along axis 1 of [s, Ai, B] tensors. */
Tensor concat_axis1(const std::vector<Tensor>& parts);
/** Concatenation along the last axis of [s, A, Bi] tensors. */
Tensor concat_lastdim(const std::vector<Tensor>& parts);

/** Per-sample matmul: [s, A, K] @ [s, K, B] -> [s, A, B]. */
Tensor bmm(const Tensor& a, const Tensor& b);
/** Per-sample matmul with transposed right factor: [s, A, K] @ [s, B, K]^T. */
Tensor bmm_nt(const Tensor& a, const Tensor& b);

/** Mean over the last axis: [s, C, L] -> [s, C]. */
Tensor mean_lastdim(const Tensor& x);
/** Statistics broadcast over the last axis of [s, C, L]; t is [s, C]. */
Tensor sub_stat(const Tensor& x, const Tensor& t);
Tensor div_stat(const Tensor& x, const Tensor& t);
Tensor mul_stat(const Tensor& x, const Tensor& t);
Tensor add_stat(const Tensor& x, const Tensor& t);
/** Elementwise sqrt(x + eps). */
Tensor sqrt_eps(const Tensor& x, double eps);

/** y = gamma_c * x + beta_c on [s, C, L] with per-channel vectors. */
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
/** y = (x - beta_c) / gamma_c; rejects any zero gamma. */
Tensor channel_unaffine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

}  // namespace mmctp
