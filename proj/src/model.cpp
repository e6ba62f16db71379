#include "mmctp/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mmctp {

namespace {

void expect_shape(const char* stage, const Tensor& t, const Shape& want) {
    if (t.shape() != want) {
        throw std::runtime_error(std::string("forward: ") + stage +
                                 " produced shape " + shape_str(t.shape()) +
                                 ", expected " + shape_str(want));
    }
}

}  // namespace

Variant variant_from_string(const std::string& name) {
    if (name == "full") return Variant::full;
    if (name == "no-mlp") return Variant::no_mlp;
    if (name == "no-mscnn") return Variant::no_mscnn;
    if (name == "no-ca") return Variant::no_ca;
    if (name == "fixed-kernel-5") return Variant::fixed_kernel_5;
    if (name == "swapped-ca") return Variant::swapped_ca;
    throw std::invalid_argument("unknown variant: " + name);
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_mlp: return "no-mlp";
        case Variant::no_mscnn: return "no-mscnn";
        case Variant::no_ca: return "no-ca";
        case Variant::fixed_kernel_5: return "fixed-kernel-5";
        case Variant::swapped_ca: return "swapped-ca";
    }
    throw std::invalid_argument("unknown variant value");
}

void ModelConfig::validate() const {
    if (variables == 0) throw std::invalid_argument("config: variables must be >= 1");
    if (input_steps < 2) {
        throw std::invalid_argument(
            "config: input_steps must be >= 2 (instance normalization needs a "
            "temporal variance)");
    }
    if (pred_steps == 0) throw std::invalid_argument("config: pred_steps must be >= 1");
    if (prior_len == 0 || prior_len > input_steps) {
        throw std::invalid_argument(
            "config: prior_len must be in [1, input_steps]");
    }
    if (heads == 0) throw std::invalid_argument("config: heads must be >= 1");
    if (width == 0 || width % 2 != 0) {
        throw std::invalid_argument(
            "config: width must be positive and even (sine/cosine pairs)");
    }
    if (width % heads != 0) {
        throw std::invalid_argument("config: width must be divisible by heads");
    }
    if (mlp_hidden == 0) throw std::invalid_argument("config: mlp_hidden must be >= 1");
    if (mlp_blocks == 0) throw std::invalid_argument("config: mlp_blocks must be >= 1");
    if (conv_blocks == 0) {
        throw std::invalid_argument("config: conv_blocks must be >= 1");
    }
    if (kernels.empty()) {
        throw std::invalid_argument("config: at least one kernel size required");
    }
    for (std::size_t k : kernels) {
        if (k == 0 || k % 2 == 0) {
            throw std::invalid_argument(
                "config: kernel sizes must be odd (length-preserving padding), got " +
                std::to_string(k));
        }
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw std::invalid_argument("config: dropout must be in [0, 1)");
    }
    if (!(revin_eps > 0.0)) {
        throw std::invalid_argument("config: revin_eps must be positive");
    }
}

Tensor positional_embedding(std::size_t length, std::size_t width) {
    if (width % 2 != 0) {
        throw std::invalid_argument("positional_embedding: width must be even");
    }
    Tensor t = Tensor::zeros({length, width});
    std::vector<double>& v = t.mutable_val();
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t k = 0; k + 1 < width; k += 2) {
            const double freq =
                std::pow(10000.0, static_cast<double>(k) / static_cast<double>(width));
            const double arg = static_cast<double>(pos) / freq;
            v[pos * width + k] = std::sin(arg);
            v[pos * width + k + 1] = std::cos(arg);
        }
    }
    return t;
}

Tensor Model::init_weight(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::uniform(shape, -bound, bound, rng);
    t.set_requires_grad(true);
    return t;
}

Tensor Model::init_bias(std::size_t size) {
    Tensor t = Tensor::zeros({size});
    t.set_requires_grad(true);
    return t;
}

void Model::register_param(const Tensor& t) { params_.push_back(t); }

void Model::register_embedding(Embedding& e) {
    register_param(e.value_w);
    register_param(e.value_b);
    register_param(e.temporal_w);
    register_param(e.temporal_b);
    register_param(e.post_w);
    register_param(e.post_b);
}

Model::Embedding Model::make_embedding(std::size_t length, std::size_t out, Rng& rng) {
    Embedding e;
    e.value_w = init_weight({cfg_.variables, cfg_.width}, cfg_.variables, rng);
    e.value_b = init_bias(cfg_.width);
    e.temporal_w = init_weight({kTimeFeatures, cfg_.width}, kTimeFeatures, rng);
    e.temporal_b = init_bias(cfg_.width);
    e.post_w = init_weight({cfg_.width, out}, cfg_.width, rng);
    e.post_b = init_bias(out);
    e.table = positional_embedding(length, cfg_.width);
    return e;
}

Model::Model(const ModelConfig& config, Rng& rng) : cfg_(config) {
    cfg_.validate();
    if (cfg_.variant == Variant::fixed_kernel_5) cfg_.kernels = {5};

    const std::size_t c = cfg_.variables;
    const std::size_t d = cfg_.width;
    const std::size_t m = cfg_.input_steps;
    const std::size_t n = cfg_.pred_steps;
    const std::size_t local_len = cfg_.prior_len + n;

    revin_gamma_ = Tensor::full({c}, 1.0);
    revin_gamma_.set_requires_grad(true);
    revin_beta_ = init_bias(c);
    register_param(revin_gamma_);
    register_param(revin_beta_);

    if (cfg_.variant != Variant::no_mlp) {
        global_embed_ = make_embedding(m, c, rng);
        register_embedding(*global_embed_);
        mlp_blocks_.reserve(cfg_.mlp_blocks);
        for (std::size_t i = 0; i < cfg_.mlp_blocks; ++i) {
            MlpBlock blk(c);
            blk.w1 = init_weight({m, cfg_.mlp_hidden}, m, rng);
            blk.b1 = init_bias(cfg_.mlp_hidden);
            blk.w2 = init_weight({cfg_.mlp_hidden, m}, cfg_.mlp_hidden, rng);
            blk.b2 = init_bias(m);
            register_param(blk.bn.gamma);
            register_param(blk.bn.beta);
            register_param(blk.w1);
            register_param(blk.b1);
            register_param(blk.w2);
            register_param(blk.b2);
            mlp_blocks_.push_back(std::move(blk));
        }
        bridge_w_ = init_weight({m, d}, m, rng);
        bridge_b_ = init_bias(d);
        register_param(bridge_w_);
        register_param(bridge_b_);
    }

    if (cfg_.variant != Variant::no_mscnn) {
        local_embed_ = make_embedding(local_len, d, rng);
        register_embedding(*local_embed_);
        mscnn_blocks_.reserve(cfg_.conv_blocks);
        for (std::size_t i = 0; i < cfg_.conv_blocks; ++i) {
            MscnnBlock blk(d);
            register_param(blk.bn.gamma);
            register_param(blk.bn.beta);
            for (std::size_t k : cfg_.kernels) {
                ConvStack cs;
                cs.w = init_weight({d, d, k}, d * k, rng);
                cs.b = init_bias(d);
                register_param(cs.w);
                register_param(cs.b);
                blk.convs.push_back(std::move(cs));
            }
            const std::size_t merged_in = cfg_.kernels.size() * d;
            blk.merge_w = init_weight({d, merged_in, 1}, merged_in, rng);
            blk.merge_b = init_bias(d);
            register_param(blk.merge_w);
            register_param(blk.merge_b);
            mscnn_blocks_.push_back(std::move(blk));
        }
    } else {
        local_const_ = init_weight({n, d}, d, rng);
        register_param(local_const_);
    }

    if (cfg_.variant != Variant::no_ca) {
        Attention a;
        a.wq = init_weight({d, d}, d, rng);
        a.wk = init_weight({d, d}, d, rng);
        a.wv = init_weight({d, d}, d, rng);
        register_param(a.wq);
        register_param(a.wk);
        register_param(a.wv);
        const std::size_t dk = cfg_.head_dim();
        for (std::size_t i = 0; i < cfg_.heads; ++i) {
            a.hq.push_back(init_weight({d, dk}, d, rng));
            a.hk.push_back(init_weight({d, dk}, d, rng));
            a.hv.push_back(init_weight({d, dk}, d, rng));
            register_param(a.hq.back());
            register_param(a.hk.back());
            register_param(a.hv.back());
        }
        a.wz = init_weight({d, d}, d, rng);
        register_param(a.wz);
        attn_ = std::move(a);
    }

    if (cfg_.variant == Variant::no_ca) {
        rowmix_w_ = init_weight({n + c, n}, n + c, rng);
        rowmix_b_ = init_bias(n);
        register_param(rowmix_w_);
        register_param(rowmix_b_);
    } else if (cfg_.variant == Variant::swapped_ca) {
        rowmix_w_ = init_weight({c, n}, c, rng);
        rowmix_b_ = init_bias(n);
        register_param(rowmix_w_);
        register_param(rowmix_b_);
    }

    out_w_ = init_weight({d, c}, d, rng);
    out_b_ = init_bias(c);
    register_param(out_w_);
    register_param(out_b_);
}

std::size_t Model::param_count() const {
    std::size_t total = 0;
    for (const Tensor& t : params_) total += t.size();
    return total;
}

std::vector<BatchNormState*> Model::batch_norm_states() {
    std::vector<BatchNormState*> out;
    for (MlpBlock& b : mlp_blocks_) out.push_back(&b.bn);
    for (MscnnBlock& b : mscnn_blocks_) out.push_back(&b.bn);
    return out;
}

Tensor Model::mixer_block(std::size_t index, const Tensor& x, Mode mode) {
    if (index >= mlp_blocks_.size()) {
        throw std::out_of_range("mixer_block: no block " + std::to_string(index));
    }
    return run_mlp_block(mlp_blocks_[index], x, mode);
}

Tensor Model::conv_block(std::size_t index, const Tensor& x, Mode mode) {
    if (index >= mscnn_blocks_.size()) {
        throw std::out_of_range("conv_block: no block " + std::to_string(index));
    }
    return run_mscnn_block(mscnn_blocks_[index], x, mode);
}

Tensor Model::fuse_attention(const Tensor& query_src, const Tensor& kv_src) const {
    if (!attn_) {
        throw std::runtime_error("fuse_attention: variant has no attention weights");
    }
    return run_attention(*attn_, query_src, kv_src);
}

std::pair<Tensor, RevinState> Model::revin_normalize(const Tensor& input) const {
    Tensor xp = permute_last2(input);  // [s, C, m]
    Tensor mu = mean_lastdim(xp);
    Tensor centered = sub_stat(xp, mu);
    Tensor var = mean_lastdim(mul(centered, centered));
    Tensor denom = sqrt_eps(var, cfg_.revin_eps);
    Tensor normed = div_stat(centered, denom);
    Tensor affined = channel_affine(normed, revin_gamma_, revin_beta_);
    return {permute_last2(affined), RevinState{mu, denom}};
}

Tensor Model::revin_denormalize(const Tensor& output, const RevinState& state) const {
    Tensor yp = permute_last2(output);  // [s, C, n]
    Tensor un = channel_unaffine(yp, revin_gamma_, revin_beta_);
    Tensor rescaled = add_stat(mul_stat(un, state.denom), state.mean);
    return permute_last2(rescaled);
}

Tensor Model::run_embedding(const Embedding& e, const Tensor& values,
                            const Tensor& features, Mode mode, Rng& rng) const {
    if (values.dim(1) != features.dim(1)) {
        throw std::runtime_error(
            "forward: embedding value rows and feature rows disagree");
    }
    Tensor ve = linear(values, e.value_w, e.value_b);
    Tensor te = linear(features, e.temporal_w, e.temporal_b);
    Tensor summed = add_table(add(ve, te), e.table);
    summed = dropout(summed, cfg_.dropout, mode, rng);
    return linear(summed, e.post_w, e.post_b);
}

Tensor Model::run_mlp_block(MlpBlock& blk, const Tensor& x, Mode mode) const {
    Tensor xp = permute_last2(x);  // [s, C, m]
    Tensor bn = batch_norm(xp, blk.bn, mode);
    Tensor h = relu(linear(bn, blk.w1, blk.b1));
    Tensor o = linear(h, blk.w2, blk.b2);
    return add(permute_last2(o), x);
}

Tensor Model::run_mscnn_block(MscnnBlock& blk, const Tensor& x, Mode mode) const {
    Tensor t = permute_last2(x);  // [s, D, L]
    Tensor bn = batch_norm(t, blk.bn, mode);
    std::vector<Tensor> scales;
    scales.reserve(blk.convs.size());
    for (const ConvStack& cs : blk.convs) {
        scales.push_back(tanh_act(conv1d_same(bn, cs.w, cs.b)));
    }
    Tensor cat = scales.size() == 1 ? scales[0] : concat_axis1(scales);
    Tensor merged = conv1d_same(cat, blk.merge_w, blk.merge_b);
    return permute_last2(add(merged, t));  // skip joins the pre-norm input
}

Tensor Model::run_attention(const Attention& a, const Tensor& q_src,
                            const Tensor& kv_src) const {
    Tensor q = linear(q_src, a.wq);
    Tensor k = linear(kv_src, a.wk);
    Tensor v = linear(kv_src, a.wv);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
    std::vector<Tensor> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t i = 0; i < cfg_.heads; ++i) {
        Tensor qi = linear(q, a.hq[i]);
        Tensor ki = linear(k, a.hk[i]);
        Tensor vi = linear(v, a.hv[i]);
        Tensor weights = softmax_lastdim(scale(bmm_nt(qi, ki), inv_scale));
        heads.push_back(bmm(weights, vi));
    }
    Tensor cat = heads.size() == 1 ? heads[0] : concat_lastdim(heads);
    return linear(cat, a.wz);
}

Tensor Model::forward(const Tensor& input, const Tensor& input_time,
                      const Tensor& future_time, Mode mode, Rng& rng,
                      ForwardTrace* trace) {
    const std::size_t m = cfg_.input_steps;
    const std::size_t n = cfg_.pred_steps;
    const std::size_t c = cfg_.variables;
    const std::size_t d = cfg_.width;
    const std::size_t r = cfg_.prior_len;

    if (input.rank() != 3 || input.dim(1) != m || input.dim(2) != c) {
        throw std::invalid_argument(
            "forward: input must be [samples, input_steps, variables], got " +
            shape_str(input.shape()));
    }
    const std::size_t s = input.dim(0);
    if (input_time.shape() != Shape{s, m, kTimeFeatures}) {
        throw std::invalid_argument(
            "forward: input_time must be [samples, input_steps, 6], got " +
            shape_str(input_time.shape()));
    }
    if (future_time.shape() != Shape{s, n, kTimeFeatures}) {
        throw std::invalid_argument(
            "forward: future_time must be [samples, pred_steps, 6], got " +
            shape_str(future_time.shape()));
    }

    auto [xn, rev] = revin_normalize(input);

    Tensor summary;  // [s, C, D]
    Shape global_embedded_shape;
    if (cfg_.variant == Variant::no_mlp) {
        summary = Tensor::zeros({s, c, d});
    } else {
        Tensor xg = run_embedding(*global_embed_, xn, input_time, mode, rng);
        expect_shape("global-embedding", xg, {s, m, c});
        global_embedded_shape = xg.shape();
        for (MlpBlock& blk : mlp_blocks_) {
            xg = run_mlp_block(blk, xg, mode);
            expect_shape("global-mixer", xg, {s, m, c});
        }
        summary = linear(permute_last2(xg), bridge_w_, bridge_b_);
    }
    expect_shape("global-bridge", summary, {s, c, d});

    Tensor local;  // [s, n, D]
    Shape local_embedded_shape;
    if (cfg_.variant == Variant::no_mscnn) {
        local = repeat_batch(local_const_, s);
    } else {
        Tensor recent = slice_axis1(xn, m - r, m);
        Tensor placeholder = Tensor::zeros({s, n, c});
        Tensor lv = concat_axis1({recent, placeholder});
        expect_shape("local-input", lv, {s, r + n, c});
        Tensor lt = concat_axis1({slice_axis1(input_time, m - r, m), future_time});
        Tensor xl = run_embedding(*local_embed_, lv, lt, mode, rng);
        expect_shape("local-embedding", xl, {s, r + n, d});
        local_embedded_shape = xl.shape();
        for (MscnnBlock& blk : mscnn_blocks_) {
            xl = run_mscnn_block(blk, xl, mode);
            expect_shape("local-conv", xl, {s, r + n, d});
        }
        local = slice_axis1(xl, r, r + n);
    }
    expect_shape("local-summary", local, {s, n, d});

    Tensor fused;
    switch (cfg_.variant) {
        case Variant::no_ca: {
            Tensor cat = concat_axis1({local, summary});  // [s, n+C, D]
            Tensor mixed = linear(permute_last2(cat), rowmix_w_, rowmix_b_);
            fused = permute_last2(mixed);
            break;
        }
        case Variant::swapped_ca: {
            Tensor att = run_attention(*attn_, summary, local);  // [s, C, D]
            expect_shape("fusion-attention", att, {s, c, d});
            Tensor mixed = linear(permute_last2(att), rowmix_w_, rowmix_b_);
            fused = permute_last2(mixed);
            break;
        }
        default:
            fused = run_attention(*attn_, local, summary);
            break;
    }
    fused = dropout(fused, cfg_.dropout, mode, rng);
    expect_shape("fusion", fused, {s, n, d});

    Tensor projected = linear(fused, out_w_, out_b_);
    expect_shape("output-projection", projected, {s, n, c});
    Tensor out = revin_denormalize(projected, rev);
    expect_shape("denormalization", out, {s, n, c});

    if (trace) {
        trace->global_embedded = global_embedded_shape;
        trace->global_summary = summary.shape();
        trace->local_embedded = local_embedded_shape;
        trace->local_summary = local.shape();
        trace->fused = fused.shape();
        trace->output = out.shape();
    }
    return out;
}

}  // namespace mmctp
