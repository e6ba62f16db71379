#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmctp/grad_check.hpp"
#include "mmctp/model.hpp"
#include "mmctp/ops.hpp"
#include "mmctp/rng.hpp"
#include "mmctp/tensor.hpp"

using namespace mmctp;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.input_steps = 8;
    c.pred_steps = 2;
    c.prior_len = 4;
    c.width = 8;
    c.mlp_hidden = 16;
    c.heads = 2;
    return c;  // variables 3, 1 mixer block, 2 conv blocks, kernels {3,5,7}
}

struct Batch {
    Tensor input, input_time, future_time;
};

Batch make_batch(const ModelConfig& cfg, std::size_t s, Rng& rng) {
    const double offsets[3] = {120.0, 30.0, -50.0};
    Batch b;
    b.input = Tensor::zeros({s, cfg.input_steps, cfg.variables});
    auto& v = b.input.mutable_val();
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t t = 0; t < cfg.input_steps; ++t) {
            for (std::size_t c = 0; c < cfg.variables; ++c) {
                v[(i * cfg.input_steps + t) * cfg.variables + c] =
                    offsets[c % 3] + rng.uniform(-2.0, 2.0);
            }
        }
    }
    b.input_time =
        Tensor::uniform({s, cfg.input_steps, kTimeFeatures}, -0.5, 0.5, rng);
    b.future_time =
        Tensor::uniform({s, cfg.pred_steps, kTimeFeatures}, -0.5, 0.5, rng);
    return b;
}

void fill(const Tensor& t, double value) {
    Tensor handle = t;  // shares the node
    auto& v = handle.mutable_val();
    std::fill(v.begin(), v.end(), value);
}

void set_values(const Tensor& t, const std::vector<double>& values) {
    Tensor handle = t;
    REQUIRE(handle.size() == values.size());
    handle.mutable_val() = values;
}

// Parameter layout is the fixed declared order the checkpoint format relies
// on. The helpers below compute block offsets from the config and verify the
// expected shape before any test mutates a tensor.
std::size_t mixer_block0_w1_index() { return 2 + 6 + 2; }  // revin + embedding + bn

std::size_t conv_block0_start(const ModelConfig& cfg) {
    return 2 + 6 + 6 * cfg.mlp_blocks + 2 + 6;  // + bridge + local embedding
}

std::size_t attention_start(const Model& model) {
    return model.params().size() - 2 - (4 + 3 * model.config().heads);
}

}  // namespace

TEST_CASE("parameter count matches the golden value for the default config") {
    Rng rng(1);
    Model model(ModelConfig{}, rng);
    CHECK(model.param_count() == 3105346u);
    CHECK(model.params().size() > 0);

    std::size_t summed = 0;
    for (const Tensor& p : model.params()) {
        summed += p.size();
        CHECK(p.requires_grad());
    }
    CHECK(summed == model.param_count());
}

TEST_CASE("forward reports the documented stage shapes on the default config") {
    Rng rng(2);
    Model model(ModelConfig{}, rng);
    Batch b = make_batch(model.config(), 2, rng);
    ForwardTrace trace;
    Tensor out = model.forward(b.input, b.input_time, b.future_time, Mode::train,
                               rng, &trace);
    CHECK(trace.global_embedded == Shape{2, 48, 3});
    CHECK(trace.global_summary == Shape{2, 3, 256});
    CHECK(trace.local_embedded == Shape{2, 36, 256});
    CHECK(trace.local_summary == Shape{2, 12, 256});
    CHECK(trace.fused == Shape{2, 12, 256});
    CHECK(trace.output == Shape{2, 12, 3});
    CHECK(out.shape() == Shape{2, 12, 3});
    for (double v : out.val()) CHECK(std::isfinite(v));
}

TEST_CASE("positional embedding hand values") {
    Tensor pe = positional_embedding(4, 6);
    REQUIRE(pe.shape() == Shape{4, 6});
    for (std::size_t k = 0; k < 6; k += 2) {
        CHECK(pe.at({0, k}) == 0.0);
        CHECK(pe.at({0, k + 1}) == 1.0);
    }
    CHECK(pe.at({1, 0}) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    CHECK(pe.at({1, 1}) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(pe.at({2, 2}) ==
          doctest::Approx(std::sin(2.0 / std::pow(10000.0, 2.0 / 6.0))).epsilon(1e-12));
    for (double v : pe.val()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(positional_embedding(4, 5), std::invalid_argument);
}

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig ok;
    CHECK_NOTHROW(ok.validate());

    ModelConfig c = ok;
    c.heads = 7;  // 256 % 7 != 0
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.kernels = {3, 4};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.prior_len = c.input_steps + 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.pred_steps = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.input_steps = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ok;
    c.kernels = {};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("variant names round-trip and bad names are rejected") {
    for (Variant v : {Variant::full, Variant::no_mlp, Variant::no_mscnn,
                      Variant::no_ca, Variant::fixed_kernel_5, Variant::swapped_ca}) {
        CHECK(variant_from_string(variant_name(v)) == v);
    }
    CHECK_THROWS_AS(variant_from_string("no_mscnn"), std::invalid_argument);
    CHECK_THROWS_AS(variant_from_string(""), std::invalid_argument);
}

TEST_CASE("initialization is deterministic in the seed") {
    ModelConfig cfg = tiny_config();
    Rng r1(7), r2(7), r3(8);
    Model a(cfg, r1), b(cfg, r2), c(cfg, r3);
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].val() == b.params()[i].val());
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        if (a.params()[i].val() != c.params()[i].val()) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("mixer block reduces to the skip with zero inner weights") {
    ModelConfig cfg = tiny_config();
    Rng rng(11);
    Model model(cfg, rng);
    const std::size_t w1 = mixer_block0_w1_index();
    REQUIRE(model.params()[w1].shape() == Shape{cfg.input_steps, cfg.mlp_hidden});
    for (std::size_t i = w1; i < w1 + 4; ++i) fill(model.params()[i], 0.0);

    Tensor x = Tensor::uniform({3, cfg.input_steps, cfg.variables}, -2.0, 2.0, rng);
    Tensor y = model.mixer_block(0, x, Mode::train);
    CHECK(y.val() == x.val());
    CHECK_THROWS_AS(model.mixer_block(5, x, Mode::train), std::out_of_range);
}

TEST_CASE("conv block reduces to the identity with zero conv weights") {
    ModelConfig cfg = tiny_config();
    Rng rng(12);
    Model model(cfg, rng);
    const std::size_t start = conv_block0_start(cfg);
    const std::size_t g = cfg.kernels.size();
    REQUIRE(model.params()[start + 2].shape() ==
            Shape{cfg.width, cfg.width, cfg.kernels[0]});
    // Zero every conv weight/bias and the merge conv, keep batch-norm affine.
    for (std::size_t i = start + 2; i < start + 2 + 2 * g + 2; ++i) {
        fill(model.params()[i], 0.0);
    }
    const std::size_t rows = cfg.prior_len + cfg.pred_steps;
    Tensor x = Tensor::uniform({2, rows, cfg.width}, -2.0, 2.0, rng);
    Tensor y = model.conv_block(0, x, Mode::train);
    CHECK(y.val() == x.val());
}

TEST_CASE("cross-attention over a single key position ignores the query") {
    ModelConfig cfg = tiny_config();
    Rng rng(13);
    Model model(cfg, rng);
    Tensor kv = Tensor::uniform({2, 1, cfg.width}, -1.0, 1.0, rng);
    Tensor qa = Tensor::uniform({2, 5, cfg.width}, -1.0, 1.0, rng);
    Tensor qb = Tensor::uniform({2, 5, cfg.width}, -1.0, 1.0, rng);
    Tensor ya = model.fuse_attention(qa, kv);
    Tensor yb = model.fuse_attention(qb, kv);
    CHECK(ya.shape() == Shape{2, 5, cfg.width});
    CHECK(ya.val() == yb.val());
}

TEST_CASE("single-head attention matches a hand-computed softmax mixture") {
    ModelConfig cfg;
    cfg.input_steps = 4;
    cfg.pred_steps = 1;
    cfg.prior_len = 2;
    cfg.variables = 2;
    cfg.width = 2;
    cfg.mlp_hidden = 4;
    cfg.heads = 1;
    cfg.mlp_blocks = 1;
    cfg.conv_blocks = 1;
    cfg.kernels = {3};
    Rng rng(14);
    Model model(cfg, rng);

    const std::size_t a0 = attention_start(model);
    REQUIRE(model.params()[a0].shape() == Shape{2, 2});  // W_Q
    const std::vector<double> eye = {1.0, 0.0, 0.0, 1.0};
    for (std::size_t i = a0; i < a0 + 7; ++i) set_values(model.params()[i], eye);

    Tensor q = Tensor::zeros({1, 1, 2});
    set_values(q, {1.0, 0.0});
    Tensor kv = Tensor::zeros({1, 2, 2});
    set_values(kv, {1.0, 0.0, 0.0, 1.0});

    Tensor y = model.fuse_attention(q, kv);
    REQUIRE(y.shape() == Shape{1, 1, 2});
    const double a = 1.0 / std::sqrt(2.0);  // score of the aligned key
    const double w1 = std::exp(a) / (std::exp(a) + 1.0);
    CHECK(y.at({0, 0, 0}) == doctest::Approx(w1).epsilon(1e-12));
    CHECK(y.at({0, 0, 1}) == doctest::Approx(1.0 - w1).epsilon(1e-12));
}

TEST_CASE("instance normalization round-trips through denormalization") {
    ModelConfig cfg = tiny_config();
    Rng rng(15);
    Model model(cfg, rng);
    set_values(model.params()[0], {1.3, 0.7, 2.1});    // gamma
    set_values(model.params()[1], {0.2, -0.4, 0.1});   // beta

    Batch b = make_batch(cfg, 4, rng);
    auto [xn, st] = model.revin_normalize(b.input);
    Tensor back = model.revin_denormalize(xn, st);
    REQUIRE(back.shape() == b.input.shape());
    double max_err = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) {
        max_err = std::max(max_err, std::abs(back.val()[i] - b.input.val()[i]));
    }
    CHECK(max_err < 1e-9);
}

TEST_CASE("a time-constant variable normalizes to exactly beta") {
    ModelConfig cfg = tiny_config();
    Rng rng(16);
    Model model(cfg, rng);
    set_values(model.params()[1], {0.25, -0.5, 0.75});  // beta

    Batch b = make_batch(cfg, 2, rng);
    auto& v = b.input.mutable_val();
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t t = 0; t < cfg.input_steps; ++t) {
            v[(i * cfg.input_steps + t) * cfg.variables + 1] = 42.0;
        }
    }
    auto [xn, st] = model.revin_normalize(b.input);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t t = 0; t < cfg.input_steps; ++t) {
            CHECK(xn.at({i, t, 1}) == -0.5);  // gamma*0 + beta, exact
        }
    }
}

TEST_CASE("all-zero weights predict the input-window mean") {
    ModelConfig cfg = tiny_config();
    Rng rng(17);
    Model model(cfg, rng);
    // Zero everything except the instance-norm scale (params[0], kept at 1).
    for (std::size_t i = 1; i < model.params().size(); ++i) {
        fill(model.params()[i], 0.0);
    }
    Batch b = make_batch(cfg, 3, rng);
    model.forward(b.input, b.input_time, b.future_time, Mode::train, rng);  // BN warmup
    Tensor out = model.forward(b.input, b.input_time, b.future_time, Mode::eval, rng);

    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t c = 0; c < cfg.variables; ++c) {
            double mean = 0.0;
            for (std::size_t t = 0; t < cfg.input_steps; ++t) {
                mean += b.input.at({i, t, c});
            }
            mean /= static_cast<double>(cfg.input_steps);
            for (std::size_t j = 0; j < cfg.pred_steps; ++j) {
                CHECK(out.at({i, j, c}) == doctest::Approx(mean).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("predictions shift with a constant added to one variable") {
    ModelConfig cfg = tiny_config();
    Rng rng(18);
    Model model(cfg, rng);
    Batch b = make_batch(cfg, 2, rng);
    model.forward(b.input, b.input_time, b.future_time, Mode::train, rng);  // BN warmup

    Tensor y1 = model.forward(b.input, b.input_time, b.future_time, Mode::eval, rng);
    const double c = 7.5;
    Tensor shifted = Tensor::zeros(b.input.shape());
    shifted.mutable_val() = b.input.val();
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t t = 0; t < cfg.input_steps; ++t) {
            shifted.mutable_val()[(i * cfg.input_steps + t) * cfg.variables + 1] += c;
        }
    }
    Tensor y2 = model.forward(shifted, b.input_time, b.future_time, Mode::eval, rng);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < cfg.pred_steps; ++j) {
            CHECK(y2.at({i, j, 1}) - y1.at({i, j, 1}) == doctest::Approx(c).epsilon(1e-9));
            CHECK(y2.at({i, j, 0}) == doctest::Approx(y1.at({i, j, 0})).epsilon(1e-9));
            CHECK(y2.at({i, j, 2}) == doctest::Approx(y1.at({i, j, 2})).epsilon(1e-9));
        }
    }
}

TEST_CASE("eval-mode forward is bit-identical across calls") {
    ModelConfig cfg = tiny_config();
    Rng rng(19);
    Model model(cfg, rng);
    Batch b = make_batch(cfg, 2, rng);
    model.forward(b.input, b.input_time, b.future_time, Mode::train, rng);
    Tensor y1 = model.forward(b.input, b.input_time, b.future_time, Mode::eval, rng);
    Tensor y2 = model.forward(b.input, b.input_time, b.future_time, Mode::eval, rng);
    CHECK(y1.val() == y2.val());
}

TEST_CASE("full tiny model passes a sampled finite-difference gradient check") {
    ModelConfig cfg = tiny_config();
    Rng rng(20);
    Model model(cfg, rng);
    Batch b = make_batch(cfg, 2, rng);
    model.forward(b.input, b.input_time, b.future_time, Mode::train, rng);  // BN warmup

    std::vector<Tensor> params = model.params();
    auto f = [&](const std::vector<Tensor>&) {
        Rng unused(0);
        Tensor out =
            model.forward(b.input, b.input_time, b.future_time, Mode::eval, unused);
        return sum_all(square(out));
    };
    GradCheckResult r = grad_check(f, params, 1e-3, 3);
    INFO("max rel err ", r.max_rel_err, " at input ", r.worst_input, " coord ",
         r.worst_coord, " analytic ", r.worst_analytic, " numeric ", r.worst_numeric);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("every variant keeps the output contract and trains end to end") {
    ModelConfig base = tiny_config();
    Rng data_rng(21);
    Batch b = make_batch(base, 2, data_rng);

    Rng full_rng(22);
    Model full(base, full_rng);
    const std::size_t full_count = full.param_count();

    for (Variant v : {Variant::full, Variant::no_mlp, Variant::no_mscnn,
                      Variant::no_ca, Variant::fixed_kernel_5, Variant::swapped_ca}) {
        CAPTURE(variant_name(v));
        ModelConfig cfg = base;
        cfg.variant = v;
        Rng rng(22);
        Model model(cfg, rng);
        Tensor out =
            model.forward(b.input, b.input_time, b.future_time, Mode::train, rng);
        REQUIRE(out.shape() == Shape{2, base.pred_steps, base.variables});
        for (double x : out.val()) CHECK(std::isfinite(x));

        Tensor loss = sum_all(square(out));
        loss.backward();
        for (const Tensor& p : model.params()) {
            CHECK(p.has_grad());
            for (double gv : p.grad()) CHECK(std::isfinite(gv));
        }

        if (v == Variant::no_mscnn) CHECK(model.param_count() < full_count);
        if (v == Variant::fixed_kernel_5) {
            CHECK(model.config().kernels == std::vector<std::size_t>{5});
        }
    }
}

TEST_CASE("forward rejects malformed inputs") {
    ModelConfig cfg = tiny_config();
    Rng rng(23);
    Model model(cfg, rng);
    Batch b = make_batch(cfg, 2, rng);
    Tensor bad_time = Tensor::zeros({2, cfg.input_steps + 1, kTimeFeatures});
    CHECK_THROWS_AS(
        model.forward(b.input, bad_time, b.future_time, Mode::train, rng),
        std::invalid_argument);
    Tensor bad_input = Tensor::zeros({2, cfg.input_steps, 2});
    CHECK_THROWS_AS(
        model.forward(bad_input, b.input_time, b.future_time, Mode::train, rng),
        std::invalid_argument);
}
