#include "mmctp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "mmctp/gemm.hpp"
#include "mmctp/rng.hpp"

namespace mmctp {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": " + arg + " must have rank " +
                                    std::to_string(rank) + ", got shape " +
                                    shape_str(t.shape()));
    }
}

// Interprets x as [s, A, B], folding a rank-2 tensor into a single sample.
struct Batched3 {
    std::size_t s, a, b;
    bool had_batch;
};

Batched3 as_batched3(const Tensor& x, const char* op) {
    if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2), true};
    if (x.rank() == 2) return {1, x.dim(0), x.dim(1), false};
    throw std::invalid_argument(std::string(op) + ": expected rank 2 or 3, got shape " +
                                shape_str(x.shape()));
}

void check_stat_shapes(const Tensor& x, const Tensor& t, const char* op) {
    require_rank(x, 3, op, "x");
    require_rank(t, 2, op, "stats");
    if (t.dim(0) != x.dim(0) || t.dim(1) != x.dim(1)) {
        throw std::invalid_argument(std::string(op) + ": stats shape " +
                                    shape_str(t.shape()) + " does not match x " +
                                    shape_str(x.shape()));
    }
}

void check_channel_shapes(const Tensor& x, const Tensor& g, const Tensor& b,
                          const char* op) {
    require_rank(x, 3, op, "x");
    require_rank(g, 1, op, "gamma");
    require_rank(b, 1, op, "beta");
    if (g.dim(0) != x.dim(1) || b.dim(0) != x.dim(1)) {
        throw std::invalid_argument(std::string(op) + ": channel vectors must have size " +
                                    std::to_string(x.dim(1)));
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul", "a");
    require_rank(b, 2, "matmul", "b");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()) + " do not match");
    std::vector<double> out(m * n);
    gemm(false, false, m, n, k, 1.0, a.val().data(), k, b.val().data(), n, 0.0,
         out.data(), n);
    return make_node({m, n}, std::move(out), {a, b}, [m, n, k](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double* g = self.grad.data();
        if (pa.requires_grad) {
            gemm(false, true, m, k, n, 1.0, g, n, pb.val.data(), n, 1.0,
                 pa.ensure_grad().data(), k);
        }
        if (pb.requires_grad) {
            gemm(true, false, k, n, m, 1.0, pa.val.data(), k, g, n, 1.0,
                 pb.ensure_grad().data(), n);
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w) {
    require_rank(w, 2, "linear", "w");
    require(x.rank() >= 1, "linear: x must have rank >= 1");
    const std::size_t k = w.dim(0), n = w.dim(1);
    require(x.shape().back() == k, "linear: last axis of x " + shape_str(x.shape()) +
                                       " does not match weight " + shape_str(w.shape()));
    const std::size_t rows = x.size() / k;
    std::vector<double> out(rows * n);
    gemm(false, false, rows, n, k, 1.0, x.val().data(), k, w.val().data(), n, 0.0,
         out.data(), n);
    Shape out_shape = x.shape();
    out_shape.back() = n;
    return make_node(std::move(out_shape), std::move(out), {x, w},
                     [rows, n, k](detail::Node& self) {
                         auto& px = *self.parents[0];
                         auto& pw = *self.parents[1];
                         const double* g = self.grad.data();
                         if (px.requires_grad) {
                             gemm(false, true, rows, k, n, 1.0, g, n, pw.val.data(), n,
                                  1.0, px.ensure_grad().data(), k);
                         }
                         if (pw.requires_grad) {
                             gemm(true, false, k, n, rows, 1.0, px.val.data(), k, g, n,
                                  1.0, pw.ensure_grad().data(), n);
                         }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(b, 1, "linear", "b");
    require(b.dim(0) == w.dim(1), "linear: bias size does not match weight columns");
    Tensor y = linear(x, w);
    const std::size_t n = b.dim(0);
    const std::size_t rows = y.size() / n;
    std::vector<double> out = y.val();
    const double* bv = b.val().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
    }
    return make_node(y.shape(), std::move(out), {y, b}, [rows, n](detail::Node& self) {
        auto& py = *self.parents[0];
        auto& pb = *self.parents[1];
        const double* g = self.grad.data();
        if (py.requires_grad) {
            auto& gy = py.ensure_grad();
            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = g + r * n;
                for (std::size_t j = 0; j < n; ++j) gb[j] += row[j];
            }
        }
    });
}

namespace {

// Shifted-copy im2col: row (c*width + t) of col holds x[i, c, l + t - pad]
// laid out over columns (i*L + l), with out-of-range reads as zero.
void build_col(const double* x, std::size_t s, std::size_t cin, std::size_t len,
               std::size_t width, std::vector<double>& col) {
    const std::size_t pad = (width - 1) / 2;
    const std::size_t cols = s * len;
    col.assign(cin * width * cols, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t c = 0; c < cin; ++c) {
            const double* xrow = x + (i * cin + c) * len;
            for (std::size_t t = 0; t < width; ++t) {
                const long off = static_cast<long>(t) - static_cast<long>(pad);
                const std::size_t l0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
                const std::size_t l1 = off > 0 ? len - static_cast<std::size_t>(off) : len;
                if (l1 <= l0) continue;
                double* dst = col.data() + (c * width + t) * cols + i * len;
                std::memcpy(dst + l0, xrow + l0 + off, (l1 - l0) * sizeof(double));
            }
        }
    }
}

}  // namespace

Tensor conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b) {
    Batched3 bx = as_batched3(x, "conv1d_same");
    require_rank(w, 3, "conv1d_same", "w");
    require_rank(b, 1, "conv1d_same", "b");
    const std::size_t s = bx.s, cin = bx.a, len = bx.b;
    const std::size_t cout = w.dim(0), width = w.dim(2);
    require(w.dim(1) == cin, "conv1d_same: kernel input channels " +
                                 shape_str(w.shape()) + " do not match x " +
                                 shape_str(x.shape()));
    require(width % 2 == 1, "conv1d_same: kernel width must be odd for same padding");
    require(b.dim(0) == cout, "conv1d_same: bias size does not match output channels");

    const std::size_t kdim = cin * width;
    const std::size_t cols = s * len;
    thread_local std::vector<double> col, flat;
    build_col(x.val().data(), s, cin, len, width, col);
    flat.resize(cout * cols);
    gemm(false, false, cout, cols, kdim, 1.0, w.val().data(), kdim, col.data(), cols,
         0.0, flat.data(), cols);

    std::vector<double> out(s * cout * len);
    const double* bv = b.val().data();
    for (std::size_t co = 0; co < cout; ++co) {
        const double* src = flat.data() + co * cols;
        for (std::size_t i = 0; i < s; ++i) {
            double* dst = out.data() + (i * cout + co) * len;
            const double* seg = src + i * len;
            for (std::size_t l = 0; l < len; ++l) dst[l] = seg[l] + bv[co];
        }
    }
    Shape out_shape = bx.had_batch ? Shape{s, cout, len} : Shape{cout, len};

    return make_node(
        std::move(out_shape), std::move(out), {x, w, b},
        [s, cin, len, cout, width, kdim, cols](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            thread_local std::vector<double> gflat, gcol, col2;
            // [s, cout, L] -> [cout, s*L]
            gflat.resize(cout * cols);
            for (std::size_t co = 0; co < cout; ++co) {
                double* dst = gflat.data() + co * cols;
                for (std::size_t i = 0; i < s; ++i) {
                    const double* src = self.grad.data() + (i * cout + co) * len;
                    std::memcpy(dst + i * len, src, len * sizeof(double));
                }
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* row = gflat.data() + co * cols;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) acc += row[j];
                    gb[co] += acc;
                }
            }
            if (pw.requires_grad) {
                // The col matrix is rebuilt rather than saved; it is the one
                // large intermediate and recomputing keeps graph memory flat.
                build_col(px.val.data(), s, cin, len, width, col2);
                gemm(false, true, cout, kdim, cols, 1.0, gflat.data(), cols, col2.data(),
                     cols, 1.0, pw.ensure_grad().data(), kdim);
            }
            if (px.requires_grad) {
                gcol.resize(kdim * cols);
                gemm(true, false, kdim, cols, cout, 1.0, pw.val.data(), kdim,
                     gflat.data(), cols, 0.0, gcol.data(), cols);
                auto& gx = px.ensure_grad();
                const std::size_t pad = (width - 1) / 2;
                for (std::size_t i = 0; i < s; ++i) {
                    for (std::size_t c = 0; c < cin; ++c) {
                        double* dst = gx.data() + (i * cin + c) * len;
                        for (std::size_t t = 0; t < width; ++t) {
                            const long off = static_cast<long>(t) - static_cast<long>(pad);
                            const std::size_t l0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
                            const std::size_t l1 =
                                off > 0 ? len - static_cast<std::size_t>(off) : len;
                            if (l1 <= l0) continue;
                            const double* src =
                                gcol.data() + (c * width + t) * cols + i * len;
                            for (std::size_t l = l0; l < l1; ++l) {
                                dst[l + off] += src[l];
                            }
                        }
                    }
                }
            }
        });
}

BatchNormState::BatchNormState(std::size_t channels, double eps_, double momentum_)
    : gamma(Tensor::full({channels}, 1.0)),
      beta(Tensor::zeros({channels})),
      running_mean(channels, 0.0),
      running_var(channels, 1.0),
      eps(eps_),
      momentum(momentum_) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode) {
    require_rank(x, 3, "batch_norm", "x");
    const std::size_t s = x.dim(0), c = x.dim(1), len = x.dim(2);
    require(state.gamma.dim(0) == c, "batch_norm: state has " +
                                         std::to_string(state.gamma.dim(0)) +
                                         " channels, x has " + std::to_string(c));
    const std::size_t n = s * len;
    const double eps = state.eps;
    const double* xv = x.val().data();

    std::vector<double> mean(c, 0.0), inv(c, 0.0);
    if (mode == Mode::train) {
        require(n >= 2, "batch_norm: train mode needs at least 2 values per channel");
        std::vector<double> var(c, 0.0);
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* row = xv + (i * c + ch) * len;
                double acc = 0.0;
                for (std::size_t l = 0; l < len; ++l) acc += row[l];
                mean[ch] += acc;
            }
        }
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(n);
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* row = xv + (i * c + ch) * len;
                double acc = 0.0;
                for (std::size_t l = 0; l < len; ++l) {
                    const double d = row[l] - mean[ch];
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            var[ch] /= static_cast<double>(n);
            inv[ch] = 1.0 / std::sqrt(var[ch] + eps);
        }
        const double m = state.momentum;
        for (std::size_t ch = 0; ch < c; ++ch) {
            if (state.initialized) {
                state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch];
            } else {
                state.running_mean[ch] = mean[ch];
                state.running_var[ch] = var[ch];
            }
        }
        state.initialized = true;
    } else {
        if (!state.initialized) {
            throw std::runtime_error(
                "batch_norm: eval mode before any train-mode statistics update");
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = state.running_mean[ch];
            inv[ch] = 1.0 / std::sqrt(state.running_var[ch] + eps);
        }
    }

    const double* gv = state.gamma.val().data();
    const double* bv = state.beta.val().data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* row = xv + (i * c + ch) * len;
            double* orow = out.data() + (i * c + ch) * len;
            const double mu = mean[ch], iv = inv[ch], ga = gv[ch], be = bv[ch];
            for (std::size_t l = 0; l < len; ++l) {
                orow[l] = ga * (row[l] - mu) * iv + be;
            }
        }
    }

    const bool train = mode == Mode::train;
    return make_node(
        x.shape(), std::move(out), {x, state.gamma, state.beta},
        [s, c, len, n, mean = std::move(mean), inv = std::move(inv),
         train](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const double* g = self.grad.data();
            const double* xv = px.val.data();
            const double* gv = pg.val.data();
            std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double* grow = g + (i * c + ch) * len;
                    const double* xrow = xv + (i * c + ch) * len;
                    const double mu = mean[ch], iv = inv[ch];
                    double a = 0.0, bacc = 0.0;
                    for (std::size_t l = 0; l < len; ++l) {
                        a += grow[l];
                        bacc += grow[l] * (xrow[l] - mu) * iv;
                    }
                    sum_dy[ch] += a;
                    sum_dy_xhat[ch] += bacc;
                }
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
            }
            if (pg.requires_grad) {
                auto& gg = pg.ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
            }
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                const double dn = static_cast<double>(n);
                for (std::size_t i = 0; i < s; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double* grow = g + (i * c + ch) * len;
                        const double* xrow = xv + (i * c + ch) * len;
                        double* gxrow = gx.data() + (i * c + ch) * len;
                        const double mu = mean[ch], iv = inv[ch], ga = gv[ch];
                        const double mdy = sum_dy[ch] / dn;
                        const double mdyx = sum_dy_xhat[ch] / dn;
                        if (train) {
                            for (std::size_t l = 0; l < len; ++l) {
                                const double xhat = (xrow[l] - mu) * iv;
                                gxrow[l] += ga * iv * (grow[l] - mdy - xhat * mdyx);
                            }
                        } else {
                            for (std::size_t l = 0; l < len; ++l) {
                                gxrow[l] += ga * iv * grow[l];
                            }
                        }
                    }
                }
            }
        });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto& v = x.val();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return make_node(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        const double* xv = px.val.data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (xv[i] > 0.0) gx[i] += g[i];
        }
    });
}

Tensor tanh_act(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto& v = x.val();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(v[i]);
    return make_node(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.val.data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += g[i] * (1.0 - y[i] * y[i]);
        }
    });
}

Tensor softmax_lastdim(const Tensor& x) {
    require(x.rank() >= 1, "softmax: x must have rank >= 1");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv + r * n;
        double* orow = out.data() + r * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    return make_node(x.shape(), std::move(out), {x}, [rows, n](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.val.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * n;
            const double* yr = y + r * n;
            double* gxr = gx.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.size());
    for (double& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
    std::vector<double> out(x.size());
    const auto& v = x.val();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * mask[i];
    return make_node(x.shape(), std::move(out), {x},
                     [mask = std::move(mask)](detail::Node& self) {
                         auto& px = *self.parents[0];
                         if (!px.requires_grad) return;
                         auto& gx = px.ensure_grad();
                         const double* g = self.grad.data();
                         for (std::size_t i = 0; i < gx.size(); ++i) {
                             gx[i] += g[i] * mask[i];
                         }
                     });
}

Tensor transpose2(const Tensor& x) {
    require_rank(x, 2, "transpose2", "x");
    const std::size_t a = x.dim(0), b = x.dim(1);
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = 0; j < b; ++j) out[j * a + i] = xv[i * b + j];
    }
    return make_node({b, a}, std::move(out), {x}, [a, b](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < a; ++i) {
            for (std::size_t j = 0; j < b; ++j) gx[i * b + j] += g[j * a + i];
        }
    });
}

Tensor permute_last2(const Tensor& x) {
    require_rank(x, 3, "permute_last2", "x");
    const std::size_t s = x.dim(0), a = x.dim(1), b = x.dim(2);
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        const double* xs = xv + i * a * b;
        double* os = out.data() + i * a * b;
        for (std::size_t r = 0; r < a; ++r) {
            for (std::size_t c = 0; c < b; ++c) os[c * a + r] = xs[r * b + c];
        }
    }
    return make_node({s, b, a}, std::move(out), {x}, [s, a, b](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < s; ++i) {
            const double* gs = g + i * a * b;
            double* gxs = gx.data() + i * a * b;
            for (std::size_t r = 0; r < a; ++r) {
                for (std::size_t c = 0; c < b; ++c) gxs[r * b + c] += gs[c * a + r];
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_node(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const double* g = self.grad.data();
        for (int p = 0; p < 2; ++p) {
            auto& pp = *self.parents[p];
            if (!pp.requires_grad) continue;
            auto& gp = pp.ensure_grad();
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_node(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double* g = self.grad.data();
        if (pa.requires_grad) {
            auto& ga = pa.ensure_grad();
            const double* bv = pb.val.data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            const double* av = pa.val.data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto& v = x.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * c;
    return make_node(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * c;
    });
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.val()) acc += v;
    return make_node({}, {acc}, {x}, [](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Tensor add_table(const Tensor& x, const Tensor& table) {
    require_rank(x, 3, "add_table", "x");
    require_rank(table, 2, "add_table", "table");
    const std::size_t s = x.dim(0), l = x.dim(1), d = x.dim(2);
    require(table.dim(0) == l && table.dim(1) == d,
            "add_table: table " + shape_str(table.shape()) + " does not match x " +
                shape_str(x.shape()));
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    const double* tv = table.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        const double* xs = xv + i * l * d;
        double* os = out.data() + i * l * d;
        for (std::size_t j = 0; j < l * d; ++j) os[j] = xs[j] + tv[j];
    }
    return make_node(x.shape(), std::move(out), {x, table}, [s, l, d](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pt = *self.parents[1];
        const double* g = self.grad.data();
        if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        }
        if (pt.requires_grad) {
            auto& gt = pt.ensure_grad();
            for (std::size_t i = 0; i < s; ++i) {
                const double* gs = g + i * l * d;
                for (std::size_t j = 0; j < l * d; ++j) gt[j] += gs[j];
            }
        }
    });
}

Tensor repeat_batch(const Tensor& t, std::size_t s) {
    require_rank(t, 2, "repeat_batch", "t");
    require(s >= 1, "repeat_batch: batch size must be positive");
    const std::size_t a = t.dim(0), b = t.dim(1);
    std::vector<double> out(s * a * b);
    const double* tv = t.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        std::memcpy(out.data() + i * a * b, tv, a * b * sizeof(double));
    }
    return make_node({s, a, b}, std::move(out), {t}, [s, a, b](detail::Node& self) {
        auto& pt = *self.parents[0];
        if (!pt.requires_grad) return;
        auto& gt = pt.ensure_grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < s; ++i) {
            const double* gs = g + i * a * b;
            for (std::size_t j = 0; j < a * b; ++j) gt[j] += gs[j];
        }
    });
}

Tensor slice_axis1(const Tensor& x, std::size_t from, std::size_t to) {
    require_rank(x, 3, "slice_axis1", "x");
    const std::size_t s = x.dim(0), a = x.dim(1), b = x.dim(2);
    require(from < to && to <= a, "slice_axis1: range [" + std::to_string(from) + ", " +
                                      std::to_string(to) + ") invalid for axis size " +
                                      std::to_string(a));
    const std::size_t rows = to - from;
    std::vector<double> out(s * rows * b);
    const double* xv = x.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        std::memcpy(out.data() + i * rows * b, xv + (i * a + from) * b,
                    rows * b * sizeof(double));
    }
    return make_node({s, rows, b}, std::move(out), {x},
                     [s, a, b, from, rows](detail::Node& self) {
                         auto& px = *self.parents[0];
                         if (!px.requires_grad) return;
                         auto& gx = px.ensure_grad();
                         const double* g = self.grad.data();
                         for (std::size_t i = 0; i < s; ++i) {
                             const double* gs = g + i * rows * b;
                             double* gxs = gx.data() + (i * a + from) * b;
                             for (std::size_t j = 0; j < rows * b; ++j) gxs[j] += gs[j];
                         }
                     });
}

Tensor concat_axis1(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_axis1: no parts");
    const std::size_t s = parts[0].dim(0), b = parts[0].dim(2);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank(p, 3, "concat_axis1", "part");
        require(p.dim(0) == s && p.dim(2) == b,
                "concat_axis1: incompatible part shape " + shape_str(p.shape()));
        total += p.dim(1);
    }
    std::vector<double> out(s * total * b);
    std::size_t row0 = 0;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(row0);
        const std::size_t rows = p.dim(1);
        const double* pv = p.val().data();
        for (std::size_t i = 0; i < s; ++i) {
            std::memcpy(out.data() + (i * total + row0) * b, pv + i * rows * b,
                        rows * b * sizeof(double));
        }
        row0 += rows;
    }
    return make_node({s, total, b}, std::move(out), parts,
                     [s, b, total, offsets = std::move(offsets)](detail::Node& self) {
                         const double* g = self.grad.data();
                         for (std::size_t p = 0; p < self.parents.size(); ++p) {
                             auto& pp = *self.parents[p];
                             if (!pp.requires_grad) continue;
                             const std::size_t rows = pp.shape[1];
                             auto& gp = pp.ensure_grad();
                             for (std::size_t i = 0; i < s; ++i) {
                                 const double* gs = g + (i * total + offsets[p]) * b;
                                 double* gd = gp.data() + i * rows * b;
                                 for (std::size_t j = 0; j < rows * b; ++j) gd[j] += gs[j];
                             }
                         }
                     });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_lastdim: no parts");
    const std::size_t s = parts[0].dim(0), a = parts[0].dim(1);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank(p, 3, "concat_lastdim", "part");
        require(p.dim(0) == s && p.dim(1) == a,
                "concat_lastdim: incompatible part shape " + shape_str(p.shape()));
        total += p.dim(2);
    }
    std::vector<double> out(s * a * total);
    std::size_t col0 = 0;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(col0);
        const std::size_t cols = p.dim(2);
        const double* pv = p.val().data();
        for (std::size_t r = 0; r < s * a; ++r) {
            std::memcpy(out.data() + r * total + col0, pv + r * cols,
                        cols * sizeof(double));
        }
        col0 += cols;
    }
    return make_node({s, a, total}, std::move(out), parts,
                     [s, a, total, offsets = std::move(offsets)](detail::Node& self) {
                         const double* g = self.grad.data();
                         for (std::size_t p = 0; p < self.parents.size(); ++p) {
                             auto& pp = *self.parents[p];
                             if (!pp.requires_grad) continue;
                             const std::size_t cols = pp.shape[2];
                             auto& gp = pp.ensure_grad();
                             for (std::size_t r = 0; r < s * a; ++r) {
                                 const double* gs = g + r * total + offsets[p];
                                 double* gd = gp.data() + r * cols;
                                 for (std::size_t j = 0; j < cols; ++j) gd[j] += gs[j];
                             }
                         }
                     });
}

namespace {

Tensor bmm_impl(const Tensor& a, const Tensor& b, bool nt, const char* op) {
    require_rank(a, 3, op, "a");
    require_rank(b, 3, op, "b");
    const std::size_t s = a.dim(0), m = a.dim(1), k = a.dim(2);
    require(b.dim(0) == s, std::string(op) + ": batch sizes differ");
    const std::size_t n = nt ? b.dim(1) : b.dim(2);
    const std::size_t bk = nt ? b.dim(2) : b.dim(1);
    require(bk == k, std::string(op) + ": inner dimensions " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + " do not match");
    std::vector<double> out(s * m * n);
    const double* av = a.val().data();
    const double* bv = b.val().data();
    const std::size_t bstride = b.dim(1) * b.dim(2);
    for (std::size_t i = 0; i < s; ++i) {
        gemm(false, nt, m, n, k, 1.0, av + i * m * k, k, bv + i * bstride,
             nt ? k : n, 0.0, out.data() + i * m * n, n);
    }
    return make_node({s, m, n}, std::move(out), {a, b},
                     [s, m, n, k, bstride, nt](detail::Node& self) {
                         auto& pa = *self.parents[0];
                         auto& pb = *self.parents[1];
                         const double* g = self.grad.data();
                         for (std::size_t i = 0; i < s; ++i) {
                             const double* gi = g + i * m * n;
                             const double* ai = pa.val.data() + i * m * k;
                             const double* bi = pb.val.data() + i * bstride;
                             if (pa.requires_grad) {
                                 double* gai = pa.ensure_grad().data() + i * m * k;
                                 // d a_i += g_i @ op(b_i)^(-T)
                                 gemm(false, !nt, m, k, n, 1.0, gi, n, bi, nt ? k : n,
                                      1.0, gai, k);
                             }
                             if (pb.requires_grad) {
                                 double* gbi = pb.ensure_grad().data() + i * bstride;
                                 if (!nt) {
                                     // d b_i += a_i^T @ g_i : [k,m]@[m,n]
                                     gemm(true, false, k, n, m, 1.0, ai, k, gi, n, 1.0,
                                          gbi, n);
                                 } else {
                                     // y_i = a_i @ b_i^T so d b_i += g_i^T @ a_i
                                     gemm(true, false, n, k, m, 1.0, gi, n, ai, k, 1.0,
                                          gbi, k);
                                 }
                             }
                         }
                     });
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) { return bmm_impl(a, b, false, "bmm"); }

Tensor bmm_nt(const Tensor& a, const Tensor& b) { return bmm_impl(a, b, true, "bmm_nt"); }

Tensor mean_lastdim(const Tensor& x) {
    require_rank(x, 3, "mean_lastdim", "x");
    const std::size_t s = x.dim(0), c = x.dim(1), l = x.dim(2);
    std::vector<double> out(s * c, 0.0);
    const double* xv = x.val().data();
    for (std::size_t r = 0; r < s * c; ++r) {
        const double* row = xv + r * l;
        double acc = 0.0;
        for (std::size_t j = 0; j < l; ++j) acc += row[j];
        out[r] = acc / static_cast<double>(l);
    }
    return make_node({s, c}, std::move(out), {x}, [s, c, l](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        const double invl = 1.0 / static_cast<double>(l);
        for (std::size_t r = 0; r < s * c; ++r) {
            double* row = gx.data() + r * l;
            const double gv = g[r] * invl;
            for (std::size_t j = 0; j < l; ++j) row[j] += gv;
        }
    });
}

namespace {

enum class StatKind { sub, div, mul, add };

Tensor stat_op(const Tensor& x, const Tensor& t, StatKind kind, const char* op) {
    check_stat_shapes(x, t, op);
    const std::size_t s = x.dim(0), c = x.dim(1), l = x.dim(2);
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    const double* tv = t.val().data();
    for (std::size_t r = 0; r < s * c; ++r) {
        const double* row = xv + r * l;
        double* orow = out.data() + r * l;
        const double sv = tv[r];
        switch (kind) {
            case StatKind::sub:
                for (std::size_t j = 0; j < l; ++j) orow[j] = row[j] - sv;
                break;
            case StatKind::div:
                if (sv == 0.0) throw std::runtime_error(std::string(op) + ": zero divisor");
                for (std::size_t j = 0; j < l; ++j) orow[j] = row[j] / sv;
                break;
            case StatKind::mul:
                for (std::size_t j = 0; j < l; ++j) orow[j] = row[j] * sv;
                break;
            case StatKind::add:
                for (std::size_t j = 0; j < l; ++j) orow[j] = row[j] + sv;
                break;
        }
    }
    return make_node(x.shape(), std::move(out), {x, t}, [s, c, l, kind](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pt = *self.parents[1];
        const double* g = self.grad.data();
        const double* xv = px.val.data();
        const double* tv = pt.val.data();
        const double* yv = self.val.data();
        if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            for (std::size_t r = 0; r < s * c; ++r) {
                const double* gr = g + r * l;
                double* gxr = gx.data() + r * l;
                const double sv = tv[r];
                switch (kind) {
                    case StatKind::sub:
                    case StatKind::add:
                        for (std::size_t j = 0; j < l; ++j) gxr[j] += gr[j];
                        break;
                    case StatKind::div:
                        for (std::size_t j = 0; j < l; ++j) gxr[j] += gr[j] / sv;
                        break;
                    case StatKind::mul:
                        for (std::size_t j = 0; j < l; ++j) gxr[j] += gr[j] * sv;
                        break;
                }
            }
        }
        if (pt.requires_grad) {
            auto& gt = pt.ensure_grad();
            for (std::size_t r = 0; r < s * c; ++r) {
                const double* gr = g + r * l;
                const double* xr = xv + r * l;
                const double* yr = yv + r * l;
                const double sv = tv[r];
                double acc = 0.0;
                switch (kind) {
                    case StatKind::sub:
                        for (std::size_t j = 0; j < l; ++j) acc -= gr[j];
                        break;
                    case StatKind::add:
                        for (std::size_t j = 0; j < l; ++j) acc += gr[j];
                        break;
                    case StatKind::div:
                        // y = x / t, dy/dt = -x / t^2 = -y / t
                        for (std::size_t j = 0; j < l; ++j) acc -= gr[j] * yr[j] / sv;
                        break;
                    case StatKind::mul:
                        for (std::size_t j = 0; j < l; ++j) acc += gr[j] * xr[j];
                        break;
                }
                gt[r] += acc;
            }
        }
    });
}

}  // namespace

Tensor sub_stat(const Tensor& x, const Tensor& t) { return stat_op(x, t, StatKind::sub, "sub_stat"); }
Tensor div_stat(const Tensor& x, const Tensor& t) { return stat_op(x, t, StatKind::div, "div_stat"); }
Tensor mul_stat(const Tensor& x, const Tensor& t) { return stat_op(x, t, StatKind::mul, "mul_stat"); }
Tensor add_stat(const Tensor& x, const Tensor& t) { return stat_op(x, t, StatKind::add, "add_stat"); }

Tensor sqrt_eps(const Tensor& x, double eps) {
    std::vector<double> out(x.size());
    const auto& v = x.val();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double u = v[i] + eps;
        require(u > 0.0, "sqrt_eps: argument " + std::to_string(u) + " not positive");
        out[i] = std::sqrt(u);
    }
    return make_node(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.val.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * 0.5 / y[i];
    });
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    check_channel_shapes(x, gamma, beta, "channel_affine");
    const std::size_t s = x.dim(0), c = x.dim(1), l = x.dim(2);
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    const double* gv = gamma.val().data();
    const double* bv = beta.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* row = xv + (i * c + ch) * l;
            double* orow = out.data() + (i * c + ch) * l;
            const double ga = gv[ch], be = bv[ch];
            for (std::size_t j = 0; j < l; ++j) orow[j] = ga * row[j] + be;
        }
    }
    return make_node(x.shape(), std::move(out), {x, gamma, beta},
                     [s, c, l](detail::Node& self) {
                         auto& px = *self.parents[0];
                         auto& pg = *self.parents[1];
                         auto& pb = *self.parents[2];
                         const double* g = self.grad.data();
                         const double* xv = px.val.data();
                         const double* gv = pg.val.data();
                         if (px.requires_grad) {
                             auto& gx = px.ensure_grad();
                             for (std::size_t i = 0; i < s; ++i) {
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                     const double* gr = g + (i * c + ch) * l;
                                     double* gxr = gx.data() + (i * c + ch) * l;
                                     const double ga = gv[ch];
                                     for (std::size_t j = 0; j < l; ++j) gxr[j] += gr[j] * ga;
                                 }
                             }
                         }
                         if (pg.requires_grad || pb.requires_grad) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                                 double accg = 0.0, accb = 0.0;
                                 for (std::size_t i = 0; i < s; ++i) {
                                     const double* gr = g + (i * c + ch) * l;
                                     const double* xr = xv + (i * c + ch) * l;
                                     for (std::size_t j = 0; j < l; ++j) {
                                         accg += gr[j] * xr[j];
                                         accb += gr[j];
                                     }
                                 }
                                 if (pg.requires_grad) pg.ensure_grad()[ch] += accg;
                                 if (pb.requires_grad) pb.ensure_grad()[ch] += accb;
                             }
                         }
                     });
}

Tensor channel_unaffine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    check_channel_shapes(x, gamma, beta, "channel_unaffine");
    const std::size_t s = x.dim(0), c = x.dim(1), l = x.dim(2);
    const double* gv = gamma.val().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (gv[ch] == 0.0) {
            throw std::runtime_error("channel_unaffine: zero scale at channel " +
                                     std::to_string(ch));
        }
    }
    std::vector<double> out(x.size());
    const double* xv = x.val().data();
    const double* bv = beta.val().data();
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* row = xv + (i * c + ch) * l;
            double* orow = out.data() + (i * c + ch) * l;
            const double ga = gv[ch], be = bv[ch];
            for (std::size_t j = 0; j < l; ++j) orow[j] = (row[j] - be) / ga;
        }
    }
    return make_node(x.shape(), std::move(out), {x, gamma, beta},
                     [s, c, l](detail::Node& self) {
                         auto& px = *self.parents[0];
                         auto& pg = *self.parents[1];
                         auto& pb = *self.parents[2];
                         const double* g = self.grad.data();
                         const double* gv = pg.val.data();
                         const double* yv = self.val.data();
                         if (px.requires_grad) {
                             auto& gx = px.ensure_grad();
                             for (std::size_t i = 0; i < s; ++i) {
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                     const double* gr = g + (i * c + ch) * l;
                                     double* gxr = gx.data() + (i * c + ch) * l;
                                     const double ga = gv[ch];
                                     for (std::size_t j = 0; j < l; ++j) gxr[j] += gr[j] / ga;
                                 }
                             }
                         }
                         if (pg.requires_grad || pb.requires_grad) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                                 const double ga = gv[ch];
                                 double accg = 0.0, accb = 0.0;
                                 for (std::size_t i = 0; i < s; ++i) {
                                     const double* gr = g + (i * c + ch) * l;
                                     const double* yr = yv + (i * c + ch) * l;
                                     for (std::size_t j = 0; j < l; ++j) {
                                         accg -= gr[j] * yr[j] / ga;
                                         accb -= gr[j] / ga;
                                     }
                                 }
                                 if (pg.requires_grad) pg.ensure_grad()[ch] += accg;
                                 if (pb.requires_grad) pb.ensure_grad()[ch] += accb;
                             }
                         }
                     });
}

}  // namespace mmctp
