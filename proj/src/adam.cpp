#include "mmctp/adam.hpp"

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace mmctp {

namespace {

constexpr std::uint32_t kStateMagic = 0x4d414441;  // "ADAM"

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("adam: truncated optimizer state");
    return v;
}

}  // namespace

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr_ <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        if (!p.defined() || !p.requires_grad()) {
            throw std::invalid_argument("adam: all parameters must require gradients");
        }
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) {
            throw std::runtime_error("adam: parameter " + std::to_string(i) +
                                     " has no gradient");
        }
        const std::vector<double>& g = p.grad();
        std::vector<double>& val = p.mutable_val();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (!std::isfinite(g[j])) {
                throw std::runtime_error("adam: non-finite gradient in parameter " +
                                         std::to_string(i));
            }
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Adam::set_lr(double lr) {
    if (lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
    lr_ = lr;
}

void Adam::save_state(std::ostream& out) const {
    write_u64(out, kStateMagic);
    write_u64(out, static_cast<std::uint64_t>(t_));
    write_u64(out, static_cast<std::uint64_t>(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        write_u64(out, static_cast<std::uint64_t>(m_[i].size()));
        out.write(reinterpret_cast<const char*>(m_[i].data()),
                  static_cast<std::streamsize>(m_[i].size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(v_[i].data()),
                  static_cast<std::streamsize>(v_[i].size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("adam: failed to write optimizer state");
}

void Adam::load_state(std::istream& in) {
    if (read_u64(in) != kStateMagic) {
        throw std::runtime_error("adam: bad optimizer state header");
    }
    const std::uint64_t t = read_u64(in);
    const std::uint64_t n = read_u64(in);
    if (n != params_.size()) {
        throw std::runtime_error("adam: optimizer state has " + std::to_string(n) +
                                 " parameters, expected " +
                                 std::to_string(params_.size()));
    }
    std::vector<std::vector<double>> m(n), v(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint64_t sz = read_u64(in);
        if (sz != params_[i].size()) {
            throw std::runtime_error("adam: optimizer state parameter " +
                                     std::to_string(i) + " has wrong size");
        }
        m[i].resize(sz);
        v[i].resize(sz);
        in.read(reinterpret_cast<char*>(m[i].data()),
                static_cast<std::streamsize>(sz * sizeof(double)));
        in.read(reinterpret_cast<char*>(v[i].data()),
                static_cast<std::streamsize>(sz * sizeof(double)));
        if (!in) throw std::runtime_error("adam: truncated optimizer state");
    }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = static_cast<std::size_t>(t);
}

}  // namespace mmctp
