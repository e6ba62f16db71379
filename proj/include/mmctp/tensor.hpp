#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mmctp {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/** Graph node: value, accumulated gradient, and the recorded backward step. */
struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // empty until first materialized
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/**
 * Dense row-major tensor of doubles; a cheap handle onto a shared autograd
 * node. Copying a Tensor shares the underlying storage and gradient.
 *
 * Every operation in ops.hpp records enough information to run reverse-mode
 * differentiation; calling backward() on a scalar result accumulates
 * gradients into every reachable tensor with requires_grad set. Gradients
 * accumulate across backward calls until zero_grad() resets them.
 *
 * Values must stay finite: constructors reject NaN and infinity, and the
 * training loop re-checks losses and gradients so a divergence surfaces as
 * an error instead of propagating.
 */
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    /** Elementwise uniform draw in [lo, hi). */
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const;

    const std::vector<double>& val() const;
    /** Direct in-place access for optimizer updates and finite differences. */
    std::vector<double>& mutable_val();
    /** Value of a rank-0 or single-element tensor. */
    double item() const;
    /** Element by multi-index (bounds-checked; test convenience). */
    double at(std::initializer_list<std::size_t> idx) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool enabled);
    bool has_grad() const;
    const std::vector<double>& grad() const;
    /** Materializes the gradient buffer (zero-filled) and resets it. */
    void zero_grad();

    /**
     * Reverse-mode sweep from this scalar. Topologically orders the recorded
     * graph and accumulates into each reachable requires_grad tensor.
     */
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    friend Tensor make_node(Shape shape, std::vector<double> val,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backprop);

    std::shared_ptr<detail::Node> node_;
};

/** True while operations should record backward steps (default on). */
bool grad_recording_enabled();

/** RAII switch that disables autograd recording, for inference and timing. */
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/**
 * Builds an operation result node. Parents and the backprop closure are
 * dropped when no parent needs gradients or recording is disabled.
 */
Tensor make_node(Shape shape, std::vector<double> val, std::vector<Tensor> parents,
                 std::function<void(detail::Node&)> backprop);

}  // namespace mmctp
