#include "mmctp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "mmctp/rng.hpp"

namespace mmctp {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_recording = true;

void check_finite(const std::vector<double>& data) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("tensor: non-finite value in data");
        }
    }
}

}  // namespace

bool grad_recording_enabled() { return g_grad_recording; }

NoGradGuard::NoGradGuard() : prev_(g_grad_recording) { g_grad_recording = false; }
NoGradGuard::~NoGradGuard() { g_grad_recording = prev_; }

Tensor::Tensor(Shape shape) {
    node_ = std::make_shared<detail::Node>();
    node_->val.assign(shape_size(shape), 0.0);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_size(shape) != data.size()) {
        throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    check_finite(data);
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->val = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
    std::vector<double> data(shape_size(shape), v);
    return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw std::invalid_argument("tensor: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::size() const { return val().size(); }

const std::vector<double>& Tensor::val() const {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    return node_->val;
}

std::vector<double>& Tensor::mutable_val() {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    return node_->val;
}

double Tensor::item() const {
    const auto& v = val();
    if (v.size() != 1) {
        throw std::invalid_argument("tensor: item() on tensor of size " +
                                    std::to_string(v.size()));
    }
    return v[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) {
        throw std::invalid_argument("tensor: index rank mismatch for shape " + shape_str(s));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        if (i >= s[axis]) {
            throw std::invalid_argument("tensor: index out of range for shape " + shape_str(s));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return val()[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    node_->requires_grad = enabled;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    if (node_->grad.empty()) {
        throw std::runtime_error("tensor: gradient never materialized; call zero_grad() "
                                 "before backward() or check has_grad()");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    node_->grad.assign(node_->val.size(), 0.0);
}

void Tensor::backward() const {
    if (!node_) throw std::runtime_error("tensor: use of undefined tensor");
    if (node_->val.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_str(node_->shape));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order over the recorded graph.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior nodes get a fresh gradient each sweep; only leaves (parameters
    // and inputs, which record no backprop step) accumulate across calls.
    for (detail::Node* n : order) {
        if (n->backprop) n->grad.assign(n->val.size(), 0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

Tensor make_node(Shape shape, std::vector<double> val, std::vector<Tensor> parents,
                 std::function<void(detail::Node&)> backprop) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->val = std::move(val);
    bool track = false;
    if (g_grad_recording) {
        for (const Tensor& p : parents) {
            if (p.requires_grad()) {
                track = true;
                break;
            }
        }
    }
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (Tensor& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    return Tensor(std::move(node));
}

}  // namespace mmctp
