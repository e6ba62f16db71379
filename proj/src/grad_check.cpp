#include "mmctp/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmctp {

namespace {

double eval_scalar(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                   const std::vector<Tensor>& inputs) {
    NoGradGuard guard;
    Tensor y = f(inputs);
    if (y.size() != 1) {
        throw std::invalid_argument("grad_check: function must return a scalar");
    }
    return y.val()[0];
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor>& inputs, double step,
                           std::size_t max_coords_per_input) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) {
            throw std::invalid_argument("grad_check: input " + std::to_string(i) +
                                        " does not require gradients");
        }
        inputs[i].zero_grad();
    }

    Tensor y = f(inputs);
    if (y.size() != 1) {
        throw std::invalid_argument("grad_check: function must return a scalar");
    }
    y.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const Tensor& in : inputs) {
        analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.size(), 0.0));
    }

    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t n = inputs[i].size();
        std::size_t stride = 1;
        if (max_coords_per_input > 0 && n > max_coords_per_input) {
            stride = (n + max_coords_per_input - 1) / max_coords_per_input;
        }
        std::vector<double>& data = inputs[i].mutable_val();
        for (std::size_t j = 0; j < n; j += stride) {
            const double saved = data[j];
            data[j] = saved + step;
            const double fplus = eval_scalar(f, inputs);
            data[j] = saved - step;
            const double fminus = eval_scalar(f, inputs);
            data[j] = saved;

            const double numeric = (fplus - fminus) / (2.0 * step);
            const double a = analytic[i][j];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
            const double rel = std::fabs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_input = i;
                result.worst_coord = j;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace mmctp
