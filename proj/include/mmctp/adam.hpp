#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "mmctp/tensor.hpp"

namespace mmctp {

/**
 * Adam optimizer with bias-corrected first and second moment estimates.
 *
 * The optimizer holds handles to the parameter tensors it updates; callers
 * run backward() to populate gradients, then step(). Every parameter must
 * carry a finite gradient at step time, anything else throws, since a silent
 * skip would desynchronize the moment estimates from the parameters.
 */
class Adam {
  public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8);

    /** Applies one update. Throws std::runtime_error on missing or non-finite gradients. */
    void step();

    /** Clears the gradient buffers of all managed parameters. */
    void zero_grad();

    void set_lr(double lr);
    double lr() const { return lr_; }

    /** Number of updates applied so far (drives bias correction). */
    std::size_t step_count() const { return t_; }

    const std::vector<Tensor>& params() const { return params_; }

    /**
     * Serializes step count and moment vectors (parameter values are owned
     * by the model and saved separately). load_state requires the optimizer
     * to manage identically shaped parameters and throws otherwise.
     */
    void save_state(std::ostream& out) const;
    void load_state(std::istream& in);

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::size_t t_ = 0;
};

}  // namespace mmctp
