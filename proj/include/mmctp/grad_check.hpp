#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mmctp/tensor.hpp"

namespace mmctp {

/** Outcome of a finite-difference comparison over a set of inputs. */
struct GradCheckResult {
    /** Largest relative error seen across all checked coordinates. */
    double max_rel_err = 0.0;
    /** Coordinate index (input, flat offset) where the maximum occurred. */
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    /** Analytic and numeric derivative at the worst coordinate. */
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    /** Total number of coordinates compared. */
    std::size_t checked = 0;

    bool ok(double tolerance) const { return max_rel_err <= tolerance; }
};

/**
 * Compares analytic gradients of a scalar-valued function against central
 * finite differences.
 *
 * `f` is invoked with the given inputs; it must return a scalar tensor built
 * from them on the tape. Each input must have requires_grad set. The relative
 * error per coordinate is |a - n| / max(|a|, |n|, 1e-4), which keeps the
 * denominator sane when both derivatives are near zero.
 *
 * `max_coords_per_input` caps the work for large tensors by checking an
 * evenly strided subset of coordinates (0 means check every coordinate).
 * The function must be deterministic across calls: any randomness inside it
 * has to be re-seeded identically on every invocation.
 */
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor>& inputs, double step = 1e-3,
                           std::size_t max_coords_per_input = 0);

}  // namespace mmctp
