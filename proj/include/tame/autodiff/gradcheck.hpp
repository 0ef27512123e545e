#pragma once

#include "tame/autodiff/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace tame::ad {

struct GradCheckOptions {
    double step = 1e-5;
    // Five-point stencil instead of the two-point one. Resolves small
    // derivatives that roundoff swamps at h = 1e-5, with a larger h; kinks
    // must then be more than 2h away.
    bool fourth_order = false;
    // Coordinates whose analytic and numeric derivatives are both below this
    // magnitude are treated as agreeing (central differences cannot resolve
    // a true zero below roundoff).
    double noise_floor = 1e-8;
    // 0 checks every coordinate; otherwise a seeded random subset per input.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
};

using ScalarFn = std::function<Var(const Var&)>;
using MultiScalarFn = std::function<Var(const std::vector<Var>&)>;

// max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)
double finite_difference_check(const ScalarFn& f, const Matrix& x, const GradCheckOptions& opts = {});
double finite_difference_check(const MultiScalarFn& f, const std::vector<Matrix>& xs,
                               const GradCheckOptions& opts = {});

}  // namespace tame::ad
