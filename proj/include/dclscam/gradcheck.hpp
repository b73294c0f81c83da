// gradcheck.hpp: central finite-difference verification of analytic gradients.

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dclscam/tensor.hpp"

namespace dclscam {

// Worst relative error between analytic gradients (from one backward pass)
// and central differences, with denominator max(|analytic|, |numeric|, 1e-6).
// `f` must be a deterministic function of the parameter values and return a
// scalar tensor; it is re-evaluated 2*numel times, with the comparison
// accumulated in 64-bit. Throws NonFiniteError if f produces a non-finite value.
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                         double eps = 1e-3);

// Same comparison against caller-supplied analytic gradients (one vector per
// parameter, flattened) and a plain scalar-valued f. Lets a harness check
// gradients it obtained some other way: or deliberately corrupted ones, to
// prove the check can fail.
double finite_diff_check_against(const std::function<double()>& f, std::span<Tensor> params,
                                 const std::vector<std::vector<double>>& analytic, double eps = 1e-3);

}  // namespace dclscam
