#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dsm/ops.hpp"

namespace dsm {

struct GradcheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst; // "input#i[j]" of the worst element
    bool ok(double tol) const { return max_rel_err < tol; }
};

// Verifies analytic gradients of `f` against central finite differences.
//
// `f` maps the given inputs to one output tensor of any shape. All inputs
// must be float64 leaves; a fixed random linear head (seeded) turns the
// output into a scalar objective so every output element is exercised.
// Relative error per element is |a-n| / max(1, |a|, |n|), which degrades
// gracefully to absolute error for near-zero gradients.
GradcheckReport gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, uint64_t seed,
                          double eps = 1e-4);

} // namespace dsm
