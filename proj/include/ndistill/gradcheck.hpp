#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "ndistill/tensor.hpp"

namespace nd {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

/// Central-difference check of an analytic gradient. `f` must be a pure
/// scalar function of the current contents of `x`; runs in double precision.
inline GradCheckReport finite_diff_check(const std::function<double()>& f, TensorD& x,
                                         const TensorD& analytic_grad, double h = 1e-5) {
    require_same_shape(x, analytic_grad, "finite_diff_check");
    GradCheckReport rep;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data[i];
        x.data[i] = orig + h;
        const double f_plus = f();
        x.data[i] = orig - h;
        const double f_minus = f();
        x.data[i] = orig;
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double analytic = analytic_grad.data[i];
        const double scale = std::max(1.0, std::max(std::abs(numeric), std::abs(analytic)));
        const double rel = std::abs(numeric - analytic) / scale;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.worst_analytic = analytic;
            rep.worst_numeric = numeric;
        }
    }
    return rep;
}

}  // namespace nd
