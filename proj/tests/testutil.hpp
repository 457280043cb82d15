#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "alope/tensor.hpp"

namespace testutil {

// Central finite difference of a scalar loss w.r.t. one element of a leaf
// parameter. The loss function must rebuild its graph from the leaves.
inline double central_diff(const std::function<double()>& loss_value, alope::Tensor<double> param,
                           std::int64_t i, double h = 1e-5) {
    auto data = param.mutable_data();
    const double orig = data[i];
    data[i] = orig + h;
    const double up = loss_value();
    data[i] = orig - h;
    const double down = loss_value();
    data[i] = orig;
    return (up - down) / (2.0 * h);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t worst_param = -1;
    std::int64_t worst_index = -1;
};

// Compares analytic gradients (already accumulated in param.grad()) against
// central differences of `loss_value`. rel = |a-f| / max(|a|, |f|, floor).
inline GradCheckResult grad_check(const std::function<double()>& loss_value,
                                  const std::vector<alope::Tensor<double>>& params, double h = 1e-5,
                                  double floor = 1e-6) {
    GradCheckResult res;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto param = params[p];
        for (std::int64_t i = 0; i < param.numel(); ++i) {
            const double analytic = param.grad()[i];
            const double fd = central_diff(loss_value, param, i, h);
            const double rel = std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), floor});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = static_cast<std::int64_t>(p);
                res.worst_index = i;
            }
        }
    }
    return res;
}

inline alope::Tensor<double> random_tensor(alope::Shape shape, alope::Rng& rng, bool requires_grad,
                                           double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(static_cast<std::size_t>(alope::shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return alope::Tensor<double>::from_data(shape, std::move(v), requires_grad);
}

}  // namespace testutil
