#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "atroseg/ops.hpp"
#include "atroseg/tensor.hpp"

namespace atroseg {

// Builds a scalar loss from a (possibly requires_grad) input on the given graph.
using ScalarFn = std::function<TensorPtr<double>(Graph<double>&, const TensorPtr<double>&)>;

struct FiniteDiffResult {
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    std::int64_t skipped = 0;
};

namespace detail {

inline double eval_scalar(const ScalarFn& fn, const TensorPtr<double>& x) {
    Graph<double> g(false);
    auto input = make_tensor<double>(x->shape, x->data, false);
    auto out = fn(g, input);
    if (!(out->shape == Shape(1, 1, 1, 1)))
        throw std::invalid_argument("finite_diff_check: fn must return a scalar tensor");
    const double v = out->data[0];
    if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: non-finite function value");
    return v;
}

}  // namespace detail

// Central-difference check of the analytic gradient of fn with respect to
// every input coordinate. Relative error per coordinate is
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Coordinates for which skip(i) is true (e.g. within `step` of a relu kink)
// are excluded from the maximum.
inline FiniteDiffResult finite_diff_check(const ScalarFn& fn, const TensorPtr<double>& input, double step,
                                          const std::function<bool(std::int64_t)>& skip = nullptr) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be > 0");

    Graph<double> g(true);
    auto x = make_tensor<double>(input->shape, input->data, true);
    auto loss = fn(g, x);
    if (!(loss->shape == Shape(1, 1, 1, 1)))
        throw std::invalid_argument("finite_diff_check: fn must return a scalar tensor");
    if (!std::isfinite(loss->data[0]))
        throw std::runtime_error("finite_diff_check: non-finite function value");
    g.backward(loss);
    const std::vector<double> analytic = x->grad;

    FiniteDiffResult result;
    auto probe = make_tensor<double>(input->shape, input->data, false);
    for (std::int64_t i = 0; i < input->numel(); ++i) {
        if (skip && skip(i)) {
            ++result.skipped;
            continue;
        }
        const double saved = probe->data[i];
        probe->data[i] = saved + step;
        const double fp = detail::eval_scalar(fn, probe);
        probe->data[i] = saved - step;
        const double fm = detail::eval_scalar(fn, probe);
        probe->data[i] = saved;

        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (err > result.max_rel_error) result.max_rel_error = err;
        ++result.checked;
    }
    return result;
}

}  // namespace atroseg
