#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "idp/numerics/autodiff.hpp"

namespace idp::ad {

/// Records a scalar loss on `tape` given the parameter variables.
using Recording = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    Eigen::Index worst_entry = 0;
};

/// Compares reverse-mode gradients against central differences
/// (f(x+h) - f(x-h)) / 2h entry by entry. Relative error uses the denominator
/// max(|a|, |b|, 1e-8).
inline GradCheckResult grad_check(const Recording& record, std::span<const Matrix> params, double step) {
    require(step > 0.0, ErrorKind::InvalidArgument, "grad_check step must be positive");

    auto evaluate = [&](const std::vector<Matrix>& values) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(values.size());
        for (const auto& v : values) vars.push_back(tape.parameter(v));
        return tape.scalar(record(tape, vars));
    };

    std::vector<Matrix> values(params.begin(), params.end());
    std::vector<Matrix> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& v : values) vars.push_back(tape.parameter(v));
        const Var out = record(tape, vars);
        tape.backward(out);
        for (const auto& v : vars) {
            Matrix g = tape.grad(v);
            require(g.allFinite(), ErrorKind::NonFiniteGradient, "reverse-mode gradient is not finite");
            analytic.push_back(std::move(g));
        }
    }

    GradCheckResult result;
    for (std::size_t p = 0; p < values.size(); ++p) {
        for (Eigen::Index k = 0; k < values[p].size(); ++k) {
            const double saved = values[p].data()[k];
            values[p].data()[k] = saved + step;
            const double up = evaluate(values);
            values[p].data()[k] = saved - step;
            const double down = evaluate(values);
            values[p].data()[k] = saved;
            const double numeric = (up - down) / (2.0 * step);
            require(std::isfinite(numeric), ErrorKind::NonFiniteGradient, "finite-difference gradient is not finite");
            const double a = analytic[p].data()[k];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > result.max_rel_error) result = {rel, p, k};
        }
    }
    return result;
}

}  // namespace idp::ad
