#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "brimpr/tensor.hpp"

namespace brimpr {

/// A scalar-valued function of a parameter list together with its analytic
/// gradient, both evaluated by rebuilding whatever tape they need.
struct GradCheckProblem {
    std::function<double(const std::vector<Tensor>&)> value;
    std::function<std::vector<Tensor>(const std::vector<Tensor>&)> gradient;
};

/// Central-difference verification of an analytic gradient.
/// Returns max over all parameter entries of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// A function whose two baseline evaluations disagree is rejected.
inline double finite_difference_check(const GradCheckProblem& problem,
                                      const std::vector<Tensor>& params, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");
    double base1 = problem.value(params);
    double base2 = problem.value(params);
    if (base1 != base2)
        throw std::invalid_argument(
            "finite_difference_check: function is not deterministic (baselines differ)");

    std::vector<Tensor> analytic = problem.gradient(params);
    if (analytic.size() != params.size())
        throw std::invalid_argument("finite_difference_check: gradient count mismatch");

    double worst = 0.0;
    std::vector<Tensor> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (analytic[p].shape != params[p].shape)
            throw std::invalid_argument("finite_difference_check: gradient shape mismatch at " +
                                        std::to_string(p));
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            double orig = work[p].values[i];
            work[p].values[i] = orig + step;
            double up = problem.value(work);
            work[p].values[i] = orig - step;
            double down = problem.value(work);
            work[p].values[i] = orig;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic[p].values[i];
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-12});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace brimpr
