#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "urlbert/nn/tensor.hpp"

namespace urlbert::nn {

struct GradCheckEntry {
    std::string name;
    std::size_t index = 0;
    double analytic = 0, numeric = 0, rel_err = 0;
};

struct GradCheckReport {
    double max_rel_err = 0;
    std::size_t checked = 0;
    std::vector<GradCheckEntry> failures;
    bool ok() const { return failures.empty(); }
};

struct GradCheckOptions {
    double tolerance = 1e-5;
    double step = 1e-5;
    /// Relative error is |a − n| / max(|a|, |n|, floor).
    double floor = 1e-3;
    /// Checks at most this many evenly spaced elements per input (0 = all).
    std::size_t max_per_input = 0;
};

/// Central finite differences against reverse-mode gradients for every
/// named input. `f` must rebuild its graph from the inputs on every call.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                  GradCheckOptions opt = {}) {
    for (auto& [_, t] : inputs) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    f().backward();
    GradCheckReport report;
    for (auto& [name, t] : inputs) {
        std::vector<double> analytic(t.size(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        const std::size_t stride =
            opt.max_per_input == 0 ? 1 : std::max<std::size_t>(1, t.size() / opt.max_per_input);
        auto data = t.mutable_data();
        for (std::size_t i = 0; i < t.size(); i += stride) {
            const double orig = data[i];
            double plus, minus;
            {
                NoGradGuard ng;
                data[i] = orig + opt.step;
                plus = f().item();
                data[i] = orig - opt.step;
                minus = f().item();
                data[i] = orig;
            }
            const double numeric = (plus - minus) / (2.0 * opt.step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.checked;
            if (!(rel <= opt.tolerance)) report.failures.push_back({name, i, analytic[i], numeric, rel});
        }
    }
    return report;
}

}  // namespace urlbert::nn
