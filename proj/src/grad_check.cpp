#include "leirstd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace leirstd {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

std::string GradCheckReport::summary() const {
    std::ostringstream out;
    out << (passed ? "ok" : "FAIL") << " max_rel_err=" << max_rel_error << " over " << checked << " elements";
    if (non_smooth > 0) out << ", " << non_smooth << " at kinks";
    if (!passed) {
        out << " (input " << worst_input << " index " << worst_index << ": analytic " << worst_analytic
            << " numeric " << worst_numeric << ")";
    }
    return out.str();
}

GradCheckReport grad_check(const GradClosure& fn, const std::vector<Tensor>& inputs, GradCheckOptions options) {
    for (const auto& t : inputs) {
        if (!t.requires_grad() || t.op() != OpKind::leaf) {
            throw ContractError("grad_check: inputs must be leaves with requires_grad");
        }
    }
    auto eval = [&] { return fn(inputs).item(); };

    const double first = eval();
    const double second = eval();
    if (std::memcmp(&first, &second, sizeof(double)) != 0) {
        throw DeterminismError("grad_check: closure returned different values on repeated evaluation");
    }

    std::vector<Tensor> leaves = inputs;
    for (auto& t : leaves) t.zero_grad();
    backward(fn(inputs));
    std::vector<std::vector<double>> analytic;
    for (const auto& t : leaves) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.size(), 0.0));
    }

    GradCheckReport report;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto values = leaves[i].mutable_data();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double saved = values[j];
            auto at = [&](double offset) {
                values[j] = saved + offset;
                return eval();
            };
            double numeric = 0.0;
            bool smooth = true;
            double h = options.step;
            for (std::size_t attempt = 0;; ++attempt, h /= 10.0) {
                const double p1 = at(h), m1 = at(-h);
                numeric = (p1 - m1) / (2.0 * h);
                if (options.stencil == Stencil::three_point) break;
                const double p2 = at(2.0 * h), m2 = at(-2.0 * h);
                numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                const double right = (-3.0 * first + 4.0 * p1 - p2) / (2.0 * h);
                const double left = (3.0 * first - 4.0 * m1 + m2) / (2.0 * h);
                smooth = options.kink_threshold <= 0.0 || relative_error(left, right) <= options.kink_threshold;
                if (smooth || attempt == options.refinements) break;
            }
            if (!smooth) {
                values[j] = saved;
                ++report.checked;
                ++report.non_smooth;
                continue;
            }
            values[j] = saved;
            const double err = relative_error(analytic[i][j], numeric);
            ++report.checked;
            if (err > report.max_rel_error || report.checked - report.non_smooth == 1) {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
                report.worst_analytic = analytic[i][j];
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= options.tolerance &&
                    static_cast<double>(report.non_smooth) <=
                        options.max_non_smooth_fraction * static_cast<double>(report.checked);
    return report;
}

}  // namespace leirstd
