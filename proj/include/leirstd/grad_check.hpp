#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "leirstd/tensor.hpp"

namespace leirstd {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    /// Coordinates whose stencil straddles a kink; excluded from max_rel_error.
    std::size_t non_smooth = 0;
    bool passed = false;

    std::string summary() const;
};

enum class Stencil { three_point, five_point };

struct GradCheckOptions {
    double step = 1e-3;
    double tolerance = 1e-5;
    /// five_point: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, error O(h^4).
    Stencil stencil = Stencil::five_point;
    /// Five-point only. A coordinate is treated as non-smooth when the one-sided
    /// estimates (3f(x) - 4f(x-h) + f(x-2h)) / 2h and (-3f(x) + 4f(x+h) - f(x+2h)) / 2h
    /// disagree by more than this relative amount after every refinement.
    /// 0 disables the test.
    double kink_threshold = 1e-5;
    /// Fraction of coordinates allowed to be non-smooth before the check fails.
    double max_non_smooth_fraction = 0.05;
    /// Times the step shrinks tenfold before a coordinate is declared
    /// non-smooth. Smooth coordinates settle; a kink inside the stencil does not.
    std::size_t refinements = 2;
};

/// Scalar-valued closure over a list of leaf tensors.
using GradClosure = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `fn` with central differences for
/// every element of every input. Relative error per element is
/// |a - b| / max(|a|, |b|, 1e-8). Throws DeterminismError if two
/// evaluations at the same point differ.
/// Non-smooth coordinates are detected from function values alone, so a
/// wrong analytic gradient cannot be masked by them.
GradCheckReport grad_check(const GradClosure& fn, const std::vector<Tensor>& inputs, GradCheckOptions options = {});

/// Relative error used by the checker.
double relative_error(double analytic, double numeric);

}  // namespace leirstd
