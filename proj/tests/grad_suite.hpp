#pragma once

#include <string>
#include <vector>

#include "leirstd/grad_check.hpp"
#include "leirstd/tensor.hpp"

namespace testutil {

struct NamedCheck {
    std::string name;
    leirstd::GradCheckReport report;
};

/// Finite-difference checks of every differentiable primitive on input `s`.
/// Needs an even channel count and at least 6 x 6 spatial extent.
std::vector<NamedCheck> primitive_gradients(leirstd::Shape s, std::uint64_t seed);

/// Same for every block, in training mode with a fixed dropout seed. Needs a
/// channel count divisible by 4.
std::vector<NamedCheck> block_gradients(leirstd::Shape s, std::uint64_t seed);

}  // namespace testutil
