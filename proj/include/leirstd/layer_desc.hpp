#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace leirstd {

/// Static description of one costed layer, emitted by blocks while walking
/// their graph at a given input shape. `kind` selects the accounting rule.
struct LayerDesc {
    std::string name;
    std::string kind;  // "conv", "bn", "pool", "sample", "scalar"

    // conv
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t k = 0;
    std::size_t groups = 1;
    bool bias = false;

    // output extent (conv) or input extent (bn, pool); sample uses h_out, w_out
    std::size_t channels = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t points = 0;  // sample: sampling points per location
    std::size_t count = 0;   // scalar: trainable scalars

    /// Reapplication of weights already listed; costs Flops but no parameters.
    bool shared = false;

    /// Optional annotation, e.g. the partial-convolution Flops ratio.
    std::string note;
};

using LayerList = std::vector<LayerDesc>;

}  // namespace leirstd
