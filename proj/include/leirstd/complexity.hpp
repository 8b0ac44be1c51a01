#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "leirstd/layer_desc.hpp"

namespace leirstd {

/// Multiply-accumulate counts as two Flops throughout.
struct Cost {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

struct CostEntry {
    std::string name;
    std::string kind;
    Cost cost;
    std::string note;
};

struct CostReport {
    std::vector<CostEntry> layers;
    Cost total;

    std::string table() const;
    std::string csv() const;
};

Cost count_conv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t h_out, std::size_t w_out,
                std::size_t groups = 1, bool bias = false);

struct PConvCost {
    Cost cost;
    /// Flops relative to a full-width k x k convolution at the same extent.
    double ratio_vs_std = 0.0;
};

PConvCost count_pconv(std::size_t c, double r, std::size_t k, std::size_t h, std::size_t w);

/// Cost of one described layer. Throws AccountingError for kinds without a rule.
Cost count_layer(const LayerDesc& layer);

/// Sums per-layer costs. Layers flagged `shared` contribute Flops only.
CostReport account(const LayerList& layers);

}  // namespace leirstd
