#include "leirstd/complexity.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "leirstd/blocks.hpp"
#include "leirstd/error.hpp"

namespace leirstd {

Cost count_conv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t h_out, std::size_t w_out,
                std::size_t groups, bool bias) {
    if (c_in == 0 || c_out == 0 || k == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
        throw AccountingError("count_conv: invalid conv geometry");
    }
    const std::uint64_t weights = static_cast<std::uint64_t>(k) * k * c_in * c_out / groups;
    const std::uint64_t plane = static_cast<std::uint64_t>(h_out) * w_out;
    Cost c;
    c.params = weights + (bias ? c_out : 0);
    c.flops = 2 * weights * plane + (bias ? c_out * plane : 0);
    return c;
}

PConvCost count_pconv(std::size_t c, double r, std::size_t k, std::size_t h, std::size_t w) {
    const std::size_t cp = blocks::partial_channels(c, r);
    PConvCost out;
    out.cost = count_conv(cp, cp, k, h, w);
    out.ratio_vs_std = static_cast<double>(out.cost.flops) / static_cast<double>(count_conv(c, c, k, h, w).flops);
    return out;
}

Cost count_layer(const LayerDesc& d) {
    const std::uint64_t plane = static_cast<std::uint64_t>(d.h) * d.w;
    Cost c;
    if (d.kind == "conv") {
        c = count_conv(d.c_in, d.c_out, d.k, d.h, d.w, d.groups, d.bias);
    } else if (d.kind == "bn") {
        // folded into the preceding conv at inference
        c.params = 2 * static_cast<std::uint64_t>(d.channels);
    } else if (d.kind == "pool") {
        c.flops = d.channels * plane;
    } else if (d.kind == "sample") {
        // four taps, one multiply-accumulate each
        c.flops = 8 * static_cast<std::uint64_t>(d.channels) * d.points * plane;
    } else if (d.kind == "scalar") {
        c.params = d.count;
    } else {
        throw AccountingError("no accounting rule for layer '" + d.name + "' of kind '" + d.kind + "'");
    }
    if (d.shared) c.params = 0;
    return c;
}

CostReport account(const LayerList& layers) {
    CostReport report;
    for (const auto& d : layers) {
        const Cost c = count_layer(d);
        report.layers.push_back({d.name, d.kind, c, d.note});
        report.total.params += c.params;
        report.total.flops += c.flops;
    }
    return report;
}

std::string CostReport::table() const {
    std::size_t width = 5;
    for (const auto& e : layers) width = std::max(width, e.name.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(width)) << "layer" << "  " << std::setw(6) << "kind" << std::right
        << std::setw(12) << "params" << std::setw(16) << "flops" << '\n';
    for (const auto& e : layers) {
        out << std::left << std::setw(static_cast<int>(width)) << e.name << "  " << std::setw(6) << e.kind
            << std::right << std::setw(12) << e.cost.params << std::setw(16) << e.cost.flops;
        if (!e.note.empty()) out << "  " << e.note;
        out << '\n';
    }
    out << std::left << std::setw(static_cast<int>(width)) << "total" << "  " << std::setw(6) << "" << std::right
        << std::setw(12) << total.params << std::setw(16) << total.flops << '\n';
    return out.str();
}

std::string CostReport::csv() const {
    std::ostringstream out;
    out << "layer,kind,params,flops\n";
    for (const auto& e : layers) out << e.name << ',' << e.kind << ',' << e.cost.params << ',' << e.cost.flops << '\n';
    out << "total,," << total.params << ',' << total.flops << '\n';
    return out.str();
}

}  // namespace leirstd
