#include "leirstd/model.hpp"

#include <bit>
#include <cmath>

#include "leirstd/error.hpp"

namespace leirstd {

using namespace blocks;

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("model config: " + what);
    };
    need(in_channels >= 1, "in_channels must be positive");
    need(widths.size() == 4, "need four widths (stem, P3, P4, P5)");
    for (std::size_t w : widths) need(w >= 2 && w % 2 == 0, "widths must be even and positive");
    need(depths[0] >= 1 && depths[1] >= 1, "stage depths must be positive");
    need(expansion >= 1, "expansion must be positive");
    need(kernel % 2 == 1, "kernel must be odd");
    need(strides[0] >= 4 && std::has_single_bit(strides[0]), "first stride must be a power of two >= 4");
    need(strides[1] == 2 * strides[0] && strides[2] == 2 * strides[1], "strides must double per scale");
    need(input_size >= strides[2] && input_size % strides[2] == 0,
         "input size " + std::to_string(input_size) + " is not a multiple of stride " + std::to_string(strides[2]));
    need(reg_bins >= 2, "need at least two regression bins");
    need(num_classes >= 1, "need at least one class");
    need(class_prior > 0 && class_prior < 1, "class prior must lie in (0, 1)");
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.strides = {4, 8, 16};
    return cfg;
}

ModelConfig full_scale_config() {
    ModelConfig cfg;
    cfg.input_size = 640;
    cfg.widths = {16, 64, 128, 256};
    return cfg;
}

struct Detector::Impl {
    struct DeepStage {
        ConvBnAct down;
        std::vector<BSBlock> blocks;
    };
    struct Head {
        ConvBnAct cbs;
        Conv pred;
    };

    ConvBnAct stem;
    std::vector<ConvBnAct> pre_down;
    std::vector<MBConv> shallow;
    std::vector<DeepStage> deep;
    AVCStem td4, out3, out4, out5;
    GSConv down3, down4;
    std::vector<Head> heads;

    Impl(ParamStore& store, const ModelConfig& c)
        : stem(store, "stem", c.in_channels, c.widths[0], 3, 2),
          td4(store, "neck.td4", AVCStemConfig::make(c.widths[3] + c.widths[2], c.widths[2])),
          out3(store, "neck.out3", AVCStemConfig::make(c.widths[2] + c.widths[1], c.widths[1])),
          out4(store, "neck.out4", AVCStemConfig::make(c.widths[1] + c.widths[2], c.widths[2])),
          out5(store, "neck.out5", AVCStemConfig::make(c.widths[2] + c.widths[3], c.widths[3])),
          down3(store, "neck.down3", {c.widths[1], c.widths[1] / 2, 2, 2}),
          down4(store, "neck.down4", {c.widths[2], c.widths[2] / 2, 2, 2}) {
        const int extra = std::countr_zero(c.strides[0]) - 2;
        for (int i = 0; i < extra; ++i)
            pre_down.emplace_back(store, "down" + std::to_string(i), c.widths[0], c.widths[0], 3, 2);
        for (std::size_t i = 0; i < c.depths[0]; ++i) {
            MBConvConfig m{i == 0 ? c.widths[0] : c.widths[1], c.widths[1], c.expansion, c.kernel, i == 0 ? 2u : 1u,
                           c.mbconv_dropout, c.cbam_reduction};
            shallow.emplace_back(store, "p3.mb" + std::to_string(i), m);
        }
        for (std::size_t level = 2; level <= 3; ++level) {
            const std::string prefix = "p" + std::to_string(level + 2);
            DeepStage stage{ConvBnAct(store, prefix + ".down", c.widths[level - 1], c.widths[level], 3, 2), {}};
            for (std::size_t i = 0; i < c.depths[1]; ++i)
                stage.blocks.emplace_back(store, prefix + ".bs" + std::to_string(i),
                                          BSConfig{c.widths[level], c.partial_ratio, 2, c.bs_dropout});
            deep.push_back(std::move(stage));
        }
        for (std::size_t s = 0; s < 3; ++s) {
            const std::size_t w = c.widths[s + 1];
            const std::string prefix = "head" + std::to_string(s);
            heads.push_back({ConvBnAct(store, prefix + ".cbs", w, w, 3, 1),
                             Conv(store, prefix + ".pred", w, c.head_channels(), 1, 1, 1, true)});
            auto bias = store.get(prefix + ".pred.bias").value.mutable_data();
            const double prior = std::log(c.class_prior / (1.0 - c.class_prior));
            for (std::size_t k = 0; k < c.num_classes; ++k) bias[k] = prior;
        }
    }
};

Detector::Detector(ParamStore& store, const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    impl_ = std::make_shared<const Impl>(store, cfg_);
}

HeadOutputs Detector::forward(const Tensor& images, ForwardContext& ctx) const {
    const Shape s = images.shape();
    if (s.c != cfg_.in_channels || s.h != cfg_.input_size || s.w != cfg_.input_size) {
        throw DimensionError("detector expects (n, " + std::to_string(cfg_.in_channels) + ", " +
                             std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "), got " +
                             s.str());
    }
    const Impl& m = *impl_;
    Tensor x = m.stem.forward(images, ctx);
    for (const auto& d : m.pre_down) x = d.forward(x, ctx);
    for (const auto& b : m.shallow) x = b.forward(x, ctx);
    const Tensor p3 = x;
    std::array<Tensor, 2> deep_out;
    for (std::size_t i = 0; i < 2; ++i) {
        x = m.deep[i].down.forward(x, ctx);
        for (const auto& b : m.deep[i].blocks) x = b.forward(x, ctx);
        deep_out[i] = x;
    }
    const Tensor& p4 = deep_out[0];
    const Tensor& p5 = deep_out[1];

    auto cat = [](const Tensor& a, const Tensor& b) {
        const Tensor parts[] = {a, b};
        return ops::concat_channels(parts);
    };
    const Tensor td4 = m.td4.forward(cat(ops::upsample_nearest(p5, 2), p4), ctx);
    const Tensor o3 = m.out3.forward(cat(ops::upsample_nearest(td4, 2), p3), ctx);
    const Tensor o4 = m.out4.forward(cat(m.down3.forward(o3, ctx), td4), ctx);
    const Tensor o5 = m.out5.forward(cat(m.down4.forward(o4, ctx), p5), ctx);

    HeadOutputs out;
    const Tensor levels[] = {o3, o4, o5};
    for (std::size_t i = 0; i < 3; ++i) out.maps[i] = m.heads[i].pred.forward(m.heads[i].cbs.forward(levels[i], ctx));
    return out;
}

LayerList Detector::describe(std::size_t batch) const {
    const Impl& m = *impl_;
    LayerList layers;
    Shape s{batch, cfg_.in_channels, cfg_.input_size, cfg_.input_size};
    s = m.stem.describe(s, layers);
    for (const auto& d : m.pre_down) s = d.describe(s, layers);
    for (const auto& b : m.shallow) s = b.describe(s, layers);
    const Shape p3 = s;
    std::array<Shape, 2> deep_out;
    for (std::size_t i = 0; i < 2; ++i) {
        s = m.deep[i].down.describe(s, layers);
        for (const auto& b : m.deep[i].blocks) s = b.describe(s, layers);
        deep_out[i] = s;
    }
    auto cat = [](Shape a, const Shape& b) {
        a.c += b.c;
        return a;
    };
    auto up = [](Shape a) {
        a.h *= 2;
        a.w *= 2;
        return a;
    };
    const Shape td4 = m.td4.describe(cat(up(deep_out[1]), deep_out[0]), layers);
    const Shape o3 = m.out3.describe(cat(up(td4), p3), layers);
    const Shape o4 = m.out4.describe(cat(m.down3.describe(o3, layers), td4), layers);
    const Shape o5 = m.out5.describe(cat(m.down4.describe(o4, layers), deep_out[1]), layers);
    const Shape levels[] = {o3, o4, o5};
    for (std::size_t i = 0; i < 3; ++i) m.heads[i].pred.describe(m.heads[i].cbs.describe(levels[i], layers), layers);
    return layers;
}

CostReport count_model(const ModelConfig& cfg) {
    ParamStore store;
    const Detector model(store, cfg);
    CostReport report = account(model.describe());
    if (report.total.params != store.scalar_count()) {
        throw AccountingError("described parameters (" + std::to_string(report.total.params) +
                              ") differ from allocated (" + std::to_string(store.scalar_count()) + ")");
    }
    return report;
}

}  // namespace leirstd
