#include "leirstd/blocks.hpp"

#include <cmath>
#include <string>

namespace leirstd::blocks {
namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

void expect_channels(const Tensor& x, std::size_t c, const char* block) {
    if (x.shape().c != c) {
        throw DimensionError(std::string(block) + ": expected " + std::to_string(c) + " input channels, got " +
                             std::to_string(x.shape().c));
    }
}

void expect_channels(const Shape& s, std::size_t c, const char* block) {
    if (s.c != c) {
        throw DimensionError(std::string(block) + ": expected " + std::to_string(c) + " input channels, got " +
                             std::to_string(s.c));
    }
}

const MBConvConfig& validated(const MBConvConfig& cfg) {
    if (cfg.expansion < 1) throw ConfigError("MBConv: expansion must be >= 1");
    if (cfg.kernel % 2 == 0) throw ConfigError("MBConv: kernel must be odd");
    if (cfg.stride < 1) throw ConfigError("MBConv: stride must be >= 1");
    return cfg;
}

const BSConfig& validated(const BSConfig& cfg) {
    if (!(cfg.partial_ratio > 0.0 && cfg.partial_ratio <= 1.0)) throw ConfigError("BSblock: need 0 < r <= 1");
    if (cfg.mlp_expansion < 1) throw ConfigError("BSblock: mlp_expansion must be >= 1");
    return cfg;
}

const GSConvConfig& validated(const GSConvConfig& cfg) {
    if (cfg.stride < 1) throw ConfigError("GSConv: stride must be >= 1");
    if ((2 * cfg.c_out) % cfg.shuffle_groups != 0) {
        throw ConfigError("GSConv: shuffle groups must divide 2 * c_out");
    }
    return cfg;
}

const VKConvConfig& validated(const VKConvConfig& cfg) {
    if (cfg.num_points < 1) throw ConfigError("VKConv: need at least one sampling point");
    if (!(cfg.offset_scale > 0.0)) throw ConfigError("VKConv: offset scale must be positive");
    if (cfg.stride < 1) throw ConfigError("VKConv: stride must be >= 1");
    return cfg;
}

const AVCStemConfig& validated(const AVCStemConfig& cfg) {
    if (cfg.branch_a == 0 || cfg.branch_b == 0) throw ConfigError("AVCStem: branch widths must be positive");
    if (cfg.branch_b % 2 != 0) throw ConfigError("AVCStem: gated branch width must be even");
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------

Conv::Conv(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
           std::size_t stride, std::size_t groups, bool bias)
    : name_(name), c_in_(c_in), c_out_(c_out), k_(k), stride_(stride), groups_(groups) {
    if (c_in == 0 || c_out == 0 || k == 0) throw ConfigError(name + ": zero-sized convolution");
    if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
        throw ConfigError(name + ": groups=" + std::to_string(groups) + " must divide c_in=" + std::to_string(c_in) +
                          " and c_out=" + std::to_string(c_out));
    }
    weight_ = store.add(name + ".weight", {c_out, c_in / groups, k, k}, Init::fan_in_uniform, true);
    if (bias) bias_ = store.add(name + ".bias", {1, c_out, 1, 1}, Init::zeros, false);
}

Tensor Conv::forward(const Tensor& x) const {
    return ops::conv2d(x, weight_, bias_, {stride_, k_ / 2, groups_});
}

Shape Conv::describe(Shape in, LayerList& out) const {
    expect_channels(in, c_in_, name_.c_str());
    const Shape o{in.n, c_out_, conv_out(in.h, k_, stride_, k_ / 2), conv_out(in.w, k_, stride_, k_ / 2)};
    LayerDesc d;
    d.name = name_;
    d.kind = "conv";
    d.c_in = c_in_;
    d.c_out = c_out_;
    d.k = k_;
    d.groups = groups_;
    d.bias = bias_.defined();
    d.channels = c_out_;
    d.h = o.h;
    d.w = o.w;
    out.push_back(d);
    return o;
}

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, std::size_t channels)
    : name_(name),
      gamma_(store.add(name + ".gamma", {1, channels, 1, 1}, Init::ones, false)),
      beta_(store.add(name + ".beta", {1, channels, 1, 1}, Init::zeros, false)),
      state_(store.add_batch_norm_state(name, channels)) {}

Tensor BatchNorm::forward(const Tensor& x, const ForwardContext& ctx) const {
    return ops::batch_norm(x, gamma_, beta_, *state_, ctx.training);
}

Shape BatchNorm::describe(Shape in, LayerList& out) const {
    LayerDesc d;
    d.name = name_;
    d.kind = "bn";
    d.channels = in.c;
    d.h = in.h;
    d.w = in.w;
    out.push_back(d);
    return in;
}

ConvBnAct::ConvBnAct(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                     std::size_t stride, std::size_t groups, bool act)
    : conv_(store, name + ".conv", c_in, c_out, k, stride, groups, false),
      bn_(store, name + ".bn", c_out),
      act_(act) {}

Tensor ConvBnAct::forward(const Tensor& x, ForwardContext& ctx) const {
    Tensor y = bn_.forward(conv_.forward(x), ctx);
    return act_ ? ops::silu(y) : y;
}

Shape ConvBnAct::describe(Shape in, LayerList& out) const { return bn_.describe(conv_.describe(in, out), out); }

// ---------------------------------------------------------------------------

namespace {
std::size_t cbam_hidden(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels < reduction || channels % reduction != 0) {
        throw ConfigError("CBAM: reduction " + std::to_string(reduction) + " must divide channel count " +
                          std::to_string(channels));
    }
    return channels / reduction;
}
}  // namespace

Cbam::Cbam(ParamStore& store, const std::string& name, std::size_t channels, std::size_t reduction)
    : name_(name),
      channels_(channels),
      fc1_(store, name + ".fc1", channels, cbam_hidden(channels, reduction), 1),
      fc2_(store, name + ".fc2", channels / reduction, channels, 1),
      spatial_(store, name + ".spatial", 2, 1, 7) {}

Tensor Cbam::channel_gate(const Tensor& x) const {
    auto mlp = [&](const Tensor& pooled) { return fc2_.forward(ops::relu(fc1_.forward(pooled))); };
    return ops::sigmoid(
        ops::add(mlp(ops::pool_global(x, ops::Pool::avg)), mlp(ops::pool_global(x, ops::Pool::max))));
}

Tensor Cbam::spatial_gate(const Tensor& x) const {
    const Tensor stats[] = {ops::reduce_channels(x, ops::Pool::avg), ops::reduce_channels(x, ops::Pool::max)};
    return ops::sigmoid(spatial_.forward(ops::concat_channels(stats)));
}

std::pair<Tensor, Tensor> Cbam::gates(const Tensor& x) const {
    expect_channels(x, channels_, "CBAM");
    Tensor cg = channel_gate(x);
    return {cg, spatial_gate(ops::mul(x, cg))};
}

Tensor Cbam::forward(const Tensor& x) const {
    expect_channels(x, channels_, "CBAM");
    const Tensor refined = ops::mul(x, channel_gate(x));
    return ops::mul(refined, spatial_gate(refined));
}

Shape Cbam::describe(Shape in, LayerList& out) const {
    expect_channels(in, channels_, "CBAM");
    // avg + max pooling over space, then over channels
    for (const char* which : {".avgpool", ".maxpool"}) {
        LayerDesc d;
        d.name = name_ + which;
        d.kind = "pool";
        d.channels = in.c;
        d.h = in.h;
        d.w = in.w;
        out.push_back(d);
    }
    Shape pooled{in.n, in.c, 1, 1};
    for (int pass = 0; pass < 2; ++pass) {
        const std::size_t first = out.size();
        fc2_.describe(fc1_.describe(pooled, out), out);
        if (pass == 1)
            for (std::size_t i = first; i < out.size(); ++i) out[i].shared = true;
    }
    for (const char* which : {".chanavg", ".chanmax"}) {
        LayerDesc d;
        d.name = name_ + which;
        d.kind = "pool";
        d.channels = in.c;
        d.h = in.h;
        d.w = in.w;
        out.push_back(d);
    }
    spatial_.describe({in.n, 2, in.h, in.w}, out);
    return in;
}

// ---------------------------------------------------------------------------

MBConv::MBConv(ParamStore& store, const std::string& name, const MBConvConfig& cfg)
    : cfg_(validated(cfg)),
      expand_(store, name + ".expand", cfg.c_in, cfg.expansion * cfg.c_in, 1),
      depthwise_(store, name + ".dw", cfg.expansion * cfg.c_in, cfg.expansion * cfg.c_in, cfg.kernel, cfg.stride,
                 cfg.expansion * cfg.c_in),
      cbam_(store, name + ".cbam", cfg.expansion * cfg.c_in, cfg.cbam_reduction),
      project_(store, name + ".project", cfg.expansion * cfg.c_in, cfg.c_out, 1),
      project_bn_(store, name + ".project_bn", cfg.c_out) {}

Tensor MBConv::forward(const Tensor& x, ForwardContext& ctx) const {
    expect_channels(x, cfg_.c_in, "MBConv");
    Tensor h = depthwise_.forward(expand_.forward(x, ctx), ctx);
    h = project_bn_.forward(project_.forward(cbam_.forward(h)), ctx);
    h = ops::dropout(h, cfg_.dropout_p, ctx.training, ctx.next_seed());
    return has_residual() ? ops::add(h, x) : h;
}

Shape MBConv::describe(Shape in, LayerList& out) const {
    Shape s = depthwise_.describe(expand_.describe(in, out), out);
    s = cbam_.describe(s, out);
    return project_bn_.describe(project_.describe(s, out), out);
}

// ---------------------------------------------------------------------------

std::size_t partial_channels(std::size_t c, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("partial ratio must satisfy 0 < r <= 1");
    // Guard against 0.25 * 8 = 2.0000000000000004 style rounding.
    const double exact = ratio * static_cast<double>(c);
    const double rounded = std::round(exact);
    const auto cp = static_cast<std::size_t>(std::abs(exact - rounded) < 1e-9 ? rounded : std::ceil(exact));
    if (cp == 0) throw ConfigError("partial convolution would process zero channels");
    return cp;
}

PConv::PConv(ParamStore& store, const std::string& name, std::size_t channels, double ratio)
    : c_(channels),
      cp_(partial_channels(channels, ratio)),
      ratio_(ratio),
      conv_(store, name + ".conv", cp_, cp_, 3) {}

Tensor PConv::forward(const Tensor& x) const {
    expect_channels(x, c_, "PConv");
    if (cp_ == c_) return conv_.forward(x);
    const Tensor parts[] = {conv_.forward(ops::slice_channels(x, 0, cp_)), ops::slice_channels(x, cp_, c_)};
    return ops::concat_channels(parts);
}

Shape PConv::describe(Shape in, LayerList& out) const {
    expect_channels(in, c_, "PConv");
    conv_.describe({in.n, cp_, in.h, in.w}, out);
    const double frac = static_cast<double>(cp_) / static_cast<double>(c_);
    out.back().note = "pconv r=" + std::to_string(ratio_) + " flops_ratio=" + std::to_string(frac * frac);
    return in;
}

BSBlock::BSBlock(ParamStore& store, const std::string& name, const BSConfig& cfg)
    : cfg_(validated(cfg)),
      pconv_(store, name + ".pconv", cfg.c, cfg.partial_ratio),
      mlp_expand_(store, name + ".mlp1", cfg.c, cfg.mlp_expansion * cfg.c, 1),
      mlp_project_(store, name + ".mlp2", cfg.mlp_expansion * cfg.c, cfg.c, 1) {}

Tensor BSBlock::forward(const Tensor& x, ForwardContext& ctx) const {
    expect_channels(x, cfg_.c, "BSblock");
    Tensor h = mlp_project_.forward(ops::silu(mlp_expand_.forward(pconv_.forward(x))));
    h = ops::dropout(h, cfg_.dropout_p, ctx.training, ctx.next_seed());
    return ops::add(x, h);
}

Shape BSBlock::describe(Shape in, LayerList& out) const {
    Shape s = pconv_.describe(in, out);
    return mlp_project_.describe(mlp_expand_.describe(s, out), out);
}

// ---------------------------------------------------------------------------

GSConv::GSConv(ParamStore& store, const std::string& name, const GSConvConfig& cfg)
    : cfg_(validated(cfg)),
      conv_(store, name + ".cbs", cfg.c_in, cfg.c_out, 3, cfg.stride),
      depthwise_(store, name + ".dw", cfg.c_out, cfg.c_out, 3, 1, cfg.c_out) {}

Tensor GSConv::forward(const Tensor& x, ForwardContext& ctx) const {
    expect_channels(x, cfg_.c_in, "GSConv");
    const Tensor fc = conv_.forward(x, ctx);
    const Tensor both[] = {fc, depthwise_.forward(fc)};
    return ops::channel_shuffle(ops::concat_channels(both), cfg_.shuffle_groups);
}

Shape GSConv::describe(Shape in, LayerList& out) const {
    Shape s = depthwise_.describe(conv_.describe(in, out), out);
    s.c = 2 * cfg_.c_out;
    return s;
}

GSBottleneck::GSBottleneck(ParamStore& store, const std::string& name, std::size_t channels)
    : c_(channels),
      first_(store, name + ".gs1", {channels, channels / 2, 1, 2}),
      second_(store, name + ".gs2", {channels, channels / 2, 1, 2}) {
    if (channels < 2 || channels % 2 != 0) {
        throw ConfigError("GS bottleneck: channel count " + std::to_string(channels) + " must be even");
    }
}

Tensor GSBottleneck::forward(const Tensor& x, ForwardContext& ctx) const {
    expect_channels(x, c_, "GS bottleneck");
    return ops::add(x, second_.forward(first_.forward(x, ctx), ctx));
}

Shape GSBottleneck::describe(Shape in, LayerList& out) const {
    return second_.describe(first_.describe(in, out), out);
}

// ---------------------------------------------------------------------------

std::vector<std::array<long, 2>> vk_raw_coords(std::size_t k) {
    if (k == 0) throw ConfigError("VKConv: need at least one sampling point");
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
    std::vector<std::array<long, 2>> pts(k);
    for (std::size_t i = 0; i < k; ++i) pts[i] = {static_cast<long>(i / side), static_cast<long>(i % side)};
    return pts;
}

std::vector<std::array<long, 2>> vk_base_coords(std::size_t k) {
    auto pts = vk_raw_coords(k);
    double mr = 0.0, mc = 0.0;
    for (const auto& p : pts) {
        mr += static_cast<double>(p[0]);
        mc += static_cast<double>(p[1]);
    }
    const auto shift_r = static_cast<long>(std::lround(mr / static_cast<double>(k)));
    const auto shift_c = static_cast<long>(std::lround(mc / static_cast<double>(k)));
    for (auto& p : pts) {
        p[0] -= shift_r;
        p[1] -= shift_c;
    }
    return pts;
}

VKConv::VKConv(ParamStore& store, const std::string& name, const VKConvConfig& cfg)
    : name_(name),
      cfg_(validated(cfg)),
      pattern_(vk_base_coords(cfg.num_points)),
      offset_conv_(store, name + ".offset", cfg.c_in, 2 * cfg.num_points, 3, cfg.stride, 1, true),
      alpha_(store.add(name + ".alpha", {1, 1, 1, 1}, Init::ones, false)),
      point_weights_(store, name + ".points", cfg.c_in * cfg.num_points, cfg.c_in, 1, 1, cfg.c_in),
      project_(store, name + ".project", cfg.c_in, cfg.c_out, 1) {
    alpha_.mutable_data()[0] = cfg.offset_scale;
    // Offsets start at zero so the kernel begins on its base lattice.
    auto& w = store.get(name + ".offset.weight").value;
    std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
}

Tensor VKConv::base_grid(std::size_t h_out, std::size_t w_out) const {
    const std::size_t K = cfg_.num_points;
    std::vector<double> grid(2 * K * h_out * w_out);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < h_out; ++i)
            for (std::size_t j = 0; j < w_out; ++j) {
                const std::size_t p = i * w_out + j;
                grid[(2 * k) * h_out * w_out + p] = static_cast<double>(static_cast<long>(i * cfg_.stride) + pattern_[k][0]);
                grid[(2 * k + 1) * h_out * w_out + p] =
                    static_cast<double>(static_cast<long>(j * cfg_.stride) + pattern_[k][1]);
            }
    return Tensor::from({1, 2 * K, h_out, w_out}, std::move(grid));
}

Tensor VKConv::offsets(const Tensor& x) const {
    expect_channels(x, cfg_.c_in, "VKConv");
    return offset_conv_.forward(x);
}

Tensor VKConv::sampling_coords(const Tensor& x) const {
    const Tensor raw = offsets(x);
    for (double v : raw.data()) {
        if (!std::isfinite(v)) throw NumericError("VKConv: non-finite offsets");
    }
    const Tensor scaled = ops::mul(raw, alpha_);
    return ops::add(scaled, base_grid(raw.shape().h, raw.shape().w));
}

Tensor VKConv::sample_weighted(const Tensor& x) const {
    const Tensor coords = sampling_coords(x);
    return point_weights_.forward(ops::bilinear_sample(x, coords));
}

Tensor VKConv::forward(const Tensor& x, ForwardContext& ctx) const {
    return project_.forward(sample_weighted(x), ctx);
}

Shape VKConv::describe(Shape in, LayerList& out) const {
    expect_channels(in, cfg_.c_in, "VKConv");
    const Shape off = offset_conv_.describe(in, out);
    LayerDesc alpha;
    alpha.name = name_ + ".alpha";
    alpha.kind = "scalar";
    alpha.count = 1;
    out.push_back(alpha);
    LayerDesc sample;
    sample.name = name_ + ".sample";
    sample.kind = "sample";
    sample.channels = cfg_.c_in;
    sample.points = cfg_.num_points;
    sample.h = off.h;
    sample.w = off.w;
    out.push_back(sample);
    const Shape s = point_weights_.describe({in.n, cfg_.c_in * cfg_.num_points, off.h, off.w}, out);
    return project_.describe(s, out);
}

// ---------------------------------------------------------------------------

AVCStemConfig AVCStemConfig::make(std::size_t c_in, std::size_t c_out) {
    AVCStemConfig cfg;
    cfg.c_in = c_in;
    cfg.c_out = c_out;
    cfg.branch_b = std::max<std::size_t>(2, (c_out / 2) & ~std::size_t{1});
    cfg.branch_a = std::max<std::size_t>(1, c_out - cfg.branch_b);
    return cfg;
}

AVCStem::AVCStem(ParamStore& store, const std::string& name, const AVCStemConfig& cfg)
    : cfg_(validated(cfg)),
      branch_a_(store, name + ".a", cfg.c_in, cfg.branch_a, 1),
      branch_b_in_(store, name + ".b_in", cfg.c_in, cfg.branch_b, 1),
      bottleneck_(store, name + ".gsb", cfg.branch_b),
      gate_pointwise_(store, name + ".gate1", cfg.c_in, cfg.branch_b, 1),
      gate_spatial_(store, name + ".gate3", cfg.c_in, cfg.branch_b, 3),
      vk_(store, name + ".vk",
          VKConvConfig{cfg.branch_a + cfg.branch_b, cfg.c_out, cfg.vk_points, 1, cfg.vk_offset_scale}) {}

Tensor AVCStem::gate(const Tensor& x) const {
    expect_channels(x, cfg_.c_in, "AVCStem");
    return ops::sigmoid(ops::mul(gate_pointwise_.forward(x), gate_spatial_.forward(x)));
}

Tensor AVCStem::forward(const Tensor& x, ForwardContext& ctx) const {
    expect_channels(x, cfg_.c_in, "AVCStem");
    const Tensor a = branch_a_.forward(x, ctx);
    const Tensor b = bottleneck_.forward(branch_b_in_.forward(x, ctx), ctx);
    const Tensor parts[] = {a, ops::mul(b, gate(x))};
    return vk_.forward(ops::concat_channels(parts), ctx);
}

Shape AVCStem::describe(Shape in, LayerList& out) const {
    expect_channels(in, cfg_.c_in, "AVCStem");
    const Shape a = branch_a_.describe(in, out);
    const Shape b = bottleneck_.describe(branch_b_in_.describe(in, out), out);
    gate_pointwise_.describe(in, out);
    gate_spatial_.describe(in, out);
    return vk_.describe({in.n, a.c + b.c, in.h, in.w}, out);
}

}  // namespace leirstd::blocks
