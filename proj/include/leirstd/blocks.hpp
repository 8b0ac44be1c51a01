#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "leirstd/layer_desc.hpp"
#include "leirstd/ops.hpp"
#include "leirstd/params.hpp"
#include "leirstd/tensor.hpp"

namespace leirstd::blocks {

/// Per-pass state: mode flag plus a seed stream for dropout masks.
struct ForwardContext {
    bool training = false;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    std::uint64_t next_seed() { return derive_seed(seed, stream++); }
};

// ---------------------------------------------------------------------------
// Layers

class Conv {
public:
    Conv(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
         std::size_t stride = 1, std::size_t groups = 1, bool bias = false);

    Tensor forward(const Tensor& x) const;
    Shape describe(Shape in, LayerList& out) const;

    std::size_t c_in() const { return c_in_; }
    std::size_t c_out() const { return c_out_; }

private:
    std::string name_;
    std::size_t c_in_, c_out_, k_, stride_, groups_;
    Tensor weight_;
    Tensor bias_;
};

class BatchNorm {
public:
    BatchNorm(ParamStore& store, const std::string& name, std::size_t channels);

    Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;

private:
    std::string name_;
    Tensor gamma_, beta_;
    std::shared_ptr<ops::BatchNormState> state_;
};

/// Convolution, batch norm and optional SiLU ("CBS").
class ConvBnAct {
public:
    ConvBnAct(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
              std::size_t stride = 1, std::size_t groups = 1, bool act = true);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;

private:
    Conv conv_;
    BatchNorm bn_;
    bool act_;
};

// ---------------------------------------------------------------------------
// Attention

/// Channel attention followed by spatial attention.
class Cbam {
public:
    Cbam(ParamStore& store, const std::string& name, std::size_t channels, std::size_t reduction);

    Tensor forward(const Tensor& x) const;
    /// The two gates for inspection: channel gate (n, c, 1, 1) and the
    /// spatial gate (n, 1, h, w) computed on the channel-gated input.
    std::pair<Tensor, Tensor> gates(const Tensor& x) const;
    Shape describe(Shape in, LayerList& out) const;

private:
    Tensor channel_gate(const Tensor& x) const;
    Tensor spatial_gate(const Tensor& x) const;

    std::string name_;
    std::size_t channels_;
    Conv fc1_, fc2_, spatial_;
};

// ---------------------------------------------------------------------------
// Inverted bottleneck

struct MBConvConfig {
    std::size_t c_in = 16;
    std::size_t c_out = 16;
    std::size_t expansion = 6;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    double dropout_p = 0.1;
    std::size_t cbam_reduction = 4;
};

class MBConv {
public:
    MBConv(ParamStore& store, const std::string& name, const MBConvConfig& cfg);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;

    std::size_t hidden_width() const { return cfg_.expansion * cfg_.c_in; }
    bool has_residual() const { return cfg_.c_in == cfg_.c_out && cfg_.stride == 1; }
    const MBConvConfig& config() const { return cfg_; }

private:
    MBConvConfig cfg_;
    ConvBnAct expand_, depthwise_;
    Cbam cbam_;
    Conv project_;
    BatchNorm project_bn_;
};

// ---------------------------------------------------------------------------
// Partial convolution bottleneck

struct BSConfig {
    std::size_t c = 16;
    double partial_ratio = 0.25;
    std::size_t mlp_expansion = 2;
    double dropout_p = 0.2;
};

/// Channels processed by the partial convolution: ceil(r * c).
std::size_t partial_channels(std::size_t c, double ratio);

class PConv {
public:
    PConv(ParamStore& store, const std::string& name, std::size_t channels, double ratio);

    Tensor forward(const Tensor& x) const;
    Shape describe(Shape in, LayerList& out) const;
    std::size_t convolved_channels() const { return cp_; }

private:
    std::size_t c_, cp_;
    double ratio_;
    Conv conv_;
};

class BSBlock {
public:
    BSBlock(ParamStore& store, const std::string& name, const BSConfig& cfg);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;
    const PConv& pconv() const { return pconv_; }

private:
    BSConfig cfg_;
    PConv pconv_;
    Conv mlp_expand_, mlp_project_;
};

// ---------------------------------------------------------------------------
// Shuffle convolution

struct GSConvConfig {
    std::size_t c_in = 16;
    std::size_t c_out = 16;  // per pathway; the block emits 2 * c_out channels
    std::size_t stride = 2;
    std::size_t shuffle_groups = 2;
};

class GSConv {
public:
    GSConv(ParamStore& store, const std::string& name, const GSConvConfig& cfg);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;
    std::size_t out_channels() const { return 2 * cfg_.c_out; }

private:
    GSConvConfig cfg_;
    ConvBnAct conv_;
    Conv depthwise_;
};

/// Two stride-1 shuffle convolutions with an identity skip.
class GSBottleneck {
public:
    GSBottleneck(ParamStore& store, const std::string& name, std::size_t channels);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    Shape describe(Shape in, LayerList& out) const;

private:
    std::size_t c_;
    GSConv first_, second_;
};

// ---------------------------------------------------------------------------
// Variable-kernel convolution

struct VKConvConfig {
    std::size_t c_in = 16;
    std::size_t c_out = 16;
    std::size_t num_points = 5;
    std::size_t stride = 1;
    double offset_scale = 0.1;
};

/// Raw sampling lattice: point i sits at (i / side, i % side) with
/// side = ceil(sqrt(K)).
std::vector<std::array<long, 2>> vk_raw_coords(std::size_t k);
/// Raw lattice shifted by its rounded centroid.
std::vector<std::array<long, 2>> vk_base_coords(std::size_t k);

class VKConv {
public:
    VKConv(ParamStore& store, const std::string& name, const VKConvConfig& cfg);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    /// Absolute sampling positions (n, 2K, h_out, w_out), rows then columns.
    Tensor sampling_coords(const Tensor& x) const;
    /// Learned per-point offsets before scaling, (n, 2K, h_out, w_out).
    Tensor offsets(const Tensor& x) const;
    /// Gathered samples contracted over the K points, before the projection.
    Tensor sample_weighted(const Tensor& x) const;
    Shape describe(Shape in, LayerList& out) const;

    std::size_t offset_channels() const { return 2 * cfg_.num_points; }
    const VKConvConfig& config() const { return cfg_; }
    /// Base positions P0 + Pn for an output grid, (1, 2K, h_out, w_out).
    Tensor base_grid(std::size_t h_out, std::size_t w_out) const;

private:
    std::size_t out_extent(std::size_t in) const { return (in - 1) / cfg_.stride + 1; }

    std::string name_;
    VKConvConfig cfg_;
    std::vector<std::array<long, 2>> pattern_;
    Conv offset_conv_;
    Tensor alpha_;
    Conv point_weights_;
    ConvBnAct project_;
};

// ---------------------------------------------------------------------------
// Attention-gated fusion stem

struct AVCStemConfig {
    std::size_t c_in = 16;
    std::size_t c_out = 16;
    std::size_t branch_a = 8;  // plain CBS branch width
    std::size_t branch_b = 8;  // gated bottleneck branch width (even)
    std::size_t vk_points = 5;
    double vk_offset_scale = 0.1;

    static AVCStemConfig make(std::size_t c_in, std::size_t c_out);
};

class AVCStem {
public:
    AVCStem(ParamStore& store, const std::string& name, const AVCStemConfig& cfg);

    Tensor forward(const Tensor& x, ForwardContext& ctx) const;
    /// sigmoid(conv1x1(x) * conv3x3(x)), (n, branch_b, h, w).
    Tensor gate(const Tensor& x) const;
    Shape describe(Shape in, LayerList& out) const;

private:
    AVCStemConfig cfg_;
    ConvBnAct branch_a_, branch_b_in_;
    GSBottleneck bottleneck_;
    Conv gate_pointwise_, gate_spatial_;
    VKConv vk_;
};

}  // namespace leirstd::blocks
