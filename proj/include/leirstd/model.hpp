#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "leirstd/blocks.hpp"
#include "leirstd/complexity.hpp"
#include "leirstd/params.hpp"

namespace leirstd {

struct ModelConfig {
    std::size_t input_size = 96;
    std::size_t in_channels = 1;
    /// Stem width, then one width per pyramid level (P3, P4, P5).
    std::vector<std::size_t> widths{8, 16, 32, 64};
    /// MBConv repeats in the shallow stage, BSblock repeats in each deep stage.
    std::array<std::size_t, 2> depths{1, 2};
    std::size_t expansion = 6;
    std::size_t kernel = 3;
    std::array<std::size_t, 3> strides{8, 16, 32};
    std::size_t reg_bins = 8;
    std::size_t num_classes = 1;
    double mbconv_dropout = 0.1;
    double bs_dropout = 0.2;
    double partial_ratio = 0.25;
    std::size_t cbam_reduction = 4;
    std::size_t vk_points = 5;
    /// Prior probability the class bias is initialised to.
    double class_prior = 0.01;

    /// Throws ConfigError on inconsistent widths, strides or input size.
    void validate() const;
    std::size_t head_channels() const { return num_classes + 4 * reg_bins; }
    std::size_t grid(std::size_t scale) const { return input_size / strides[scale]; }
};

/// The small-target preset used for overfitting experiments.
ModelConfig tiny_config();

/// 640 x 640 input with nano-detector stage widths, for cost comparisons.
ModelConfig full_scale_config();

/// Per-scale raw head maps, (n, num_classes + 4 * bins, H / stride, W / stride).
/// Channel layout: class logits, then bins for the left, top, right and
/// bottom distances.
struct HeadOutputs {
    std::array<Tensor, 3> maps;
};

class Detector {
public:
    Detector(ParamStore& store, const ModelConfig& cfg);

    HeadOutputs forward(const Tensor& images, blocks::ForwardContext& ctx) const;
    /// Walks the same graph as forward for an input of the configured size.
    LayerList describe(std::size_t batch = 1) const;
    const ModelConfig& config() const { return cfg_; }

private:
    struct Impl;
    ModelConfig cfg_;
    std::shared_ptr<const Impl> impl_;
};

/// Parameter and Flops totals of the network at its configured input size.
/// Throws AccountingError if the described parameters differ from the ones
/// actually allocated.
CostReport count_model(const ModelConfig& cfg);

}  // namespace leirstd
