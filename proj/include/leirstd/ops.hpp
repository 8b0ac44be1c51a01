#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "leirstd/tensor.hpp"

/// Differentiable primitives. Every op validates its inputs, computes the
/// forward value eagerly and records a backward closure when any input
/// requires a gradient.
namespace leirstd::ops {

struct ConvOptions {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t groups = 1;
};

/// Zero-padded cross-correlation. `weight` is (c_out, c_in / groups, k, k);
/// `bias`, when defined, is (1, c_out, 1, 1).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions options);
Tensor conv2d(const Tensor& x, const Tensor& weight, ConvOptions options = {});

/// Per-channel k x k convolution; `weight` is (c, 1, k, k).
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad);

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

inline constexpr double kBatchNormEps = 1e-5;

/// Training mode normalizes with biased batch statistics and folds them
/// into `state` (unbiased variance, momentum 0.1). Inference uses `state`.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training,
                  double eps = kBatchNormEps);

enum class Activation { silu, sigmoid, relu };

Tensor activation(const Tensor& x, Activation kind);
inline Tensor silu(const Tensor& x) { return activation(x, Activation::silu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }

double sigmoid(double t);

/// Output channel i reads input channel `shuffle_permutation(c, g)[i]`.
std::vector<std::size_t> shuffle_permutation(std::size_t channels, std::size_t groups);
Tensor channel_shuffle(const Tensor& x, std::size_t groups);

/// Bilinear gather. `coords` is (n, 2K, h_out, w_out) holding absolute
/// (row, col) positions for K sample points; the result is
/// (n, c * K, h_out, w_out) with channel index `ch * K + k`. Positions
/// outside the image read zeros.
Tensor bilinear_sample(const Tensor& x, const Tensor& coords);

enum class Pool { avg, max };

Tensor pool_global(const Tensor& x, Pool kind);
/// Reduction across channels, (n, c, h, w) -> (n, 1, h, w).
Tensor reduce_channels(const Tensor& x, Pool kind);

/// Inverted dropout; the mask is a pure function of `seed`.
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

Tensor concat_channels(std::span<const Tensor> xs);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
std::vector<Tensor> split_channels(const Tensor& x, std::size_t at);

/// Elementwise a + b, where every dimension of b equals a's or is 1.
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise a * b with the same broadcasting rule as `add`.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

/// Sum of all elements as a (1, 1, 1, 1) tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor upsample_nearest(const Tensor& x, std::size_t factor);

struct CellIndex {
    std::size_t n = 0;
    std::size_t y = 0;
    std::size_t x = 0;
};

/// Gathers the channel vectors at the given cells into a (P, c, 1, 1) tensor.
Tensor gather_cells(const Tensor& x, std::span<const CellIndex> cells);

}  // namespace leirstd::ops
