#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "leirstd/grad_check.hpp"
#include "leirstd/ops.hpp"
#include "leirstd/rng.hpp"
#include "leirstd/tensor.hpp"

namespace testutil {

using leirstd::Shape;
using leirstd::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    leirstd::Rng rng(seed);
    std::vector<double> v(shape.size());
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(shape, std::move(v), requires_grad);
}

/// Random values kept at least `gap` away from zero (for kinks at 0).
inline Tensor random_away_from_zero(Shape shape, std::uint64_t seed, double gap = 0.05, bool requires_grad = false) {
    leirstd::Rng rng(seed);
    std::vector<double> v(shape.size());
    for (auto& x : v) {
        const double mag = rng.uniform(gap, 1.0);
        x = rng.uniform() < 0.5 ? -mag : mag;
    }
    return Tensor::from(shape, std::move(v), requires_grad);
}

/// Fixed random projection turning any tensor into a scalar loss.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
    return leirstd::ops::sum(leirstd::ops::mul(y, random_tensor(y.shape(), seed)));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Direct six-loop cross-correlation, independent of the library path.
inline std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const std::vector<double>& bias,
                                      std::size_t stride, std::size_t pad, std::size_t groups) {
    const Shape xs = x.shape(), ws = w.shape();
    const std::size_t k = ws.h;
    const std::size_t ho = (xs.h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (xs.w + 2 * pad - k) / stride + 1;
    const std::size_t cin_g = xs.c / groups, cout_g = ws.n / groups;
    std::vector<double> out(xs.n * ws.n * ho * wo, 0.0);
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t co = 0; co < ws.n; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[co];
                    const std::size_t g = co / cout_g;
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w))
                                    continue;
                                acc += w.at(co, ci, ky, kx) *
                                       x.at(n, g * cin_g + ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                            }
                    out[((n * ws.n + co) * ho + oy) * wo + ox] = acc;
                }
    return out;
}

}  // namespace testutil
