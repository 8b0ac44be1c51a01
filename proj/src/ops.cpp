#include "leirstd/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>

#include "leirstd/rng.hpp"

namespace leirstd::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

std::vector<double>* grad_of(Node& self, std::size_t i) {
    Node& parent = *self.parents[i];
    return parent.requires_grad ? &parent.grad_buffer() : nullptr;
}

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeometry {
    Shape in;
    std::size_t c_out, k, stride, pad, groups;
    std::size_t h_out, w_out;
    std::size_t cin_g() const { return in.c / groups; }
    std::size_t cout_g() const { return c_out / groups; }
    std::size_t patch() const { return cin_g() * k * k; }
    std::size_t pixels() const { return h_out * w_out; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const ConvOptions& o) {
    if (o.groups == 0 || o.stride == 0) throw ConfigError("conv2d: stride and groups must be >= 1");
    if (xs.c % o.groups != 0 || ws.n % o.groups != 0) {
        throw ConfigError("conv2d: groups=" + std::to_string(o.groups) + " does not divide channels (c_in=" +
                          std::to_string(xs.c) + ", c_out=" + std::to_string(ws.n) + ")");
    }
    if (ws.c != xs.c / o.groups || ws.h != ws.w) {
        throw DimensionError("conv2d: weight shape " + ws.str() + " incompatible with input " + xs.str() +
                             " and groups=" + std::to_string(o.groups));
    }
    const std::size_t k = ws.h;
    if (k > xs.h + 2 * o.pad || k > xs.w + 2 * o.pad) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + xs.str());
    }
    ConvGeometry g{xs, ws.n, k, o.stride, o.pad, o.groups, 0, 0};
    g.h_out = out_extent(xs.h, k, o.stride, o.pad);
    g.w_out = out_extent(xs.w, k, o.stride, o.pad);
    return g;
}

// cols is (cin_g * k * k) x (h_out * w_out), row-major.
void im2col(const double* x, const ConvGeometry& g, double* cols) {
    const std::size_t P = g.pixels();
    for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
        const double* plane = x + ci * g.in.plane();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = cols + ((ci * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* dst = row + oy * g.w_out;
                    if (iy < 0 || iy >= static_cast<long>(g.in.h)) {
                        std::fill(dst, dst + g.w_out, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * g.in.w;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.in.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
    const std::size_t P = g.pixels();
    for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
        double* plane = dx + ci * g.in.plane();
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = cols + ((ci * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.in.h)) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * g.in.w;
                    const double* src = row + oy * g.w_out;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.in.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Direct path for groups == c_in == c_out.
void depthwise_forward(const double* x, const double* w, const ConvGeometry& g, double* out) {
    const std::size_t C = g.in.c;
    for (std::size_t n = 0; n < g.in.n; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* plane = x + (n * C + c) * g.in.plane();
            const double* kern = w + c * g.k * g.k;
            double* dst = out + (n * C + c) * g.pixels();
            for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                    double acc = 0.0;
                    for (std::size_t ky = 0; ky < g.k; ++ky) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.in.h)) continue;
                        for (std::size_t kx = 0; kx < g.k; ++kx) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                            if (ix < 0 || ix >= static_cast<long>(g.in.w)) continue;
                            acc += kern[ky * g.k + kx] * plane[iy * static_cast<long>(g.in.w) + ix];
                        }
                    }
                    dst[oy * g.w_out + ox] = acc;
                }
            }
        }
    }
}

void depthwise_backward(const double* x, const double* w, const double* gout, const ConvGeometry& g, double* dx,
                        double* dw) {
    const std::size_t C = g.in.c;
    for (std::size_t n = 0; n < g.in.n; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* plane = x + (n * C + c) * g.in.plane();
            const double* kern = w + c * g.k * g.k;
            const double* go = gout + (n * C + c) * g.pixels();
            double* dplane = dx ? dx + (n * C + c) * g.in.plane() : nullptr;
            double* dkern = dw ? dw + c * g.k * g.k : nullptr;
            for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                    const double gv = go[oy * g.w_out + ox];
                    for (std::size_t ky = 0; ky < g.k; ++ky) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.in.h)) continue;
                        for (std::size_t kx = 0; kx < g.k; ++kx) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                            if (ix < 0 || ix >= static_cast<long>(g.in.w)) continue;
                            const long idx = iy * static_cast<long>(g.in.w) + ix;
                            if (dplane) dplane[idx] += gv * kern[ky * g.k + kx];
                            if (dkern) dkern[ky * g.k + kx] += gv * plane[idx];
                        }
                    }
                }
            }
        }
    }
}

template <class F>
void for_each_broadcast(const Shape& a, const Shape& b, F&& f) {
    for (std::size_t n = 0; n < a.n; ++n)
        for (std::size_t c = 0; c < a.c; ++c)
            for (std::size_t h = 0; h < a.h; ++h)
                for (std::size_t w = 0; w < a.w; ++w) {
                    const std::size_t ia = ((n * a.c + c) * a.h + h) * a.w + w;
                    const std::size_t ib = (((b.n == 1 ? 0 : n) * b.c + (b.c == 1 ? 0 : c)) * b.h +
                                            (b.h == 1 ? 0 : h)) * b.w + (b.w == 1 ? 0 : w);
                    f(ia, ib);
                }
}

void check_broadcast(const Shape& a, const Shape& b, const char* op) {
    auto ok = [](std::size_t x, std::size_t y) { return x == y || y == 1; };
    if (!ok(a.n, b.n) || !ok(a.c, b.c) || !ok(a.h, b.h) || !ok(a.w, b.w)) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + b.str() + " onto " + a.str());
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, ConvOptions options) {
    return conv2d(x, weight, Tensor(), options);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions options) {
    const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), options);
    if (bias.defined() && bias.size() != g.c_out) {
        throw DimensionError("conv2d: bias length " + std::to_string(bias.size()) + " != c_out " +
                             std::to_string(g.c_out));
    }
    const Shape out_shape{g.in.n, g.c_out, g.h_out, g.w_out};
    std::vector<double> out(out_shape.size(), 0.0);
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    const bool depthwise = g.cin_g() == 1 && g.cout_g() == 1;

    if (depthwise) {
        depthwise_forward(xd, wd, g, out.data());
    } else {
        std::vector<double> cols(g.pointwise() ? 0 : g.patch() * g.pixels());
        for (std::size_t n = 0; n < g.in.n; ++n) {
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
                const double* xin = xd + (n * g.in.c + grp * g.cin_g()) * g.in.plane();
                const double* colp = xin;
                if (!g.pointwise()) {
                    im2col(xin, g, cols.data());
                    colp = cols.data();
                }
                ConstMapMatrix W(wd + grp * g.cout_g() * g.patch(), g.cout_g(), g.patch());
                ConstMapMatrix X(colp, g.patch(), g.pixels());
                MapMatrix Y(out.data() + (n * g.c_out + grp * g.cout_g()) * g.pixels(), g.cout_g(), g.pixels());
                Y.noalias() = W * X;
            }
        }
    }
    if (bias.defined()) {
        const double* bd = bias.data().data();
        for (std::size_t n = 0; n < g.in.n; ++n)
            for (std::size_t c = 0; c < g.c_out; ++c) {
                double* dst = out.data() + (n * g.c_out + c) * g.pixels();
                for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] += bd[c];
            }
    }

    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(OpKind::conv2d, out_shape, std::move(out), inputs, [g, depthwise](Node& self) {
        const Node& xn = *self.parents[0];
        const Node& wn = *self.parents[1];
        auto* dx = grad_of(self, 0);
        auto* dw = grad_of(self, 1);
        const double* go = self.grad.data();
        if (self.parents.size() > 2) {
            if (auto* db = grad_of(self, 2)) {
                for (std::size_t n = 0; n < g.in.n; ++n)
                    for (std::size_t c = 0; c < g.c_out; ++c) {
                        const double* src = go + (n * g.c_out + c) * g.pixels();
                        double acc = 0.0;
                        for (std::size_t p = 0; p < g.pixels(); ++p) acc += src[p];
                        (*db)[c] += acc;
                    }
            }
        }
        if (depthwise) {
            depthwise_backward(xn.data.data(), wn.data.data(), go, g, dx ? dx->data() : nullptr,
                               dw ? dw->data() : nullptr);
            return;
        }
        std::vector<double> cols(g.pointwise() ? 0 : g.patch() * g.pixels());
        std::vector<double> dcols(g.patch() * g.pixels());
        for (std::size_t n = 0; n < g.in.n; ++n) {
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
                const std::size_t xoff = (n * g.in.c + grp * g.cin_g()) * g.in.plane();
                ConstMapMatrix G(go + (n * g.c_out + grp * g.cout_g()) * g.pixels(), g.cout_g(), g.pixels());
                if (dw) {
                    const double* colp = xn.data.data() + xoff;
                    if (!g.pointwise()) {
                        im2col(colp, g, cols.data());
                        colp = cols.data();
                    }
                    ConstMapMatrix X(colp, g.patch(), g.pixels());
                    MapMatrix DW(dw->data() + grp * g.cout_g() * g.patch(), g.cout_g(), g.patch());
                    DW.noalias() += G * X.transpose();
                }
                if (dx) {
                    ConstMapMatrix W(wn.data.data() + grp * g.cout_g() * g.patch(), g.cout_g(), g.patch());
                    if (g.pointwise()) {
                        MapMatrix DX(dx->data() + xoff, g.patch(), g.pixels());
                        DX.noalias() += W.transpose() * G;
                    } else {
                        MapMatrix DC(dcols.data(), g.patch(), g.pixels());
                        DC.noalias() = W.transpose() * G;
                        col2im(dcols.data(), g, dx->data() + xoff);
                    }
                }
            }
        }
    });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad) {
    const Shape& ws = weight.shape();
    if (ws.n != x.shape().c || ws.c != 1) {
        throw DimensionError("depthwise_conv2d: weight " + ws.str() + " does not match input channels " +
                             std::to_string(x.shape().c));
    }
    return conv2d(x, weight, ConvOptions{stride, pad, x.shape().c});
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training,
                  double eps) {
    const Shape s = x.shape();
    if (gamma.size() != s.c || beta.size() != s.c) {
        throw DimensionError("batch_norm: gamma/beta length must equal channel count " + std::to_string(s.c));
    }
    if (state.running_mean.size() != s.c || state.running_var.size() != s.c) {
        throw DimensionError("batch_norm: running statistics sized for a different channel count");
    }
    const std::size_t count = s.n * s.plane();
    if (training && count == 1) {
        throw DegenerateVarianceError("batch_norm: n*h*w = 1 in training mode leaves variance undefined");
    }
    std::vector<double> mean(s.c), inv_std(s.c);
    const double* xd = x.data().data();
    for (std::size_t c = 0; c < s.c; ++c) {
        if (training) {
            double m = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = xd + (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) m += p[i];
            }
            m /= static_cast<double>(count);
            double v = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = xd + (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) v += (p[i] - m) * (p[i] - m);
            }
            const double biased = v / static_cast<double>(count);
            const double unbiased = v / static_cast<double>(count - 1);
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * m;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
            mean[c] = m;
            inv_std[c] = 1.0 / std::sqrt(biased + eps);
        } else {
            mean[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
        }
    }
    std::vector<double> out(s.size());
    const double* gd = gamma.data().data();
    const double* bd = beta.data().data();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i)
                out[off + i] = gd[c] * (xd[off + i] - mean[c]) * inv_std[c] + bd[c];
        }

    return make_result(OpKind::batch_norm, s, std::move(out), {x, gamma, beta},
                       [s, count, training, mean, inv_std](Node& self) {
        const double* xd = self.parents[0]->data.data();
        const double* gd = self.parents[1]->data.data();
        const double* go = self.grad.data();
        auto* dx = grad_of(self, 0);
        auto* dgamma = grad_of(self, 1);
        auto* dbeta = grad_of(self, 2);
        for (std::size_t c = 0; c < s.c; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const std::size_t off = (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double xhat = (xd[off + i] - mean[c]) * inv_std[c];
                    sum_g += go[off + i];
                    sum_gx += go[off + i] * xhat;
                }
            }
            if (dgamma) (*dgamma)[c] += sum_gx;
            if (dbeta) (*dbeta)[c] += sum_g;
            if (!dx) continue;
            const double cnt = static_cast<double>(count);
            for (std::size_t n = 0; n < s.n; ++n) {
                const std::size_t off = (n * s.c + c) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    if (training) {
                        const double xhat = (xd[off + i] - mean[c]) * inv_std[c];
                        (*dx)[off + i] += gd[c] * inv_std[c] * (go[off + i] - sum_g / cnt - xhat * sum_gx / cnt);
                    } else {
                        (*dx)[off + i] += gd[c] * inv_std[c] * go[off + i];
                    }
                }
            }
        }
    });
}

double sigmoid(double t) {
    if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

Tensor activation(const Tensor& x, Activation kind) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double t = in[i];
        switch (kind) {
            case Activation::silu: out[i] = t * sigmoid(t); break;
            case Activation::sigmoid: out[i] = sigmoid(t); break;
            case Activation::relu: out[i] = t > 0 ? t : 0.0; break;
        }
    }
    return make_result(OpKind::activation, x.shape(), std::move(out), {x}, [kind](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        const auto& xd = self.parents[0]->data;
        for (std::size_t i = 0; i < xd.size(); ++i) {
            const double t = xd[i];
            double d = 0.0;
            switch (kind) {
                case Activation::silu: {
                    const double s = sigmoid(t);
                    d = s * (1.0 + t * (1.0 - s));
                    break;
                }
                case Activation::sigmoid: {
                    const double s = self.data[i];
                    d = s * (1.0 - s);
                    break;
                }
                case Activation::relu: d = t > 0 ? 1.0 : 0.0; break;
            }
            (*dx)[i] += d * self.grad[i];
        }
    });
}

std::vector<std::size_t> shuffle_permutation(std::size_t channels, std::size_t groups) {
    if (groups == 0 || channels % groups != 0) {
        throw ConfigError("channel_shuffle: " + std::to_string(channels) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    }
    // View as (groups, per_group), transpose to (per_group, groups), flatten.
    const std::size_t per_group = channels / groups;
    std::vector<std::size_t> perm(channels);
    for (std::size_t j = 0; j < per_group; ++j)
        for (std::size_t g = 0; g < groups; ++g) perm[j * groups + g] = g * per_group + j;
    return perm;
}

Tensor channel_shuffle(const Tensor& x, std::size_t groups) {
    const Shape s = x.shape();
    const auto perm = shuffle_permutation(s.c, groups);
    const auto in = x.data();
    std::vector<double> out(s.size());
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            std::copy_n(in.begin() + static_cast<long>((n * s.c + perm[c]) * s.plane()), s.plane(),
                        out.begin() + static_cast<long>((n * s.c + c) * s.plane()));
    return make_result(OpKind::channel_shuffle, s, std::move(out), {x}, [s, perm](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const double* src = self.grad.data() + (n * s.c + c) * s.plane();
                double* dst = dx->data() + (n * s.c + perm[c]) * s.plane();
                for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += src[i];
            }
    });
}

Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
    const Shape s = x.shape();
    const Shape cs = coords.shape();
    if (cs.n != s.n || cs.c % 2 != 0) {
        throw DimensionError("bilinear_sample: coords " + cs.str() + " must be (n, 2K, h_out, w_out) for input " +
                             s.str());
    }
    for (double v : coords.data()) {
        if (!std::isfinite(v)) throw NumericError("bilinear_sample: non-finite sampling coordinate");
    }
    const std::size_t K = cs.c / 2;
    const std::size_t P = cs.plane();
    const Shape out_shape{s.n, s.c * K, cs.h, cs.w};
    std::vector<double> out(out_shape.size(), 0.0);
    const double* xd = x.data().data();
    const double* cd = coords.data().data();
    const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);

    auto corner = [&](const double* plane, long yy, long xx) {
        return (yy < 0 || yy >= H || xx < 0 || xx >= W) ? 0.0 : plane[yy * W + xx];
    };
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t p = 0; p < P; ++p) {
                const double py = cd[((n * cs.c) + 2 * k) * P + p];
                const double px = cd[((n * cs.c) + 2 * k + 1) * P + p];
                const double fy = std::floor(py), fx = std::floor(px);
                const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
                const double ly = py - fy, lx = px - fx;
                for (std::size_t c = 0; c < s.c; ++c) {
                    const double* plane = xd + (n * s.c + c) * s.plane();
                    const double v = (1 - ly) * (1 - lx) * corner(plane, y0, x0) +
                                     (1 - ly) * lx * corner(plane, y0, x0 + 1) +
                                     ly * (1 - lx) * corner(plane, y0 + 1, x0) +
                                     ly * lx * corner(plane, y0 + 1, x0 + 1);
                    out[((n * s.c + c) * K + k) * P + p] = v;
                }
            }

    return make_result(OpKind::bilinear_sample, out_shape, std::move(out), {x, coords}, [s, cs, K, P](Node& self) {
        const double* xd = self.parents[0]->data.data();
        const double* cd = self.parents[1]->data.data();
        auto* dx = grad_of(self, 0);
        auto* dc = grad_of(self, 1);
        const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);
        auto inside = [&](long yy, long xx) { return yy >= 0 && yy < H && xx >= 0 && xx < W; };
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t p = 0; p < P; ++p) {
                    const std::size_t iy = ((n * cs.c) + 2 * k) * P + p;
                    const std::size_t ix = iy + P;
                    const double py = cd[iy], px = cd[ix];
                    const double fy = std::floor(py), fx = std::floor(px);
                    const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
                    const double ly = py - fy, lx = px - fx;
                    double gy = 0.0, gx = 0.0;
                    for (std::size_t c = 0; c < s.c; ++c) {
                        const double g = self.grad[((n * s.c + c) * K + k) * P + p];
                        if (g == 0.0) continue;
                        const std::size_t base = (n * s.c + c) * s.plane();
                        const long ys[2] = {y0, y0 + 1};
                        const long xs[2] = {x0, x0 + 1};
                        double v[2][2];
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                v[a][b] = inside(ys[a], xs[b]) ? xd[base + ys[a] * W + xs[b]] : 0.0;
                        if (dx) {
                            const double wts[2][2] = {{(1 - ly) * (1 - lx), (1 - ly) * lx},
                                                      {ly * (1 - lx), ly * lx}};
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    if (inside(ys[a], xs[b])) (*dx)[base + ys[a] * W + xs[b]] += g * wts[a][b];
                        }
                        gy += g * ((v[1][0] - v[0][0]) * (1 - lx) + (v[1][1] - v[0][1]) * lx);
                        gx += g * ((v[0][1] - v[0][0]) * (1 - ly) + (v[1][1] - v[1][0]) * ly);
                    }
                    if (dc) {
                        (*dc)[iy] += gy;
                        (*dc)[ix] += gx;
                    }
                }
    });
}

Tensor pool_global(const Tensor& x, Pool kind) {
    const Shape s = x.shape();
    const Shape out_shape{s.n, s.c, 1, 1};
    std::vector<double> out(out_shape.size());
    std::vector<std::size_t> argmax(kind == Pool::max ? out_shape.size() : 0);
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < s.n * s.c; ++i) {
        const double* p = xd + i * s.plane();
        if (kind == Pool::avg) {
            double acc = 0.0;
            for (std::size_t j = 0; j < s.plane(); ++j) acc += p[j];
            out[i] = acc / static_cast<double>(s.plane());
        } else {
            const auto it = std::max_element(p, p + s.plane());
            argmax[i] = static_cast<std::size_t>(it - p);
            out[i] = *it;
        }
    }
    return make_result(OpKind::pool_global, out_shape, std::move(out), {x}, [s, kind, argmax](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < s.n * s.c; ++i) {
            double* d = dx->data() + i * s.plane();
            if (kind == Pool::avg) {
                const double g = self.grad[i] / static_cast<double>(s.plane());
                for (std::size_t j = 0; j < s.plane(); ++j) d[j] += g;
            } else {
                d[argmax[i]] += self.grad[i];
            }
        }
    });
}

Tensor reduce_channels(const Tensor& x, Pool kind) {
    const Shape s = x.shape();
    const Shape out_shape{s.n, 1, s.h, s.w};
    std::vector<double> out(out_shape.size());
    std::vector<std::size_t> argmax(kind == Pool::max ? out_shape.size() : 0);
    const double* xd = x.data().data();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < s.plane(); ++p) {
            const std::size_t o = n * s.plane() + p;
            if (kind == Pool::avg) {
                double acc = 0.0;
                for (std::size_t c = 0; c < s.c; ++c) acc += xd[(n * s.c + c) * s.plane() + p];
                out[o] = acc / static_cast<double>(s.c);
            } else {
                std::size_t best = 0;
                for (std::size_t c = 1; c < s.c; ++c)
                    if (xd[(n * s.c + c) * s.plane() + p] > xd[(n * s.c + best) * s.plane() + p]) best = c;
                argmax[o] = best;
                out[o] = xd[(n * s.c + best) * s.plane() + p];
            }
        }
    return make_result(OpKind::reduce_channels, out_shape, std::move(out), {x}, [s, kind, argmax](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t p = 0; p < s.plane(); ++p) {
                const std::size_t o = n * s.plane() + p;
                if (kind == Pool::avg) {
                    const double g = self.grad[o] / static_cast<double>(s.c);
                    for (std::size_t c = 0; c < s.c; ++c) (*dx)[(n * s.c + c) * s.plane() + p] += g;
                } else {
                    (*dx)[(n * s.c + argmax[o]) * s.plane() + p] += self.grad[o];
                }
            }
    });
}

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must satisfy 0 <= p < 1");
    if (!training || p == 0.0) return x;
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
    return make_result(OpKind::dropout, x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < mask.size(); ++i) (*dx)[i] += self.grad[i] * mask[i];
    });
}

Tensor concat_channels(std::span<const Tensor> xs) {
    if (xs.empty()) throw DimensionError("concat_channels: no inputs");
    const Shape first = xs.front().shape();
    std::size_t channels = 0;
    for (const auto& t : xs) {
        const Shape& s = t.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw DimensionError("concat_channels: spatial mismatch " + s.str() + " vs " + first.str());
        }
        channels += s.c;
    }
    const Shape out_shape{first.n, channels, first.h, first.w};
    std::vector<double> out(out_shape.size());
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& t : xs) {
        offsets.push_back(offset);
        const Shape& s = t.shape();
        for (std::size_t n = 0; n < s.n; ++n)
            std::copy_n(t.data().begin() + static_cast<long>(n * s.c * s.plane()), s.c * s.plane(),
                        out.begin() + static_cast<long>((n * channels + offset) * s.plane()));
        offset += s.c;
    }
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    return make_result(OpKind::concat, out_shape, std::move(out), inputs, [out_shape, offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto* dx = grad_of(self, i);
            if (!dx) continue;
            const Shape& s = self.parents[i]->shape;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* src = self.grad.data() + (n * out_shape.c + offsets[i]) * s.plane();
                double* dst = dx->data() + n * s.c * s.plane();
                for (std::size_t j = 0; j < s.c * s.plane(); ++j) dst[j] += src[j];
            }
        }
    });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
    const Shape s = x.shape();
    if (begin >= end || end > s.c) {
        throw DimensionError("slice_channels: invalid range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") for " + s.str());
    }
    const Shape out_shape{s.n, end - begin, s.h, s.w};
    std::vector<double> out(out_shape.size());
    for (std::size_t n = 0; n < s.n; ++n)
        std::copy_n(x.data().begin() + static_cast<long>((n * s.c + begin) * s.plane()), out_shape.c * s.plane(),
                    out.begin() + static_cast<long>(n * out_shape.c * s.plane()));
    return make_result(OpKind::slice, out_shape, std::move(out), {x}, [s, out_shape, begin](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* src = self.grad.data() + n * out_shape.c * s.plane();
            double* dst = dx->data() + (n * s.c + begin) * s.plane();
            for (std::size_t j = 0; j < out_shape.c * s.plane(); ++j) dst[j] += src[j];
        }
    });
}

std::vector<Tensor> split_channels(const Tensor& x, std::size_t at) {
    if (at == 0 || at >= x.shape().c) {
        throw DimensionError("split_channels: split index " + std::to_string(at) + " outside (0, " +
                             std::to_string(x.shape().c) + ")");
    }
    return {slice_channels(x, 0, at), slice_channels(x, at, x.shape().c)};
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_broadcast(a.shape(), b.shape(), "add");
    std::vector<double> out(a.size());
    const auto ad = a.data();
    const auto bd = b.data();
    for_each_broadcast(a.shape(), b.shape(), [&](std::size_t ia, std::size_t ib) { out[ia] = ad[ia] + bd[ib]; });
    const Shape as = a.shape(), bs = b.shape();
    return make_result(OpKind::add, as, std::move(out), {a, b}, [as, bs](Node& self) {
        if (auto* da = grad_of(self, 0))
            for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += self.grad[i];
        if (auto* db = grad_of(self, 1))
            for_each_broadcast(as, bs, [&](std::size_t ia, std::size_t ib) { (*db)[ib] += self.grad[ia]; });
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_broadcast(a.shape(), b.shape(), "mul");
    std::vector<double> out(a.size());
    const auto ad = a.data();
    const auto bd = b.data();
    for_each_broadcast(a.shape(), b.shape(), [&](std::size_t ia, std::size_t ib) { out[ia] = ad[ia] * bd[ib]; });
    const Shape as = a.shape(), bs = b.shape();
    return make_result(OpKind::mul, as, std::move(out), {a, b}, [as, bs](Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        auto* da = grad_of(self, 0);
        auto* db = grad_of(self, 1);
        for_each_broadcast(as, bs, [&](std::size_t ia, std::size_t ib) {
            if (da) (*da)[ia] += self.grad[ia] * bv[ib];
            if (db) (*db)[ib] += self.grad[ia] * av[ia];
        });
    });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return make_result(OpKind::scale, x.shape(), std::move(out), {x}, [factor](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += factor * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_result(OpKind::sum, {1, 1, 1, 1}, {acc}, {x}, [](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (auto& v : *dx) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    if (factor == 0) throw ConfigError("upsample_nearest: factor must be >= 1");
    const Shape s = x.shape();
    const Shape out_shape{s.n, s.c, s.h * factor, s.w * factor};
    std::vector<double> out(out_shape.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < s.n * s.c; ++i)
        for (std::size_t y = 0; y < out_shape.h; ++y)
            for (std::size_t xx = 0; xx < out_shape.w; ++xx)
                out[(i * out_shape.h + y) * out_shape.w + xx] = in[(i * s.h + y / factor) * s.w + xx / factor];
    return make_result(OpKind::upsample, out_shape, std::move(out), {x}, [s, out_shape, factor](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < s.n * s.c; ++i)
            for (std::size_t y = 0; y < out_shape.h; ++y)
                for (std::size_t xx = 0; xx < out_shape.w; ++xx)
                    (*dx)[(i * s.h + y / factor) * s.w + xx / factor] +=
                        self.grad[(i * out_shape.h + y) * out_shape.w + xx];
    });
}

Tensor gather_cells(const Tensor& x, std::span<const CellIndex> cells) {
    const Shape s = x.shape();
    if (cells.empty()) throw DimensionError("gather_cells: no cells");
    for (const auto& cell : cells) {
        if (cell.n >= s.n || cell.y >= s.h || cell.x >= s.w) {
            throw DimensionError("gather_cells: cell outside tensor " + s.str());
        }
    }
    const Shape out_shape{cells.size(), s.c, 1, 1};
    std::vector<double> out(out_shape.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < cells.size(); ++i)
        for (std::size_t c = 0; c < s.c; ++c)
            out[i * s.c + c] = in[((cells[i].n * s.c + c) * s.h + cells[i].y) * s.w + cells[i].x];
    std::vector<CellIndex> saved(cells.begin(), cells.end());
    return make_result(OpKind::select_cells, out_shape, std::move(out), {x}, [s, saved](Node& self) {
        auto* dx = grad_of(self, 0);
        if (!dx) return;
        for (std::size_t i = 0; i < saved.size(); ++i)
            for (std::size_t c = 0; c < s.c; ++c)
                (*dx)[((saved[i].n * s.c + c) * s.h + saved[i].y) * s.w + saved[i].x] += self.grad[i * s.c + c];
    });
}

}  // namespace leirstd::ops
