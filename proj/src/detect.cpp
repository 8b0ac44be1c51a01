#include "leirstd/detect.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <tuple>

#include "leirstd/error.hpp"
#include "leirstd/ops.hpp"

namespace leirstd {
namespace {

// Forward-mode value with derivatives along the four predicted corners.
struct Dual {
    double v = 0;
    std::array<double, 4> d{};

    Dual() = default;
    Dual(double value) : v(value) {}
    static Dual seed(double value, std::size_t i) {
        Dual r(value);
        r.d[i] = 1.0;
        return r;
    }
};

Dual operator+(Dual a, const Dual& b) {
    a.v += b.v;
    for (std::size_t i = 0; i < 4; ++i) a.d[i] += b.d[i];
    return a;
}
Dual operator-(Dual a, const Dual& b) {
    a.v -= b.v;
    for (std::size_t i = 0; i < 4; ++i) a.d[i] -= b.d[i];
    return a;
}
Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (std::size_t i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (std::size_t i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
}
Dual min(const Dual& a, const Dual& b) { return a.v <= b.v ? a : b; }
Dual max(const Dual& a, const Dual& b) { return a.v >= b.v ? a : b; }
Dual atan2(const Dual& y, const Dual& x) {
    Dual r(std::atan2(y.v, x.v));
    const double r2 = x.v * x.v + y.v * y.v;
    if (r2 > 0)
        for (std::size_t i = 0; i < 4; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / r2;
    return r;
}

double min(double a, double b) { return std::min(a, b); }
double max(double a, double b) { return std::max(a, b); }
double atan2(double y, double x) { return std::atan2(y, x); }

double value(double x) { return x; }
double value(const Dual& x) { return x.v; }

template <class T>
struct CiouParts {
    T iou, distance, aspect, alpha, loss;
};

template <class T>
CiouParts<T> ciou_generic(const T& x1, const T& y1, const T& x2, const T& y2, const Box& g) {
    const T zero(0.0);
    const T iw = max(zero, min(x2, T(g.x2)) - max(x1, T(g.x1)));
    const T ih = max(zero, min(y2, T(g.y2)) - max(y1, T(g.y1)));
    const T inter = iw * ih;
    const T pw = x2 - x1, ph = y2 - y1;
    const T uni = pw * ph + T(g.area()) - inter;
    const T iou = inter / uni;

    const T dx = (x1 + x2) * T(0.5) - T(g.cx());
    const T dy = (y1 + y2) * T(0.5) - T(g.cy());
    const T cw = max(x2, T(g.x2)) - min(x1, T(g.x1));
    const T ch = max(y2, T(g.y2)) - min(y1, T(g.y1));
    const T distance = (dx * dx + dy * dy) / (cw * cw + ch * ch);

    const T diff = T(std::atan(g.w() / g.h())) - atan2(pw, ph);
    const T aspect = T(4.0 / (std::numbers::pi * std::numbers::pi)) * diff * diff;
    T denom = (T(1.0) - iou) + aspect;
    if (value(denom) < 1e-9) denom = T(1e-9);
    const T alpha = aspect / denom;
    return {iou, distance, aspect, alpha, T(1.0) - iou + distance + alpha * aspect};
}

void check_boxes(const Box& pred, const Box& gt) {
    if (!(gt.w() > 0 && gt.h() > 0)) throw DegenerateBoxError("ciou: ground truth box has zero area");
    if (!pred.valid()) throw DegenerateBoxError("ciou: predicted box is inverted");
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double focal_derivative(double p, double alpha, double gamma) {
    const double q = 1.0 - p;
    const double lg = std::log(std::max(p, kProbClamp));
    const double power_term = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0) * lg;
    const double log_term = p < kProbClamp ? 0.0 : std::pow(q, gamma) / p;
    return alpha * (power_term - log_term);
}

void softmax(std::span<const double> logits, std::span<double> probs) {
    const double top = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) total += probs[i] = std::exp(logits[i] - top);
    for (double& p : probs) p /= total;
}

// Chain rule through a softmax: dL/dz_j = p_j (g_j - sum_k p_k g_k).
void softmax_backward(std::span<const double> probs, std::span<const double> dprobs, double scale, double* dz) {
    double dot = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) dot += probs[k] * dprobs[k];
    for (std::size_t j = 0; j < probs.size(); ++j) dz[j] += scale * probs[j] * (dprobs[j] - dot);
}

struct SideBins {
    std::size_t lo = 0, hi = 0;
    double w_lo = 1, w_hi = 0;
};

SideBins side_bins(double target, std::size_t bins) {
    SideBins s;
    s.lo = std::min(static_cast<std::size_t>(std::floor(target)), bins - 1);
    s.hi = std::min(s.lo + 1, bins - 1);
    s.w_hi = s.hi == s.lo ? 0.0 : target - static_cast<double>(s.lo);
    s.w_lo = 1.0 - s.w_hi;
    return s;
}

}  // namespace

double bce(double p, double y) {
    const double q = clamp_prob(p);
    return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

double bce_loss(std::span<const double> p, std::span<const double> y) {
    if (p.size() != y.size()) throw DimensionError("bce_loss: probability and target lengths differ");
    if (p.empty()) throw DimensionError("bce_loss: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += bce(p[i], y[i]);
    return total / static_cast<double>(p.size());
}

CiouTerms ciou_terms(const Box& pred, const Box& gt) {
    check_boxes(pred, gt);
    const auto parts = ciou_generic<double>(pred.x1, pred.y1, pred.x2, pred.y2, gt);
    return {parts.iou, parts.distance, parts.aspect, parts.alpha, parts.loss};
}

double ciou_loss(const Box& pred, const Box& gt) { return ciou_terms(pred, gt).loss; }

double focal_term(double p, double alpha, double gamma) {
    return -alpha * std::pow(1.0 - p, gamma) * std::log(std::max(p, kProbClamp));
}

double dfl_loss(std::span<const double> probs, double target, double alpha, double gamma) {
    if (probs.size() < 2) throw DimensionError("dfl_loss: need at least two bins");
    if (!(target >= 0.0 && target <= static_cast<double>(probs.size() - 1))) {
        throw RangeError("dfl_loss: target " + std::to_string(target) + " outside [0, " +
                         std::to_string(probs.size() - 1) + "]");
    }
    const SideBins s = side_bins(target, probs.size());
    double loss = s.w_lo * focal_term(probs[s.lo], alpha, gamma);
    if (s.w_hi > 0) loss += s.w_hi * focal_term(probs[s.hi], alpha, gamma);
    return loss;
}

void LossWeights::validate() const {
    for (double w : {cls, box, dfl}) {
        if (!std::isfinite(w) || w < 0) throw ConfigError("loss weights must be finite and non-negative");
    }
}

long Assignment::owner(std::size_t scale, std::size_t image, std::size_t y, std::size_t x) const {
    for (std::size_t i = 0; i < positives.size(); ++i) {
        const auto& p = positives[i];
        if (p.scale == scale && p.image == image && p.y == y && p.x == x) return static_cast<long>(i);
    }
    return -1;
}

std::size_t scale_for(double size, const ModelConfig& cfg) {
    for (std::size_t s = 0; s < 3; ++s) {
        const double lo = 2.0 * static_cast<double>(cfg.strides[s]);
        if (size >= lo && size < 4.0 * lo) return s;
    }
    return size < 2.0 * static_cast<double>(cfg.strides[0]) ? 0 : 2;
}

Assignment assign_targets(const std::vector<std::vector<GroundTruth>>& labels, const ModelConfig& cfg) {
    std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, Positive> cells;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        for (std::size_t i = 0; i < labels[n].size(); ++i) {
            const GroundTruth& g = labels[n][i];
            if (g.class_id >= cfg.num_classes) {
                throw DataError("label class " + std::to_string(g.class_id) + " exceeds model classes " +
                                std::to_string(cfg.num_classes));
            }
            const Box box = g.to_box(cfg.input_size, cfg.input_size);
            const std::size_t scale = scale_for(std::max(box.w(), box.h()), cfg);
            const double stride = static_cast<double>(cfg.strides[scale]);
            const std::size_t last = cfg.grid(scale) - 1;
            const auto cell = [&](double c) {
                return std::min(static_cast<std::size_t>(std::max(0.0, std::floor(c / stride))), last);
            };
            const Positive pos{scale, n, cell(box.cy()), cell(box.cx()), i, g.class_id, box};
            auto [it, fresh] = cells.try_emplace({scale, n, pos.y, pos.x}, pos);
            if (!fresh && box.area() > it->second.box.area()) it->second = pos;
        }
    }
    Assignment a;
    for (auto& [key, pos] : cells) a.positives.push_back(pos);
    std::stable_sort(a.positives.begin(), a.positives.end(), [](const Positive& l, const Positive& r) {
        return std::tie(l.image, l.gt) < std::tie(r.image, r.gt);
    });
    return a;
}

double expected_distance(std::span<const double> logits) {
    std::vector<double> probs(logits.size());
    softmax(logits, probs);
    double e = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) e += static_cast<double>(k) * probs[k];
    return e;
}

Box decode_cell(std::span<const double> channels, std::size_t y, std::size_t x, std::size_t stride,
                const ModelConfig& cfg) {
    const std::size_t B = cfg.reg_bins;
    const double s = static_cast<double>(stride);
    const double cx = (static_cast<double>(x) + 0.5) * s;
    const double cy = (static_cast<double>(y) + 0.5) * s;
    std::array<double, 4> d{};
    for (std::size_t k = 0; k < 4; ++k) d[k] = expected_distance(channels.subspan(cfg.num_classes + k * B, B)) * s;
    return {cx - d[0], cy - d[1], cx + d[2], cy + d[3]};
}

LossBreakdown total_loss(const HeadOutputs& out, const Assignment& assignment, const ModelConfig& cfg,
                         const LossWeights& weights, const FocalParams& focal) {
    weights.validate();
    const std::size_t nc = cfg.num_classes, B = cfg.reg_bins, C = cfg.head_channels();
    const std::size_t batch = out.maps[0].shape().n;
    for (std::size_t s = 0; s < 3; ++s) {
        const Shape& sh = out.maps[s].shape();
        const std::size_t g = cfg.grid(s);
        if (sh.n != batch || sh.c != C || sh.h != g || sh.w != g) {
            throw DimensionError("total_loss: head map " + std::to_string(s) + " has shape " + sh.str());
        }
        const auto data = out.maps[s].data();
        if (!std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); })) {
            throw NumericError("total_loss: head map " + std::to_string(s) + " holds non-finite values");
        }
    }
    for (const auto& p : assignment.positives) {
        if (p.image >= batch) throw DimensionError("total_loss: assignment refers to a missing batch element");
    }

    LossBreakdown result;
    const std::size_t P = assignment.positives.size();
    result.positives = P;
    const double cls_norm = static_cast<double>(std::max<std::size_t>(P, 1));

    std::array<std::vector<double>, 3> grads;
    for (std::size_t s = 0; s < 3; ++s) grads[s].assign(out.maps[s].size(), 0.0);
    auto offset = [&](std::size_t s, std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        const std::size_t g = cfg.grid(s);
        return ((n * C + c) * g + y) * g + x;
    };

    // Classification over every cell.
    double cls = 0.0;
    for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t g = cfg.grid(s);
        std::vector<double> target(batch * nc * g * g, 0.0);
        for (const auto& p : assignment.positives)
            if (p.scale == s) target[((p.image * nc + p.class_id) * g + p.y) * g + p.x] = 1.0;
        const auto data = out.maps[s].data();
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t k = 0; k < nc; ++k)
                for (std::size_t y = 0; y < g; ++y)
                    for (std::size_t x = 0; x < g; ++x) {
                        const std::size_t at = offset(s, n, k, y, x);
                        const double p = ops::sigmoid(data[at]);
                        const double t = target[((n * nc + k) * g + y) * g + x];
                        cls += bce(p, t);
                        if (p > kProbClamp && p < 1.0 - kProbClamp)
                            grads[s][at] += weights.cls * (p - t) / cls_norm;
                    }
    }
    result.cls = cls / cls_norm;

    // Box terms over positives.
    double box_sum = 0.0, dfl_sum = 0.0;
    std::vector<double> channels(C);
    std::array<std::vector<double>, 4> probs;
    std::vector<double> dprobs(B);
    for (const auto& p : assignment.positives) {
        const std::size_t stride = cfg.strides[p.scale];
        const double sd = static_cast<double>(stride);
        const auto data = out.maps[p.scale].data();
        for (std::size_t c = 0; c < C; ++c) channels[c] = data[offset(p.scale, p.image, c, p.y, p.x)];
        std::array<double, 4> expect{};
        for (std::size_t k = 0; k < 4; ++k) {
            probs[k].resize(B);
            softmax(std::span<const double>(channels).subspan(nc + k * B, B), probs[k]);
            for (std::size_t b = 0; b < B; ++b) expect[k] += static_cast<double>(b) * probs[k][b];
        }
        const double cx = (static_cast<double>(p.x) + 0.5) * sd;
        const double cy = (static_cast<double>(p.y) + 0.5) * sd;
        const Box pred{cx - expect[0] * sd, cy - expect[1] * sd, cx + expect[2] * sd, cy + expect[3] * sd};
        check_boxes(pred, p.box);
        const auto parts = ciou_generic(Dual::seed(pred.x1, 0), Dual::seed(pred.y1, 1), Dual::seed(pred.x2, 2),
                                        Dual::seed(pred.y2, 3), p.box);
        box_sum += parts.loss.v;
        // Corners move against the left/top distances and with the right/bottom ones.
        const std::array<double, 4> dexpect{-sd * parts.loss.d[0], -sd * parts.loss.d[1], sd * parts.loss.d[2],
                                            sd * parts.loss.d[3]};

        const std::array<double, 4> raw{(cx - p.box.x1) / sd, (cy - p.box.y1) / sd, (p.box.x2 - cx) / sd,
                                        (p.box.y2 - cy) / sd};
        for (std::size_t k = 0; k < 4; ++k) {
            double t = raw[k];
            if (t < 0.0 || t > static_cast<double>(B - 1)) {
                ++result.clamped_targets;
                t = std::clamp(t, 0.0, static_cast<double>(B - 1));
            }
            dfl_sum += dfl_loss(probs[k], t, focal.alpha, focal.gamma);

            const SideBins sb = side_bins(t, B);
            for (std::size_t b = 0; b < B; ++b) dprobs[b] = static_cast<double>(b) * weights.box * dexpect[k] / P;
            const double dfl_scale = weights.dfl / (4.0 * static_cast<double>(P));
            dprobs[sb.lo] += dfl_scale * sb.w_lo * focal_derivative(probs[k][sb.lo], focal.alpha, focal.gamma);
            if (sb.w_hi > 0)
                dprobs[sb.hi] += dfl_scale * sb.w_hi * focal_derivative(probs[k][sb.hi], focal.alpha, focal.gamma);
            std::vector<double> dz(B, 0.0);
            softmax_backward(probs[k], dprobs, 1.0, dz.data());
            for (std::size_t b = 0; b < B; ++b) grads[p.scale][offset(p.scale, p.image, nc + k * B + b, p.y, p.x)] += dz[b];
        }
    }
    if (P > 0) {
        result.box = box_sum / static_cast<double>(P);
        result.dfl = dfl_sum / (4.0 * static_cast<double>(P));
    }

    const double total = weights.cls * result.cls + weights.box * result.box + weights.dfl * result.dfl;
    std::vector<Tensor> inputs(out.maps.begin(), out.maps.end());
    result.total = make_result(OpKind::loss, Shape{}, {total}, inputs, [grads = std::move(grads)](Node& self) {
        const double up = self.grad[0];
        for (std::size_t s = 0; s < 3; ++s) {
            Node& parent = *self.parents[s];
            if (!parent.requires_grad) continue;
            auto& g = parent.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * grads[s][i];
        }
    });
    return result;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.class_id == d.class_id && k.image == d.image && iou(k.box, d.box) >= iou_thresh;
        });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<Detection> decode(const HeadOutputs& out, const ModelConfig& cfg, std::size_t n, std::size_t image_id,
                              const DecodeOptions& options) {
    if (!(options.score_thresh > 0 && options.score_thresh < 1) || !(options.nms_iou > 0 && options.nms_iou < 1)) {
        throw ConfigError("decode: thresholds must lie in (0, 1)");
    }
    const std::size_t C = cfg.head_channels();
    const double frame = static_cast<double>(cfg.input_size);
    std::vector<Detection> found;
    std::vector<double> channels(C);
    for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t g = cfg.grid(s);
        const auto data = out.maps[s].data();
        if (n >= out.maps[s].shape().n) throw DimensionError("decode: batch index out of range");
        for (std::size_t y = 0; y < g; ++y)
            for (std::size_t x = 0; x < g; ++x) {
                bool any = false;
                for (std::size_t k = 0; k < cfg.num_classes; ++k)
                    any = any || ops::sigmoid(data[((n * C + k) * g + y) * g + x]) >= options.score_thresh;
                if (!any) continue;
                for (std::size_t c = 0; c < C; ++c) channels[c] = data[((n * C + c) * g + y) * g + x];
                Box box = decode_cell(channels, y, x, cfg.strides[s], cfg);
                box = {std::clamp(box.x1, 0.0, frame), std::clamp(box.y1, 0.0, frame), std::clamp(box.x2, 0.0, frame),
                       std::clamp(box.y2, 0.0, frame)};
                for (std::size_t k = 0; k < cfg.num_classes; ++k) {
                    const double score = ops::sigmoid(channels[k]);
                    if (score >= options.score_thresh) found.push_back({image_id, k, score, box});
                }
            }
    }
    return nms(std::move(found), options.nms_iou);
}

}  // namespace leirstd
