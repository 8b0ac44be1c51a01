#include "leirstd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "leirstd/error.hpp"
#include "leirstd/parallel.hpp"

namespace leirstd {

std::vector<std::pair<double, double>> iou_sensitivity(double box_size, const std::vector<double>& shifts) {
    if (!(box_size >= 1.0)) throw ConfigError("iou_sensitivity: box size must be at least 1");
    const Box base{0, 0, box_size, box_size};
    std::vector<std::pair<double, double>> rows;
    for (double s : shifts) rows.emplace_back(s, iou(base, base.shifted(s, s)));
    return rows;
}

PRF1 prf1(const ConfusionCounts& c) {
    PRF1 r;
    if (c.tp + c.fp > 0) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (r.precision + r.recall > 0) r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

namespace {

std::vector<std::size_t> score_order(const std::vector<ScoredMatch>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

}  // namespace

std::vector<PRPoint> pr_curve(const std::vector<ScoredMatch>& dets, std::size_t n_gt) {
    if (n_gt == 0) throw UndefinedApError("precision-recall curve needs at least one ground truth");
    std::vector<PRPoint> curve;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i : score_order(dets)) {
        ++seen;
        if (dets[i].tp) ++tp;
        curve.push_back({static_cast<double>(tp) / static_cast<double>(n_gt),
                         static_cast<double>(tp) / static_cast<double>(seen)});
    }
    return curve;
}

double average_precision(const std::vector<ScoredMatch>& dets, std::size_t n_gt) {
    const auto curve = pr_curve(dets, n_gt);
    std::vector<double> envelope(curve.size());
    double best = 0.0;
    for (std::size_t i = curve.size(); i-- > 0;) {
        best = std::max(best, curve[i].precision);
        envelope[i] = best;
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (curve[i].recall > prev_recall) {
            ap += (curve[i].recall - prev_recall) * envelope[i];
            prev_recall = curve[i].recall;
        }
    }
    return ap;
}

namespace {

/// Detection indices per image, descending score, ties in input order.
std::map<std::size_t, std::vector<std::size_t>> detections_by_image(const std::vector<Detection>& dets) {
    std::map<std::size_t, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < dets.size(); ++i) out[dets[i].image].push_back(i);
    for (auto& [img, idx] : out) {
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    }
    return out;
}

std::map<std::size_t, std::vector<std::size_t>> truths_by_image(const std::vector<LabeledBox>& gts) {
    std::map<std::size_t, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < gts.size(); ++i) out[gts[i].image].push_back(i);
    return out;
}

std::map<std::size_t, std::size_t> gt_per_class(const std::vector<LabeledBox>& gts) {
    std::map<std::size_t, std::size_t> n;
    for (const auto& g : gts) ++n[g.class_id];
    return n;
}

/// Per-class AP from per-detection hit flags; mean over classes with ground truth.
double mean_ap(const std::vector<Detection>& dets, const std::vector<bool>& hits,
               const std::map<std::size_t, std::size_t>& n_gt, std::map<std::size_t, double>* per_class,
               std::map<std::size_t, std::vector<PRPoint>>* curves) {
    double sum = 0.0;
    for (const auto& [cls, count] : n_gt) {
        std::vector<ScoredMatch> matches;
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (dets[i].class_id == cls) matches.push_back({dets[i].score, hits[i]});
        const double ap = average_precision(matches, count);
        if (per_class) (*per_class)[cls] = ap;
        if (curves) (*curves)[cls] = pr_curve(matches, count);
        sum += ap;
    }
    return sum / static_cast<double>(n_gt.size());
}

}  // namespace

std::vector<bool> match_by_iou(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                               double iou_thresh) {
    std::vector<bool> hits(dets.size(), false);
    const auto truths = truths_by_image(gts);
    for (const auto& [img, order] : detections_by_image(dets)) {
        auto it = truths.find(img);
        if (it == truths.end()) continue;
        std::vector<bool> taken(it->second.size(), false);
        for (std::size_t d : order) {
            double best = iou_thresh;
            std::size_t pick = taken.size();
            for (std::size_t j = 0; j < it->second.size(); ++j) {
                const auto& g = gts[it->second[j]];
                if (taken[j] || g.class_id != dets[d].class_id) continue;
                const double v = iou(dets[d].box, g.box);
                if (v > best) {
                    best = v;
                    pick = j;
                }
            }
            if (pick < taken.size()) {
                taken[pick] = true;
                hits[d] = true;
            }
        }
    }
    return hits;
}

ApReport map50(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts) {
    if (gts.empty()) throw DataError("mAP needs at least one ground-truth box");
    const auto hits = match_by_iou(dets, gts, 0.5);
    ApReport report;
    report.map = mean_ap(dets, hits, gt_per_class(gts), &report.per_class, &report.curves);
    for (bool h : hits) (h ? report.counts.tp : report.counts.fp)++;
    report.counts.fn = gts.size() - report.counts.tp;
    return report;
}

ContrastRegion contrast_region(const Image& image, const Box& box) {
    const auto W = static_cast<long>(image.width), H = static_cast<long>(image.height);
    // pixel p covers [p, p + 1); its center p + 0.5 lies inside [lo, hi] for p in [ceil(lo - .5), floor(hi - .5)]
    auto span = [](double lo, double hi, long limit) {
        const long a = std::max(0L, static_cast<long>(std::ceil(lo - 0.5)));
        const long b = std::min(limit - 1, static_cast<long>(std::floor(hi - 0.5)));
        return std::pair<long, long>{a, b};
    };
    ContrastRegion r;
    std::vector<char> is_target(image.pixels.size(), 0);
    const auto [tx0, tx1] = span(box.x1, box.x2, W);
    const auto [ty0, ty1] = span(box.y1, box.y2, H);
    for (long y = ty0; y <= ty1; ++y)
        for (long x = tx0; x <= tx1; ++x) {
            const auto i = static_cast<std::size_t>(y * W + x);
            r.target.push_back(i);
            is_target[i] = 1;
        }
    if (r.target.empty()) {
        const auto x = static_cast<long>(std::floor(box.cx())), y = static_cast<long>(std::floor(box.cy()));
        if (x < 0 || y < 0 || x >= W || y >= H) throw RegionError("contrast region: box lies outside the image");
        const auto i = static_cast<std::size_t>(y * W + x);
        r.target.push_back(i);
        is_target[i] = 1;
    }
    const double grow = std::max({box.w(), box.h(), 1.0});
    const auto [bx0, bx1] = span(box.x1 - grow, box.x2 + grow, W);
    const auto [by0, by1] = span(box.y1 - grow, box.y2 + grow, H);
    for (long y = by0; y <= by1; ++y)
        for (long x = bx0; x <= bx1; ++x) {
            const auto i = static_cast<std::size_t>(y * W + x);
            if (!is_target[i]) r.background.push_back(i);
        }
    if (r.background.empty()) throw RegionError("contrast region: empty background annulus");

    for (std::size_t i : r.target) r.mean_target += image.pixels[i];
    r.mean_target /= static_cast<double>(r.target.size());
    for (std::size_t i : r.background) r.mean_background += image.pixels[i];
    r.mean_background /= static_cast<double>(r.background.size());
    double var = 0.0;
    for (std::size_t i : r.background) var += (image.pixels[i] - r.mean_background) * (image.pixels[i] - r.mean_background);
    r.std_background = std::sqrt(var / static_cast<double>(r.background.size()));
    return r;
}

double noco(const ContrastRegion& region) {
    return (region.mean_target - region.mean_background) / std::max(region.std_background, 1e-6);
}

double noco(const Image& image, const Box& box) { return noco(contrast_region(image, box)); }

double normalized_noco(double pred, double gt) {
    if (gt <= 1e-12) return pred >= gt ? 1.0 : 0.0;
    return std::clamp(pred / gt, 0.0, 1.0);
}

NocoApReport mnocoap_scored(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                            const ContrastScore& contrast) {
    if (gts.empty()) throw DataError("mNoCoAP needs at least one ground-truth box");
    const auto truths = truths_by_image(gts);
    const auto by_image = detections_by_image(dets);
    const auto n_gt = gt_per_class(gts);
    NocoApReport report;
    for (std::size_t t = 0; t < kNocoThresholds.size(); ++t) {
        const double delta = kNocoThresholds[t];
        std::vector<bool> hits(dets.size(), false);
        for (const auto& [img, order] : by_image) {
            auto it = truths.find(img);
            if (it == truths.end()) continue;
            std::vector<bool> taken(it->second.size(), false);
            for (std::size_t d : order) {
                const double px = dets[d].box.cx(), py = dets[d].box.cy();
                double nearest = 0.0;
                std::size_t pick = taken.size();
                for (std::size_t j = 0; j < it->second.size(); ++j) {
                    const auto& g = gts[it->second[j]];
                    if (taken[j] || g.class_id != dets[d].class_id || !g.box.contains(px, py)) continue;
                    const double dist = std::hypot(g.box.cx() - px, g.box.cy() - py);
                    if (pick == taken.size() || dist < nearest) {
                        nearest = dist;
                        pick = j;
                    }
                }
                if (pick < taken.size() && contrast(d, it->second[pick]) >= delta) {
                    taken[pick] = true;
                    hits[d] = true;
                }
            }
        }
        report.per_threshold[t] = mean_ap(dets, hits, n_gt, nullptr, nullptr);
    }
    double sum = 0.0;
    for (double v : report.per_threshold) sum += v;
    report.value = sum / static_cast<double>(report.per_threshold.size());
    return report;
}

NocoApReport mnocoap(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                     const std::vector<Image>& images, std::size_t jobs) {
    for (const auto& g : gts)
        if (g.image >= images.size()) throw DataError("ground truth refers to missing image " + std::to_string(g.image));
    for (const auto& d : dets)
        if (d.image >= images.size()) throw DataError("detection refers to missing image " + std::to_string(d.image));
    std::vector<double> gt_noco(gts.size()), det_noco(dets.size());
    parallel_for(gts.size(), jobs, [&](std::size_t i) { gt_noco[i] = noco(images[gts[i].image], gts[i].box); });
    parallel_for(dets.size(), jobs, [&](std::size_t i) {
        // a box entirely off the image has no measurable contrast
        try {
            det_noco[i] = noco(images[dets[i].image], dets[i].box);
        } catch (const RegionError&) {
            det_noco[i] = -std::numeric_limits<double>::infinity();
        }
    });
    return mnocoap_scored(dets, gts,
                          [&](std::size_t d, std::size_t g) { return normalized_noco(det_noco[d], gt_noco[g]); });
}

}  // namespace leirstd
