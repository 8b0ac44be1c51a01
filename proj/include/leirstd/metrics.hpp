#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "leirstd/box.hpp"
#include "leirstd/image.hpp"

namespace leirstd {

/// IoU of a square of side `box_size` with its copy moved by (s, s), per shift.
std::vector<std::pair<double, double>> iou_sensitivity(double box_size, const std::vector<double>& shifts);

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct PRF1 {
    double precision = 0, recall = 0, f1 = 0;
};

/// 0/0 is taken as 0 throughout.
PRF1 prf1(const ConfusionCounts& c);

/// A detection after matching: its score and whether it hit a ground truth.
struct ScoredMatch {
    double score = 0;
    bool tp = false;
};

struct PRPoint {
    double recall = 0, precision = 0;
};

/// Raw (recall, precision) after each detection, in descending score order.
/// Equal scores keep their input order.
std::vector<PRPoint> pr_curve(const std::vector<ScoredMatch>& dets, std::size_t n_gt);

/// All-point interpolated area under the precision envelope.
/// Throws UndefinedApError when n_gt is 0.
double average_precision(const std::vector<ScoredMatch>& dets, std::size_t n_gt);

/// Greedy one-to-one matching inside each image: detections by descending
/// score take the unmatched same-class ground truth of highest IoU, if that IoU
/// exceeds `iou_thresh`. Result is parallel to `dets`.
std::vector<bool> match_by_iou(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                               double iou_thresh = 0.5);

struct ApReport {
    double map = 0;
    std::map<std::size_t, double> per_class;  // classes present in the ground truth
    ConfusionCounts counts;
    std::map<std::size_t, std::vector<PRPoint>> curves;
};

/// mAP at IoU > 0.5 over the classes that have ground truth. Throws
/// DataError when there is no ground truth at all.
ApReport map50(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts);

/// Target pixels and background annulus for one box.
struct ContrastRegion {
    std::vector<std::size_t> target;      // pixel indices y * width + x
    std::vector<std::size_t> background;  // dilated box minus target, clipped
    double mean_target = 0, mean_background = 0, std_background = 0;
};

/// Target = pixels whose centers fall inside the box, or the pixel holding the
/// box center when none do. Background = the box grown by max(w, h, 1) on each
/// side, clipped, minus the target. Throws RegionError when the box misses
/// the image or the background is empty.
ContrastRegion contrast_region(const Image& image, const Box& box);

/// (mean_target - mean_background) / std_background with std guarded at 1e-6.
double noco(const ContrastRegion& region);
double noco(const Image& image, const Box& box);

/// NoCo of a prediction relative to that of its ground truth, clamped to [0, 1].
double normalized_noco(double pred, double gt);

inline constexpr std::array<double, 9> kNocoThresholds{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

struct NocoApReport {
    double value = 0;
    std::array<double, 9> per_threshold{};
};

/// Contrast score of detection `det` against ground truth `gt`, in [0, 1].
using ContrastScore = std::function<double(std::size_t det, std::size_t gt)>;

/// Centroid matching with a contrast requirement. For each threshold a
/// detection is a hit when its centroid is inside a not-yet-matched
/// same-class ground truth (nearest center wins) and its contrast score
/// against that ground truth reaches the threshold.
NocoApReport mnocoap_scored(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                            const ContrastScore& contrast);

/// Full computation from images. Throws DataError when a ground truth refers
/// to a missing image.
NocoApReport mnocoap(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                     const std::vector<Image>& images, std::size_t jobs = 1);

}  // namespace leirstd
