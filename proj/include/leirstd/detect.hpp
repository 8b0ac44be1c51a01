#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "leirstd/box.hpp"
#include "leirstd/data.hpp"
#include "leirstd/model.hpp"

namespace leirstd {

inline constexpr double kProbClamp = 1e-7;

/// Binary cross-entropy of one probability, clamped to [1e-7, 1 - 1e-7].
double bce(double p, double y);
/// Mean of `bce` over paired elements.
double bce_loss(std::span<const double> p, std::span<const double> y);

/// 1 - IoU + d^2 / c^2 + alpha * v. Throws DegenerateBoxError when `gt` has
/// zero area or either box is inverted.
double ciou_loss(const Box& pred, const Box& gt);

struct CiouTerms {
    double iou = 0, distance = 0, aspect = 0, alpha = 0, loss = 0;
};
CiouTerms ciou_terms(const Box& pred, const Box& gt);

/// -alpha (1 - p)^gamma log p, with p clamped from below at 1e-7.
double focal_term(double p, double alpha, double gamma);

/// Focal penalty on the two bins around `target`, linearly weighted by its
/// fractional position. `target` must already lie in [0, bins - 1].
double dfl_loss(std::span<const double> probs, double target, double alpha = 0.25, double gamma = 2.0);

struct LossWeights {
    double cls = 0.02;
    double box = 0.49;
    double dfl = 0.49;

    void validate() const;
};

/// One head cell responsible for one ground truth.
struct Positive {
    std::size_t scale = 0;
    std::size_t image = 0;  // index inside the batch
    std::size_t y = 0, x = 0;
    std::size_t gt = 0;  // index into that image's label list
    std::size_t class_id = 0;
    Box box;  // pixels
};

struct Assignment {
    std::vector<Positive> positives;

    /// Index into `positives` of the owner of a cell, or -1 for background.
    long owner(std::size_t scale, std::size_t image, std::size_t y, std::size_t x) const;
};

/// Scale whose size range [2 stride, 8 stride) holds the larger box side;
/// smaller boxes go to the finest scale, larger ones to the coarsest.
std::size_t scale_for(double size, const ModelConfig& cfg);

/// Center-cell assignment for a batch of label lists in normalized form.
/// Two ground truths landing on one cell: the larger area keeps it.
Assignment assign_targets(const std::vector<std::vector<GroundTruth>>& labels, const ModelConfig& cfg);

struct LossBreakdown {
    Tensor total;
    double cls = 0, box = 0, dfl = 0;
    std::size_t positives = 0;
    /// Regression targets beyond the last bin, clamped.
    std::size_t clamped_targets = 0;
};

struct FocalParams {
    double alpha = 0.25;
    double gamma = 2.0;
};

/// Weighted sum of classification over every cell (summed, divided by the
/// positive count), CIoU over positives (mean) and the bin penalty over the
/// four sides of every positive (mean).
LossBreakdown total_loss(const HeadOutputs& out, const Assignment& assignment, const ModelConfig& cfg,
                         const LossWeights& weights = {}, const FocalParams& focal = {});

/// Softmax expectation of one side's bins, in units of stride.
double expected_distance(std::span<const double> logits);

/// Box decoded at one cell from its raw channel vector.
Box decode_cell(std::span<const double> channels, std::size_t y, std::size_t x, std::size_t stride,
                const ModelConfig& cfg);

struct DecodeOptions {
    double score_thresh = 0.25;
    double nms_iou = 0.45;
};

/// Greedy per-class suppression. Output sorted by descending score, ties in
/// input order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Detections of batch element `n`, tagged with `image_id`, clipped to the
/// input frame.
std::vector<Detection> decode(const HeadOutputs& out, const ModelConfig& cfg, std::size_t n, std::size_t image_id,
                              const DecodeOptions& options = {});

}  // namespace leirstd
