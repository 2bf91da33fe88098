#pragma once

#include <span>
#include <vector>

#include "icd/harness/scene.hpp"
#include "icd/instance.hpp"
#include "icd/pyramid.hpp"

namespace icd {

struct Detection {
    std::size_t category = 0;
    double score = 0.0;
    Box box;
};

inline constexpr double kScoreThreshold = 0.5;
inline constexpr double kNmsIou = 0.5;
inline constexpr double kMatchIou = 0.5;

// Thresholded, class-wise greedy-NMS detections from dense predictions.
std::vector<Detection> decode_detections(const DensePredictions& preds,
                                         double score_threshold = kScoreThreshold,
                                         double nms_iou = kNmsIou);

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// VOC-style 11-point interpolated AP for one class. `dets` carry the scene
// index they came from; `gt_count` is the number of ground truths.
struct ScoredHit {
    double score = 0.0;
    bool true_positive = false;
};
double eleven_point_ap(std::vector<ScoredHit> hits, std::size_t gt_count);

// Mean over classes that have ground truth of the per-class AP, matching at
// IoU >= 0.5. detections[s] are the predictions for scene s.
double mean_ap(std::span<const std::vector<Detection>> detections,
               std::span<const std::vector<Instance>> ground_truth, std::size_t num_classes);

double evaluate_toy_ap(const ToyDetector& det, std::span<const Scene> scenes);

}  // namespace icd
