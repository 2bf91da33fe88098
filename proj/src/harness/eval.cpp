#include "icd/harness/eval.hpp"

#include <algorithm>
#include <cmath>

namespace icd {

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> keep;
    for (const auto& d : dets) {
        const bool suppressed = std::any_of(keep.begin(), keep.end(), [&](const Detection& k) {
            return k.category == d.category && iou(k.box, d.box) > iou_threshold;
        });
        if (!suppressed) keep.push_back(d);
    }
    return keep;
}

std::vector<Detection> decode_detections(const DensePredictions& preds, double score_threshold,
                                         double nms_iou) {
    const std::size_t nc = preds.logits.size(1);
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < preds.cells(); ++i) {
        const Center& c = preds.centers[i];
        const double l = preds.ltrb.at(i, 0), t = preds.ltrb.at(i, 1);
        const double r = preds.ltrb.at(i, 2), b = preds.ltrb.at(i, 3);
        const double x1 = std::clamp(c.x - l, 0.0, 1.0), y1 = std::clamp(c.y - t, 0.0, 1.0);
        const double x2 = std::clamp(c.x + r, 0.0, 1.0), y2 = std::clamp(c.y + b, 0.0, 1.0);
        if (!(x2 > x1) || !(y2 > y1)) continue;
        for (std::size_t k = 0; k < nc; ++k) {
            const double p = 1.0 / (1.0 + std::exp(-preds.logits.at(i, k)));
            if (p < score_threshold) continue;
            dets.push_back({k, p, Box::from_corners(x1, y1, x2, y2)});
        }
    }
    return nms(std::move(dets), nms_iou);
}

double eleven_point_ap(std::vector<ScoredHit> hits, std::size_t gt_count) {
    if (gt_count == 0) return 0.0;
    std::stable_sort(hits.begin(), hits.end(),
                     [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < hits.size(); ++k) {
        tp += hits[k].true_positive ? 1 : 0;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    }
    double ap = 0.0;
    for (int step = 0; step <= 10; ++step) {
        const double r = step / 10.0;
        double best = 0.0;
        for (std::size_t k = 0; k < recall.size(); ++k) {
            if (recall[k] >= r) best = std::max(best, precision[k]);
        }
        ap += best / 11.0;
    }
    return ap;
}

double mean_ap(std::span<const std::vector<Detection>> detections,
               std::span<const std::vector<Instance>> ground_truth, std::size_t num_classes) {
    if (detections.size() != ground_truth.size()) {
        throw ContractError("mean_ap: detections and ground truth cover different scene counts");
    }
    double total = 0.0;
    std::size_t classes_with_gt = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t gt_count = 0;
        std::vector<ScoredHit> hits;
        for (std::size_t s = 0; s < detections.size(); ++s) {
            std::vector<const Instance*> gts;
            for (const auto& g : ground_truth[s]) {
                if (g.category == c && g.is_real) gts.push_back(&g);
            }
            gt_count += gts.size();
            std::vector<const Detection*> dets;
            for (const auto& d : detections[s]) {
                if (d.category == c) dets.push_back(&d);
            }
            std::stable_sort(dets.begin(), dets.end(),
                             [](const Detection* a, const Detection* b) { return a->score > b->score; });
            std::vector<bool> used(gts.size(), false);
            for (const Detection* d : dets) {
                double best = kMatchIou;
                std::ptrdiff_t match = -1;
                for (std::size_t g = 0; g < gts.size(); ++g) {
                    if (used[g]) continue;
                    const double o = iou(d->box, gts[g]->box);
                    if (o >= best) {
                        best = o;
                        match = static_cast<std::ptrdiff_t>(g);
                    }
                }
                if (match >= 0) used[static_cast<std::size_t>(match)] = true;
                hits.push_back({d->score, match >= 0});
            }
        }
        if (gt_count == 0) continue;
        ++classes_with_gt;
        total += eleven_point_ap(std::move(hits), gt_count);
    }
    return classes_with_gt ? total / static_cast<double>(classes_with_gt) : 0.0;
}

double evaluate_toy_ap(const ToyDetector& det, std::span<const Scene> scenes) {
    if (scenes.empty()) throw ContractError("evaluate_toy_ap: no scenes");
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<Instance>> gts;
    for (const auto& s : scenes) {
        dets.push_back(decode_detections(det.head_forward(det.backbone_forward(s.image))));
        gts.push_back(s.instances);
    }
    return mean_ap(dets, gts, det.config().num_classes);
}

}  // namespace icd
