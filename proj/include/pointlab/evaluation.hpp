#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "pointlab/annotation.hpp"
#include "pointlab/geometry.hpp"

namespace pointlab {

struct LabeledObject {
    int object_id = 0;
    Box box;
    std::optional<Mask> mask;
    double score = 1.0;
};

// COCO-style area buckets on the GT box: small < 32^2 <= medium < 96^2 <= large.
enum class ScaleBucket { small, medium, large };
ScaleBucket scale_bucket(const Box& gt_box);

struct MiouReport {
    double mean = 0.0;
    double mean_small = 0.0, mean_medium = 0.0, mean_large = 0.0;
    int n = 0, n_small = 0, n_medium = 0, n_large = 0;
    std::vector<std::pair<int, double>> per_object;  // id -> iou, in gt order
};

// Pairs predictions to ground truth by object id; throws with the orphan
// ids when the sets do not match. kind_mask switches to mask IoU.
MiouReport miou(const std::vector<LabeledObject>& pred, const std::vector<LabeledObject>& gt,
                bool kind_mask);

// Direct pseudo-label AP (not a detector metric): greedy score-descending
// matching, one match per GT, 101-point interpolated PR area.
std::map<double, double> pseudo_ap(const std::vector<LabeledObject>& pred,
                                   const std::vector<LabeledObject>& gt,
                                   const std::vector<double>& thresholds);

inline constexpr int kHistogramBins = 20;

struct IouHistogram {
    std::array<int, kHistogramBins> counts{};
    int total = 0;
};

IouHistogram iou_histogram(const MiouReport& report);

struct EvalReport {
    MiouReport box;
    std::optional<MiouReport> mask;
    std::map<double, double> ap;
    IouHistogram histogram_box;
    std::optional<IouHistogram> histogram_mask;
};

EvalReport evaluate(const std::vector<LabeledObject>& pred, const std::vector<LabeledObject>& gt,
                    const std::vector<double>& ap_thresholds);

// One row per object: id, iou_box, iou_mask (empty when unavailable),
// scale bucket name.
void write_eval_csv(const EvalReport& report, const std::vector<LabeledObject>& gt,
                    const std::filesystem::path& path);
// Static bar chart of the box (and mask, when present) IoU distribution.
void write_histogram_svg(const EvalReport& report, const std::filesystem::path& path);
void write_histogram_csv(const EvalReport& report, const std::filesystem::path& path);

// Converts exported annotations into labeled objects (bbox required).
std::vector<LabeledObject> labels_from_dataset(const Dataset& ds, bool need_masks);

}  // namespace pointlab
