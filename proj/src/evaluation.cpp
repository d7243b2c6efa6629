#include "pointlab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pointlab {

ScaleBucket scale_bucket(const Box& gt_box) {
    const double area = gt_box.area();
    if (area < 32.0 * 32.0) return ScaleBucket::small;
    if (area < 96.0 * 96.0) return ScaleBucket::medium;
    return ScaleBucket::large;
}

namespace {

const char* bucket_name(ScaleBucket b) {
    switch (b) {
        case ScaleBucket::small: return "small";
        case ScaleBucket::medium: return "medium";
        case ScaleBucket::large: return "large";
    }
    return "?";
}

}  // namespace

MiouReport miou(const std::vector<LabeledObject>& pred, const std::vector<LabeledObject>& gt,
                bool kind_mask) {
    std::map<int, const LabeledObject*> by_id;
    for (const auto& p : pred) by_id[p.object_id] = &p;

    std::string orphans;
    for (const auto& g : gt)
        if (!by_id.count(g.object_id)) orphans += " " + std::to_string(g.object_id);
    if (pred.size() != gt.size() || !orphans.empty()) {
        std::string extra;
        std::map<int, bool> gt_ids;
        for (const auto& g : gt) gt_ids[g.object_id] = true;
        for (const auto& p : pred)
            if (!gt_ids.count(p.object_id)) extra += " " + std::to_string(p.object_id);
        throw std::runtime_error("miou: id mismatch; missing predictions for:" + orphans +
                                 "; unmatched predictions:" + extra);
    }

    MiouReport report;
    double sums[3] = {0, 0, 0};
    int counts[3] = {0, 0, 0};
    for (const auto& g : gt) {
        const auto& p = *by_id.at(g.object_id);
        double v = 0.0;
        if (kind_mask) {
            if (!p.mask || !g.mask)
                throw std::runtime_error("miou: mask missing for object " +
                                         std::to_string(g.object_id));
            v = mask_iou(*p.mask, *g.mask);
        } else {
            v = iou(p.box, g.box);
        }
        report.per_object.emplace_back(g.object_id, v);
        report.mean += v;
        const int b = static_cast<int>(scale_bucket(g.box));
        sums[b] += v;
        counts[b] += 1;
    }
    report.n = static_cast<int>(gt.size());
    if (report.n) report.mean /= report.n;
    report.n_small = counts[0];
    report.n_medium = counts[1];
    report.n_large = counts[2];
    report.mean_small = counts[0] ? sums[0] / counts[0] : 0.0;
    report.mean_medium = counts[1] ? sums[1] / counts[1] : 0.0;
    report.mean_large = counts[2] ? sums[2] / counts[2] : 0.0;
    return report;
}

std::map<double, double> pseudo_ap(const std::vector<LabeledObject>& pred,
                                   const std::vector<LabeledObject>& gt,
                                   const std::vector<double>& thresholds) {
    std::vector<std::size_t> order(pred.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pred[a].score > pred[b].score;
    });

    std::map<double, double> out;
    for (double thr : thresholds) {
        std::vector<bool> taken(gt.size(), false);
        std::vector<int> tp_flags;
        tp_flags.reserve(pred.size());
        for (std::size_t oi : order) {
            double best = 0.0;
            int best_g = -1;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                if (taken[g]) continue;
                const double v = iou(pred[oi].box, gt[g].box);
                if (v > best) {
                    best = v;
                    best_g = static_cast<int>(g);
                }
            }
            if (best_g >= 0 && best >= thr) {
                taken[best_g] = true;
                tp_flags.push_back(1);
            } else {
                tp_flags.push_back(0);
            }
        }
        // precision-recall points along the ranked list
        std::vector<double> precision, recall;
        int tp = 0;
        for (std::size_t i = 0; i < tp_flags.size(); ++i) {
            tp += tp_flags[i];
            precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
            recall.push_back(gt.empty() ? 0.0 : static_cast<double>(tp) / gt.size());
        }
        // interpolated precision: running max from the right
        for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
            precision[i] = std::max(precision[i], precision[i + 1]);
        double ap = 0.0;
        for (int ri = 0; ri <= 100; ++ri) {
            const double r = ri / 100.0;
            double p = 0.0;
            for (std::size_t i = 0; i < recall.size(); ++i)
                if (recall[i] >= r) {
                    p = precision[i];
                    break;
                }
            ap += p / 101.0;
        }
        out[thr] = ap;
    }
    return out;
}

IouHistogram iou_histogram(const MiouReport& report) {
    IouHistogram h;
    for (const auto& [id, v] : report.per_object) {
        (void)id;
        int bin = static_cast<int>(v * kHistogramBins);
        bin = std::clamp(bin, 0, kHistogramBins - 1);
        h.counts[bin] += 1;
        h.total += 1;
    }
    return h;
}

EvalReport evaluate(const std::vector<LabeledObject>& pred, const std::vector<LabeledObject>& gt,
                    const std::vector<double>& ap_thresholds) {
    EvalReport report;
    report.box = miou(pred, gt, false);
    report.histogram_box = iou_histogram(report.box);
    const bool have_masks = !gt.empty() &&
                            std::all_of(gt.begin(), gt.end(),
                                        [](const LabeledObject& o) { return o.mask.has_value(); }) &&
                            std::all_of(pred.begin(), pred.end(),
                                        [](const LabeledObject& o) { return o.mask.has_value(); });
    if (have_masks) {
        report.mask = miou(pred, gt, true);
        report.histogram_mask = iou_histogram(*report.mask);
    }
    report.ap = pseudo_ap(pred, gt, ap_thresholds);
    return report;
}

void write_eval_csv(const EvalReport& report, const std::vector<LabeledObject>& gt,
                    const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write csv: " + path.string());
    std::map<int, const LabeledObject*> gt_by_id;
    for (const auto& g : gt) gt_by_id[g.object_id] = &g;
    std::map<int, double> mask_iou_by_id;
    if (report.mask)
        for (const auto& [id, v] : report.mask->per_object) mask_iou_by_id[id] = v;

    out << "object_id,iou_box,iou_mask,scale_bucket\n";
    for (const auto& [id, v] : report.box.per_object) {
        out << id << "," << v << ",";
        if (auto it = mask_iou_by_id.find(id); it != mask_iou_by_id.end()) out << it->second;
        out << "," << bucket_name(scale_bucket(gt_by_id.at(id)->box)) << "\n";
    }
}

void write_histogram_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write csv: " + path.string());
    out << "bin_low,bin_high,count_box,count_mask\n";
    for (int i = 0; i < kHistogramBins; ++i) {
        out << static_cast<double>(i) / kHistogramBins << ","
            << static_cast<double>(i + 1) / kHistogramBins << "," << report.histogram_box.counts[i]
            << ",";
        if (report.histogram_mask) out << report.histogram_mask->counts[i];
        out << "\n";
    }
}

namespace {

void svg_bars(std::ostringstream& svg, const IouHistogram& h, int y_off, const char* title,
              const char* color) {
    const int bar_w = 28, chart_h = 160, x0 = 40;
    int max_count = 1;
    for (int c : h.counts) max_count = std::max(max_count, c);
    svg << "<text x='" << x0 << "' y='" << y_off - 8 << "' font-size='14'>" << title
        << " (n=" << h.total << ")</text>\n";
    for (int i = 0; i < kHistogramBins; ++i) {
        const int bh = h.counts[i] * chart_h / max_count;
        svg << "<rect x='" << x0 + i * bar_w << "' y='" << y_off + chart_h - bh << "' width='"
            << bar_w - 2 << "' height='" << bh << "' fill='" << color << "'/>\n";
        if (i % 4 == 0)
            svg << "<text x='" << x0 + i * bar_w << "' y='" << y_off + chart_h + 14
                << "' font-size='10'>" << static_cast<double>(i) / kHistogramBins << "</text>\n";
    }
    svg << "<line x1='" << x0 << "' y1='" << y_off + chart_h << "' x2='"
        << x0 + kHistogramBins * bar_w << "' y2='" << y_off + chart_h
        << "' stroke='black'/>\n";
}

}  // namespace

void write_histogram_svg(const EvalReport& report, const std::filesystem::path& path) {
    std::ostringstream svg;
    const int height = report.histogram_mask ? 440 : 220;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='" << height << "'>\n";
    svg_bars(svg, report.histogram_box, 30, "box IoU distribution", "#4878cf");
    if (report.histogram_mask)
        svg_bars(svg, *report.histogram_mask, 250, "mask IoU distribution", "#6acc65");
    svg << "</svg>\n";
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write svg: " + path.string());
    out << svg.str();
}

std::vector<LabeledObject> labels_from_dataset(const Dataset& ds, bool need_masks) {
    std::vector<LabeledObject> out;
    for (const auto& a : ds.annotations) {
        if (!a.bbox)
            throw std::runtime_error("labels_from_dataset: annotation " + std::to_string(a.id) +
                                     " has no bbox");
        LabeledObject obj;
        obj.object_id = a.id;
        obj.box = *a.bbox;
        obj.score = a.score.value_or(1.0);
        if (a.segmentation) obj.mask = *a.segmentation;
        if (need_masks && !obj.mask)
            throw std::runtime_error("labels_from_dataset: annotation " + std::to_string(a.id) +
                                     " has no segmentation");
        out.push_back(std::move(obj));
    }
    return out;
}

}  // namespace pointlab
