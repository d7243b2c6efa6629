#include "pointlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pointlab {

double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    const double iy = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

std::optional<Box> clip_box(const Box& b, const ImageSize& img) {
    const double x1 = std::max(b.x1(), 0.0);
    const double y1 = std::max(b.y1(), 0.0);
    const double x2 = std::min(b.x2(), static_cast<double>(img.width));
    const double y2 = std::min(b.y2(), static_cast<double>(img.height));
    if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) return std::nullopt;
    return Box::from_corners(x1, y1, x2, y2);
}

std::vector<Box> cbp_sample(double px, double py, const ImageSize& img,
                            const CbpScaleSpec& spec) {
    if (px < 0.0 || py < 0.0 || px > img.width || py > img.height)
        throw std::invalid_argument("cbp_sample: point outside image");
    const double f =
        spec.delta * std::min(img.width, img.height) / 100.0;
    std::vector<Box> out;
    out.reserve(spec.sizes.size() * spec.ratios.size());
    for (double s : spec.sizes) {
        for (double v : spec.ratios) {
            const Box raw{px, py, v * s * f, s / v * f};
            if (auto c = clip_box(raw, img)) out.push_back(*c);
        }
    }
    return out;
}

std::vector<Box> pbr_sample(const Box& base, const PbrJitterSpec& spec) {
    std::vector<Box> out;
    out.reserve(spec.w_multipliers.size() * spec.h_multipliers.size() *
                spec.center_offsets.size());
    for (double mw : spec.w_multipliers) {
        for (double mh : spec.h_multipliers) {
            for (auto [ox, oy] : spec.center_offsets) {
                const double w = mw * base.w;
                const double h = mh * base.h;
                out.push_back(Box{base.cx + w * ox, base.cy + h * oy, w, h});
            }
        }
    }
    return out;
}

std::vector<Box> sample_negatives(const std::vector<std::vector<Box>>& positive_bags,
                                  const ImageSize& img, double iou_cap,
                                  int target_count, std::mt19937_64& rng,
                                  std::span<const std::pair<double, double>> keep_out_points) {
    std::size_t n_pos = 0;
    for (const auto& bag : positive_bags) n_pos += bag.size();
    if (n_pos == 0)
        throw std::invalid_argument("sample_negatives: no positive proposals");
    if (iou_cap <= 0.0 || iou_cap >= 1.0)
        throw std::invalid_argument("sample_negatives: iou_cap outside (0,1)");

    const double w_max = img.width;
    const double h_max = img.height;
    const double s_min = 4.0;
    std::uniform_real_distribution<double> ux(0.0, w_max);
    std::uniform_real_distribution<double> uy(0.0, h_max);
    // log-uniform sizes, mimicking the multi-scale anchor spread
    std::uniform_real_distribution<double> ulw(std::log(s_min), std::log(w_max));
    std::uniform_real_distribution<double> ulh(std::log(s_min), std::log(h_max));

    std::vector<Box> out;
    out.reserve(target_count);
    long budget = 50L * target_count;
    while (static_cast<int>(out.size()) < target_count && budget-- > 0) {
        const Box raw{ux(rng), uy(rng), std::exp(ulw(rng)), std::exp(ulh(rng))};
        auto cand = clip_box(raw, img);
        if (!cand) continue;
        bool ok = true;
        for (const auto& [px, py] : keep_out_points) {
            if (px >= cand->x1() && px <= cand->x2() && py >= cand->y1() && py <= cand->y2()) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        for (const auto& bag : positive_bags) {
            for (const auto& p : bag) {
                if (iou(*cand, p) >= iou_cap) {
                    ok = false;
                    break;
                }
            }
            if (!ok) break;
        }
        if (ok) out.push_back(*cand);
    }
    return out;
}

MergeResult topk_merge(std::span<const Box> boxes, std::span<const double> scores,
                       const Eigen::MatrixXd& features, int k) {
    const auto u = boxes.size();
    if (k < 1) throw std::invalid_argument("topk_merge: k < 1");
    if (u == 0 || scores.size() != u ||
        static_cast<std::size_t>(features.rows()) != u)
        throw std::invalid_argument("topk_merge: inconsistent bag sizes");

    std::vector<std::size_t> order(u);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const std::size_t kk = std::min<std::size_t>(k, u);

    if (kk == 1) {  // degenerate top-1: bit-exact copy of the argmax entry
        const std::size_t best = order[0];
        return MergeResult{boxes[best], features.row(best).transpose(), scores[best],
                           scores[best] == 0.0};
    }

    MergeResult r;
    r.feature = Eigen::VectorXd::Zero(features.cols());
    double wsum = 0.0, ssum = 0.0;
    for (std::size_t i = 0; i < kk; ++i) ssum += scores[order[i]];
    r.zero_score_fallback = (ssum == 0.0);
    Box acc{0, 0, 0, 0};
    for (std::size_t i = 0; i < kk; ++i) {
        const std::size_t idx = order[i];
        const double w = r.zero_score_fallback ? 1.0 : scores[idx];
        acc.cx += w * boxes[idx].cx;
        acc.cy += w * boxes[idx].cy;
        acc.w += w * boxes[idx].w;
        acc.h += w * boxes[idx].h;
        r.feature += w * features.row(idx).transpose();
        wsum += w;
    }
    acc.cx /= wsum;
    acc.cy /= wsum;
    acc.w /= wsum;
    acc.h /= wsum;
    r.box = acc;
    r.feature /= wsum;
    r.score = ssum / static_cast<double>(kk);
    return r;
}

BoxDeltas encode_deltas(const Box& base, const Box& target) {
    return BoxDeltas{(target.cx - base.cx) / base.w, (target.cy - base.cy) / base.h,
                     std::log(target.w / base.w), std::log(target.h / base.h)};
}

Box decode_deltas(const Box& base, const BoxDeltas& d) {
    return Box{base.cx + d.dx * base.w, base.cy + d.dy * base.h,
               base.w * std::exp(d.dw), base.h * std::exp(d.dh)};
}

}  // namespace pointlab
