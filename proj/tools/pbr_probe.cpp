// scratch: does the negative-suppressed refinement stage rank tight boxes
// on top when the prior boxes are sane?
#include <cstdio>
#include <random>
#include <string>
#include <algorithm>
#include <vector>
#include "pointlab/annotation.hpp"
#include "pointlab/cascade.hpp"
#include "pointlab/evaluation.hpp"
#include "pointlab/scene.hpp"

using namespace pointlab;

int main(int argc, char** argv) {
    const int n_scenes = argc > 1 ? std::atoi(argv[1]) : 30;
    const int epochs = argc > 2 ? std::atoi(argv[2]) : 60;
    const double prior_noise = argc > 3 ? std::atof(argv[3]) : 0.2;
    const bool rect_only = argc > 4 && std::string(argv[4]) == "rect";
    const std::uint64_t seed = 424242;

    SceneSpec spec;
    if (rect_only) spec.shape_kinds = {ShapeKind::rectangle};
    std::vector<SceneRecord> records;
    std::mt19937_64 rng(seed);
    int next_id = 0;
    for (int i = 0; i < n_scenes; ++i) {
        auto rec = generate_scene(spec, mix_seed(seed, i));
        for (const auto& gt : rec.gts)
            rec.points.push_back(sample_qc_point(gt, QcSpec{}, rng, next_id++));
        records.push_back(std::move(rec));
    }

    // noisy-GT priors standing in for coarse boxes; slab mode mimics a
    // badly oversized, aspect-skewed coarse stage
    std::uniform_real_distribution<double> un(-prior_noise, prior_noise);
    const bool slab_mode = prior_noise >= 0.99;
    std::uniform_real_distribution<double> uscale(1.8, 3.2), uskew(0.6, 1.7);
    std::vector<std::vector<Box>> priors(records.size());
    for (std::size_t si = 0; si < records.size(); ++si)
        for (std::size_t j = 0; j < records[si].gts.size(); ++j) {
            const auto& gt = records[si].gts[j];
            if (slab_mode) {
                const double s = uscale(rng), k = uskew(rng);
                const auto& pt = records[si].points[j];
                priors[si].push_back(clip_box(Box{pt.x, pt.y, gt.box.w * s * k,
                                                  gt.box.h * s / k},
                                              ImageSize{records[si].image.width,
                                                        records[si].image.height})
                                         .value());
            } else {
                priors[si].push_back(Box{gt.box.cx + un(rng) * gt.box.w,
                                         gt.box.cy + un(rng) * gt.box.h,
                                         gt.box.w * (1.0 + un(rng)),
                                         gt.box.h * (1.0 + un(rng))});
            }
        }

    CascadeConfig cfg;
    cfg.plan = StagePlan::parse("cbp+pbr");
    cfg.seed = seed;
    MilModel model = MilModel::init(kRoiFeatureDim, 64, 64, 3, 2, false, seed);
    SgdState opt(model);
    LossConfig loss;

    const int stage = 1;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double lr = 0.02;
        if (epoch >= epochs * 2 / 3) lr *= 0.1;
        if (epoch >= epochs * 11 / 12) lr *= 0.1;
        for (std::size_t si = 0; si < records.size(); ++si) {
            const auto& rec = records[si];
            const auto lab = to_lab(rec.image);
            const ImageSize img{rec.image.width, rec.image.height};
            MilModel grads = zeros_like(model);
            const int m = static_cast<int>(rec.gts.size());
            std::vector<std::vector<Box>> bags(m);
            for (int j = 0; j < m; ++j) {
                for (const auto& b : pbr_sample(priors[si][j], cfg.pbr_spec))
                    if (auto c = clip_box(b, img)) {
                        if (rec.points[j].x >= c->x1() && rec.points[j].x <= c->x2() &&
                            rec.points[j].y >= c->y1() && rec.points[j].y <= c->y2())
                            bags[j].push_back(*c);
                    }
                if (bags[j].empty()) bags[j].push_back(priors[si][j]);
            }
            std::mt19937_64 neg_rng(mix_seed(seed, epoch * 1000 + si));
            std::vector<std::pair<double, double>> pts;
            for (const auto& p : rec.points) pts.emplace_back(p.x, p.y);
            const auto negs =
                sample_negatives(bags, img, 0.3, std::min(500, 20 * m), neg_rng, pts);
            double beta = 0.0;
            for (int j = 0; j < m; ++j) {
                Eigen::MatrixXd feats(bags[j].size(), kRoiFeatureDim);
                for (std::size_t i = 0; i < bags[j].size(); ++i)
                    feats.row(i) = roi_features(lab, bags[j][i]).values.transpose();
                const auto fwd = forward_bag(model, stage, feats, MilMode::pbr);
                Eigen::VectorXd label = Eigen::VectorXd::Zero(3);
                label[rec.points[j].category] = 1.0;
                const auto l = mil2_loss(fwd.s_hat, label, 1.0, loss.gamma);
                backward_bag(model, fwd, loss.alpha2 / m * l.d_s_hat, grads);
                beta += 1.0 / m;
            }
            if (!negs.empty()) {
                Eigen::MatrixXd nf(negs.size(), kRoiFeatureDim);
                for (std::size_t i = 0; i < negs.size(); ++i)
                    nf.row(i) = roi_features(lab, negs[i]).values.transpose();
                const auto nfwd = forward_negatives(model, stage, nf);
                const auto ln = neg_loss(nfwd.s, beta, loss.gamma);
                backward_negatives(model, nfwd, loss.alpha_neg * ln.d_s, grads);
            }
            sgd_step(model, grads, opt, lr, 0.9, 1e-4);
        }
    }

    // ranking quality of the trained refinement stage
    double ceil_sum = 0, top1_sum = 0, merged_sum = 0, prior_sum = 0;
    int n = 0;
    for (std::size_t si = 0; si < records.size(); ++si) {
        const auto& rec = records[si];
        const auto lab = to_lab(rec.image);
        const ImageSize img{rec.image.width, rec.image.height};
        for (std::size_t j = 0; j < rec.gts.size(); ++j) {
            const Box gt = rec.gts[j].box;
            std::vector<Box> bag;
            for (const auto& b : pbr_sample(priors[si][j], cfg.pbr_spec))
                if (auto c = clip_box(b, img)) {
                    if (rec.points[j].x >= c->x1() && rec.points[j].x <= c->x2() &&
                        rec.points[j].y >= c->y1() && rec.points[j].y <= c->y2())
                        bag.push_back(*c);
                }
            if (bag.empty()) bag.push_back(priors[si][j]);
            Eigen::MatrixXd feats(bag.size(), kRoiFeatureDim);
            for (std::size_t i = 0; i < bag.size(); ++i)
                feats.row(i) = roi_features(lab, bag[i]).values.transpose();
            const auto lbl = predict_pseudo(model, stage, MilMode::pbr, bag, feats,
                                            rec.points[j].category, 4);
            const auto fwd = forward_bag(model, stage, feats, MilMode::pbr);
            double best = 0;
            int top1 = 0;
            double s1 = -1;
            for (std::size_t i = 0; i < bag.size(); ++i) {
                best = std::max(best, iou(bag[i], gt));
                const double s = fwd.proposal_score(static_cast<int>(i), rec.points[j].category);
                if (s > s1) { s1 = s; top1 = static_cast<int>(i); }
            }
            prior_sum += iou(priors[si][j], gt);
            ceil_sum += best;
            top1_sum += iou(bag[top1], gt);
            merged_sum += iou(lbl.box, gt);
            ++n;
        }
    }
    std::printf("pbr-only: prior=%.3f ceiling=%.3f top1=%.3f merged=%.3f (noise=%.2f rect=%d)\n",
                prior_sum / n, ceil_sum / n, top1_sum / n, merged_sum / n, prior_noise,
                rect_only);

    // inspect the top-5 picks for the first few objects
    for (int si = 0; si < 2; ++si) {
        const auto& rec = records[si];
        const auto lab = to_lab(rec.image);
        const ImageSize img{rec.image.width, rec.image.height};
        const Box gt = rec.gts[0].box;
        std::vector<Box> bag;
        for (const auto& b : pbr_sample(priors[si][0], cfg.pbr_spec))
            if (auto c = clip_box(b, img)) {
                if (rec.points[0].x >= c->x1() && rec.points[0].x <= c->x2() &&
                    rec.points[0].y >= c->y1() && rec.points[0].y <= c->y2())
                    bag.push_back(*c);
            }
        if (bag.empty()) bag.push_back(priors[si][0]);
        Eigen::MatrixXd feats(bag.size(), kRoiFeatureDim);
        for (std::size_t i = 0; i < bag.size(); ++i)
            feats.row(i) = roi_features(lab, bag[i]).values.transpose();
        const auto fwd = forward_bag(model, stage, feats, MilMode::pbr);
        std::vector<std::pair<double, int>> ranked;
        for (std::size_t i = 0; i < bag.size(); ++i)
            ranked.push_back({fwd.proposal_score(static_cast<int>(i), rec.points[0].category),
                              static_cast<int>(i)});
        std::sort(ranked.rbegin(), ranked.rend());
        std::printf("scene %d cat=%d gt=(%.0f,%.0f,%.0f,%.0f) prior iou=%.3f\n", si,
                    rec.points[0].category, gt.cx, gt.cy, gt.w, gt.h, iou(priors[si][0], gt));
        for (int r = 0; r < 8; ++r) {
            const auto& b = bag[ranked[r].second];
            std::printf("  #%d S=%.4f cls=%.3f iou=%.3f w/gt=%.2f h/gt=%.2f dx/gt=%.2f dy/gt=%.2f\n",
                        r, ranked[r].first,
                        fwd.cls_score(ranked[r].second, rec.points[0].category),
                        iou(b, gt), b.w / gt.w, b.h / gt.h, (b.cx - gt.cx) / gt.w,
                        (b.cy - gt.cy) / gt.h);
        }
        double best = 0; int bi = 0;
        for (std::size_t i = 0; i < bag.size(); ++i)
            if (iou(bag[i], gt) > best) { best = iou(bag[i], gt); bi = static_cast<int>(i); }
        std::printf("  oracle-best S=%.4f cls=%.3f iou=%.3f\n",
                    fwd.proposal_score(bi, rec.points[0].category),
                    fwd.cls_score(bi, rec.points[0].category), best);
    }
    return 0;
}
