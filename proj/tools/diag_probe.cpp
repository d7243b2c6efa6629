// scratch harness: where does selection quality break down?
#include <cstdio>
#include <string>
#include <random>
#include <vector>

#include "pointlab/annotation.hpp"
#include "pointlab/cascade.hpp"
#include "pointlab/evaluation.hpp"
#include "pointlab/scene.hpp"

using namespace pointlab;

int main(int argc, char** argv) {
    const int n_scenes = argc > 1 ? std::atoi(argv[1]) : 30;
    const std::uint64_t seed = 424242;

    SceneSpec spec;
    if (argc > 4 && std::string(argv[4]) == "rect") spec.shape_kinds = {ShapeKind::rectangle};
    std::vector<SceneRecord> records;
    std::mt19937_64 qc_rng(seed);
    int next_id = 0;
    for (int i = 0; i < n_scenes; ++i) {
        auto rec = generate_scene(spec, mix_seed(seed, i));
        for (const auto& gt : rec.gts)
            rec.points.push_back(sample_qc_point(gt, QcSpec{}, qc_rng, next_id++));
        records.push_back(std::move(rec));
    }

    CascadeConfig cfg;
    cfg.plan = StagePlan::parse("cbp+pbr");
    cfg.threads = 2;
    cfg.seed = seed;
    if (argc > 2) cfg.sgd.epochs = std::atoi(argv[2]);
    if (argc > 3) cfg.sgd.lr = std::atof(argv[3]);
    if (argc > 2) cfg.sgd.decay_epochs = {cfg.sgd.epochs * 2 / 3, cfg.sgd.epochs * 11 / 12};
    if (argc > 5) cfg.sgd.weight_decay = std::atof(argv[5]);
    const auto result = run_pipeline(records, cfg);
    std::printf("aborted steps: %d, empty bags: %d\n", result.aborted_steps,
                result.empty_bag_events);

    // stage-0 selection diagnostics with the trained model
    double ceil_sum = 0, top1_sum = 0, merged_sum = 0, oracle_rank_sum = 0;
    int correct_class = 0, n = 0;
    double qc_offset = 0;
    for (std::size_t si = 0; si < records.size(); ++si) {
        const auto& rec = records[si];
        const auto lab = to_lab(rec.image);
        const ImageSize img{rec.image.width, rec.image.height};
        for (std::size_t j = 0; j < rec.points.size(); ++j) {
            const auto& pt = rec.points[j];
            const Box gt = rec.gts[j].box;
            qc_offset += std::hypot((pt.x - gt.cx) / gt.w, (pt.y - gt.cy) / gt.h);
            const auto anchors = cbp_sample(pt.x, pt.y, img, cfg.cbp_spec);
            Eigen::MatrixXd feats(anchors.size(), kRoiFeatureDim);
            for (std::size_t i = 0; i < anchors.size(); ++i)
                feats.row(i) = roi_features(lab, anchors[i]).values.transpose();
            const auto fwd = forward_bag(result.model, 0, feats, MilMode::cbp);

            double best_iou = 0;
            int best_i = 0;
            for (std::size_t i = 0; i < anchors.size(); ++i) {
                const double v = iou(anchors[i], gt);
                if (v > best_iou) {
                    best_iou = v;
                    best_i = static_cast<int>(i);
                }
            }
            int top1 = 0;
            double top1_score = -1;
            for (std::size_t i = 0; i < anchors.size(); ++i) {
                const double s = fwd.proposal_score(static_cast<int>(i), pt.category);
                if (s > top1_score) {
                    top1_score = s;
                    top1 = static_cast<int>(i);
                }
            }
            // rank of the oracle-best anchor under the model score
            int rank = 0;
            for (std::size_t i = 0; i < anchors.size(); ++i)
                if (fwd.proposal_score(static_cast<int>(i), pt.category) >
                    fwd.proposal_score(best_i, pt.category))
                    ++rank;
            oracle_rank_sum += rank;

            ceil_sum += best_iou;
            top1_sum += iou(anchors[top1], gt);
            int pred_class = 0;
            fwd.s_hat.maxCoeff(&pred_class);
            correct_class += pred_class == pt.category;

            const auto label = predict_pseudo(result.model, 0, MilMode::cbp, anchors, feats,
                                              pt.category, cfg.plan.topk);
            merged_sum += iou(label.box, gt);
            ++n;
        }
    }
    std::printf("stage0: anchors ceiling=%.3f top1=%.3f merged(k=4)=%.3f class-acc=%.3f "
                "oracle-rank=%.1f qc-offset=%.3f\n",
                ceil_sum / n, top1_sum / n, merged_sum / n,
                static_cast<double>(correct_class) / n, oracle_rank_sum / n, qc_offset / n);

    // stage-1 diagnostics around the emitted stage-0 boxes
    double ceil1 = 0, top1_1 = 0, merged1 = 0;
    int n1 = 0;
    std::size_t obj_index = 0;
    for (std::size_t si = 0; si < records.size(); ++si) {
        const auto& rec = records[si];
        const auto lab = to_lab(rec.image);
        const ImageSize img{rec.image.width, rec.image.height};
        for (std::size_t j = 0; j < rec.points.size(); ++j, ++obj_index) {
            const Box gt = rec.gts[j].box;
            const Box prev = result.history[obj_index][0].box;
            std::vector<Box> bag;
            for (const auto& b : pbr_sample(prev, cfg.pbr_spec))
                if (auto c = clip_box(b, img)) {
                    if (rec.points[j].x >= c->x1() && rec.points[j].x <= c->x2() &&
                        rec.points[j].y >= c->y1() && rec.points[j].y <= c->y2())
                        bag.push_back(*c);
                }
            if (bag.empty()) bag.push_back(prev);
            Eigen::MatrixXd feats(bag.size(), kRoiFeatureDim);
            for (std::size_t i = 0; i < bag.size(); ++i)
                feats.row(i) = roi_features(lab, bag[i]).values.transpose();
            const auto fwd = forward_bag(result.model, 1, feats, MilMode::pbr);
            double best = 0;
            for (const auto& b : bag) best = std::max(best, iou(b, gt));
            int top1 = 0;
            double s1 = -1;
            for (std::size_t i = 0; i < bag.size(); ++i) {
                const double s = fwd.proposal_score(static_cast<int>(i), rec.points[j].category);
                if (s > s1) {
                    s1 = s;
                    top1 = static_cast<int>(i);
                }
            }
            const auto lbl = predict_pseudo(result.model, 1, MilMode::pbr, bag, feats,
                                            rec.points[j].category, cfg.plan.topk);
            ceil1 += best;
            top1_1 += iou(bag[top1], gt);
            merged1 += iou(lbl.box, gt);
            ++n1;
        }
    }
    std::printf("stage1: bag ceiling=%.3f top1=%.3f merged(k=4)=%.3f\n", ceil1 / n1,
                top1_1 / n1, merged1 / n1);
    return 0;
}
