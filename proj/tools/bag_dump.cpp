// scratch: per-anchor score table for a few trained bags
#include <cstdio>
#include <random>
#include <vector>
#include "pointlab/annotation.hpp"
#include "pointlab/cascade.hpp"
#include "pointlab/scene.hpp"

using namespace pointlab;

int main(int argc, char** argv) {
    const int n_scenes = argc > 1 ? std::atoi(argv[1]) : 30;
    const std::uint64_t seed = 424242;
    SceneSpec spec;
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
    cfg.sgd.epochs = argc > 2 ? std::atoi(argv[2]) : 60;
    cfg.sgd.lr = argc > 3 ? std::atof(argv[3]) : 0.05;
    cfg.sgd.decay_epochs = {cfg.sgd.epochs * 2 / 3, cfg.sgd.epochs * 11 / 12};
    const auto result = run_pipeline(records, cfg);

    for (int scene : {0, 1}) {
        const auto& rec = records[scene];
        const auto lab = to_lab(rec.image);
        const ImageSize img{rec.image.width, rec.image.height};
        const auto& pt = rec.points[0];
        const Box gt = rec.gts[0].box;
        std::printf("scene %d obj0: cat=%d gt=(%.0f,%.0f,%.0f,%.0f) point=(%.0f,%.0f)\n", scene,
                    pt.category, gt.cx, gt.cy, gt.w, gt.h, pt.x, pt.y);
        const auto anchors = cbp_sample(pt.x, pt.y, img, cfg.cbp_spec);
        Eigen::MatrixXd feats(anchors.size(), kRoiFeatureDim);
        for (std::size_t i = 0; i < anchors.size(); ++i)
            feats.row(i) = roi_features(lab, anchors[i]).values.transpose();
        const auto fwd = forward_bag(result.model, 0, feats, MilMode::cbp);
        std::printf("  %4s %6s %6s %6s | %6s %6s %8s\n", "w", "h", "iou", "", "s_cls", "s_ins",
                    "S");
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            std::printf("  %4.0f %6.0f %6.3f %6s | %6.3f %6.4f %8.5f\n", anchors[i].w,
                        anchors[i].h, iou(anchors[i], gt), "",
                        fwd.cls_score(static_cast<int>(i), pt.category),
                        fwd.s_ins(fwd.inv_order[i], pt.category),
                        fwd.proposal_score(static_cast<int>(i), pt.category));
        }
    }
    return 0;
}
