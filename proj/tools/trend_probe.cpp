// scratch harness: mIoU by stage plan on a synthetic corpus
#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "pointlab/annotation.hpp"
#include "pointlab/cascade.hpp"
#include "pointlab/evaluation.hpp"
#include "pointlab/pixel.hpp"
#include "pointlab/scene.hpp"

using namespace pointlab;

int main(int argc, char** argv) {
    const int n_scenes = argc > 1 ? std::atoi(argv[1]) : 50;
    const int threads = argc > 2 ? std::atoi(argv[2]) : 2;
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
    std::printf("corpus: %d scenes, %d objects\n", n_scenes, next_id);

    std::vector<LabeledObject> gt;
    for (const auto& rec : records)
        for (std::size_t j = 0; j < rec.gts.size(); ++j)
            gt.push_back({rec.points[j].object_id, rec.gts[j].box, std::nullopt, 1.0});

    auto run_plan = [&](const std::string& plan) {
        CascadeConfig cfg;
        cfg.plan = StagePlan::parse(plan);
        cfg.threads = threads;
        cfg.seed = seed;
        const auto t0 = std::chrono::steady_clock::now();
        const auto result = run_pipeline(records, cfg);
        const auto t1 = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(t1 - t0).count();

        for (std::size_t stage = 0; stage < cfg.plan.stages.size(); ++stage) {
            std::vector<LabeledObject> pred;
            for (std::size_t o = 0; o < result.history.size(); ++o)
                pred.push_back({result.objects[o].object_id, result.history[o][stage].box,
                                std::nullopt, result.history[o][stage].score});
            const auto rep = miou(pred, gt, false);
            std::printf("plan=%-14s stage=%zu miou=%.4f (s=%.3f m=%.3f l=%.3f) time=%.1fs%s\n",
                        plan.c_str(), stage, rep.mean, rep.mean_small, rep.mean_medium,
                        rep.mean_large, secs,
                        result.spsd_fell_back ? " [spsd-fallback]" : "");
        }
        return result;
    };

    run_plan("cbp");
    run_plan("cbp+pbr");
    run_plan("cbp+pbr+pbr+pbr+pbr");
    const auto full = run_plan("cbp+pbr+spsd");

    // pixel refinement probe on the full plan
    PixelConfig pix;
    std::vector<PixelSceneInputs> scenes(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto lab = to_lab(records[i].image);
        scenes[i].grid = pixel_feature_map(lab, pix.stride);
        scenes[i].field = affinity(lab, pix.stride, pix.sigma_c);
        scenes[i].width = records[i].image.width;
        scenes[i].height = records[i].image.height;
    }
    std::vector<PixelObjectTask> tasks;
    for (std::size_t o = 0; o < full.history.size(); ++o) {
        const auto& last = full.history[o].back();
        tasks.push_back({full.objects[o].scene, full.objects[o].object_id,
                         full.objects[o].category, last.box, last.object_feat,
                         full.final_bag_scores[o]});
    }
    for (BspRegion region : {BspRegion::none, BspRegion::both}) {
        PixelConfig p2 = pix;
        p2.bsp = region;
        const auto t0 = std::chrono::steady_clock::now();
        const auto pr = train_pixel_head(scenes, tasks, p2, LossConfig{}, SgdConfig{}, seed, threads);
        const auto t1 = std::chrono::steady_clock::now();
        std::vector<LabeledObject> refined;
        for (const auto& out : pr.outputs)
            refined.push_back({out.object_id, out.refined_box, std::nullopt, 1.0});
        const auto rep = miou(refined, gt, false);
        // mask iou vs gt masks
        std::vector<LabeledObject> gt_m, pred_m;
        std::size_t oi = 0;
        for (const auto& rec : records)
            for (std::size_t j = 0; j < rec.gts.size(); ++j) {
                gt_m.push_back({rec.points[j].object_id, rec.gts[j].box, rec.gts[j].mask, 1.0});
                ++oi;
            }
        for (const auto& out : pr.outputs)
            pred_m.push_back({out.object_id, out.refined_box, out.mask, 1.0});
        const auto rep_m = miou(pred_m, gt_m, true);
        std::printf("pixel bsp=%-5s refined-box miou=%.4f mask miou=%.4f loss %.4f->%.4f%s time=%.1fs\n",
                    region == BspRegion::none ? "off" : "both", rep.mean, rep_m.mean,
                    pr.first_epoch_loss, pr.last_epoch_loss, pr.diverged ? " [diverged]" : "",
                    std::chrono::duration<double>(t1 - t0).count());
    }
    return 0;
}
