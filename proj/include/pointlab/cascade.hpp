#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pointlab/geometry.hpp"
#include "pointlab/mil.hpp"
#include "pointlab/scene.hpp"

namespace pointlab {

enum class StageKind { cbp, pbr_basic, pbr_spsd };

// Ordered stage list; the first stage is always the coarse point-anchored
// one, and spatially self-distilled sampling may only close the cascade.
struct StagePlan {
    std::vector<StageKind> stages = {StageKind::cbp, StageKind::pbr_basic};
    int topk = 4;

    void validate() const;
    int pbr_iterations() const { return static_cast<int>(stages.size()) - 1; }
    bool has_spsd() const;

    // names: "cbp", "cbp+pbr", "cbp+pbr+pbr", "cbp+pbr+spsd", ...
    static StagePlan parse(const std::string& name, int topk = 4);
    std::string name() const;
};

struct PseudoLabel {
    Box box;
    double score = 0.0;  // mean of the merged top-k proposal scores
    Eigen::VectorXd object_feat;
    int object_id = 0;
};

struct CascadeConfig {
    CbpScaleSpec cbp_spec;
    PbrJitterSpec pbr_spec;
    LossConfig loss;
    SgdConfig sgd;
    StagePlan plan;
    double neg_iou_cap = 0.3;
    int neg_max = 500;       // per-image cap
    int neg_per_object = 20;
    double spsd_dedup_iou = 0.95;
    bool spsd_include_originals = true;
    bool merge_cls_only = false;  // diagnostic: rank proposals by S_cls alone
    double feature_noise = 0.15;  // train-time descriptor jitter (augmentation stand-in)
    int threads = 1;
    std::uint64_t seed = 0;
};

struct ObjectRef {
    int scene = 0;
    int index_in_scene = 0;
    int object_id = 0;
    int category = 0;
};

struct CascadeResult {
    MilModel model;
    std::vector<ObjectRef> objects;
    // one pseudo label per object per stage, emitted with the final model
    std::vector<std::vector<PseudoLabel>> history;
    std::vector<double> final_bag_scores;  // <c, S_hat> of the last stage
    std::vector<double> reg_loss_per_epoch;
    bool spsd_fell_back = false;
    int aborted_steps = 0;
    int empty_bag_events = 0;
};

// Trains all stages jointly (shared trunk, per-stage heads) on the
// annotated records and emits the per-stage pseudo-label history.
// Deterministic in (records, cfg), independent of cfg.threads.
CascadeResult run_pipeline(const std::vector<SceneRecord>& records, const CascadeConfig& cfg);

// Score-ranked top-k merge of one bag under a trained stage.
PseudoLabel predict_pseudo(const MilModel& m, int stage, MilMode mode,
                           std::span<const Box> boxes, const Eigen::MatrixXd& features,
                           int category, int k, bool cls_only = false, int object_id = 0);

// Applies the regression head to a sampled bag and forms the final-stage
// bag: decoded boxes, optionally joined with the raw ones, greedily
// deduplicated at the given IoU.
std::vector<Box> spsd_regress_bag(const MilModel& m, std::span<const Box> raw_boxes,
                                  const Eigen::MatrixXd& raw_features, const ImageSize& img,
                                  double dedup_iou, bool include_originals);

}  // namespace pointlab
