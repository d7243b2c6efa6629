#include "pointlab/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "parallel.hpp"

namespace pointlab {

void StagePlan::validate() const {
    if (stages.empty() || stages.front() != StageKind::cbp)
        throw std::invalid_argument("stage plan must start with cbp");
    for (std::size_t i = 1; i < stages.size(); ++i)
        if (stages[i] == StageKind::cbp)
            throw std::invalid_argument("cbp may only be the first stage");
    for (std::size_t i = 0; i + 1 < stages.size(); ++i)
        if (stages[i] == StageKind::pbr_spsd)
            throw std::invalid_argument("spsd sampling may only be the last stage");
    if (topk < 1) throw std::invalid_argument("top-k must be at least 1");
}

bool StagePlan::has_spsd() const {
    return !stages.empty() && stages.back() == StageKind::pbr_spsd;
}

StagePlan StagePlan::parse(const std::string& name, int topk) {
    StagePlan plan;
    plan.topk = topk;
    plan.stages.clear();
    std::size_t pos = 0;
    while (pos <= name.size()) {
        const std::size_t next = name.find('+', pos);
        const std::string tok = name.substr(pos, next == std::string::npos ? next : next - pos);
        if (tok == "cbp")
            plan.stages.push_back(StageKind::cbp);
        else if (tok == "pbr")
            plan.stages.push_back(StageKind::pbr_basic);
        else if (tok == "spsd")
            plan.stages.push_back(StageKind::pbr_spsd);
        else
            throw std::invalid_argument("unknown stage name '" + tok + "' in plan '" + name + "'");
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    plan.validate();
    return plan;
}

std::string StagePlan::name() const {
    std::string out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i) out += '+';
        switch (stages[i]) {
            case StageKind::cbp: out += "cbp"; break;
            case StageKind::pbr_basic: out += "pbr"; break;
            case StageKind::pbr_spsd: out += "spsd"; break;
        }
    }
    return out;
}

PseudoLabel predict_pseudo(const MilModel& m, int stage, MilMode mode,
                           std::span<const Box> boxes, const Eigen::MatrixXd& features,
                           int category, int k, bool cls_only, int object_id) {
    const auto fwd = forward_bag(m, stage, features, mode);
    const int u = fwd.bag_size();
    std::vector<double> scores(u);
    for (int i = 0; i < u; ++i)
        scores[i] = cls_only ? fwd.cls_score(i, category) : fwd.proposal_score(i, category);
    Eigen::MatrixXd trunk_feats(u, m.d_feat());
    for (int i = 0; i < u; ++i) trunk_feats.row(i) = fwd.trunk_feature(i).transpose();
    const auto merged = topk_merge(boxes, scores, trunk_feats, k);
    return PseudoLabel{merged.box, merged.score, merged.feature, object_id};
}

std::vector<Box> spsd_regress_bag(const MilModel& m, std::span<const Box> raw_boxes,
                                  const Eigen::MatrixXd& raw_features, const ImageSize& img,
                                  double dedup_iou, bool include_originals) {
    const auto reg = forward_reg(m, raw_features);
    std::vector<Box> candidates;
    candidates.reserve(raw_boxes.size() * 2);
    for (std::size_t i = 0; i < raw_boxes.size(); ++i) {
        const BoxDeltas d{reg.pred(i, 0), reg.pred(i, 1), reg.pred(i, 2), reg.pred(i, 3)};
        if (auto c = clip_box(decode_deltas(raw_boxes[i], d), img)) candidates.push_back(*c);
    }
    if (include_originals)
        for (const auto& b : raw_boxes) candidates.push_back(b);

    std::vector<Box> kept;
    for (const auto& c : candidates) {
        bool dup = false;
        for (const auto& kb : kept)
            if (iou(c, kb) > dedup_iou) {
                dup = true;
                break;
            }
        if (!dup) kept.push_back(c);
    }
    return kept;
}

// ---------------------------------------------------------------------------

namespace {

struct ObjectInputs {
    int object_id = 0;
    int category = 0;
    double px = 0.0, py = 0.0;
    std::vector<Box> cbp_boxes;
    Eigen::MatrixXd cbp_features;
    Eigen::VectorXd label;  // one-hot K
};

struct SceneInputs {
    ImageSize size;
    std::vector<ObjectInputs> objects;
    std::vector<std::pair<double, double>> points;
};

Eigen::MatrixXd features_for(const LabImage& lab, const std::vector<Box>& boxes) {
    Eigen::MatrixXd f(boxes.size(), kRoiFeatureDim);
    for (std::size_t i = 0; i < boxes.size(); ++i)
        f.row(i) = roi_features(lab, boxes[i]).values.transpose();
    return f;
}

std::vector<double> gt_scores(const BagForward& fwd, int category, bool cls_only) {
    std::vector<double> s(fwd.bag_size());
    for (int i = 0; i < fwd.bag_size(); ++i)
        s[i] = cls_only ? fwd.cls_score(i, category) : fwd.proposal_score(i, category);
    return s;
}

Eigen::MatrixXd trunk_features_of(const BagForward& fwd, int d_feat) {
    Eigen::MatrixXd f(fwd.bag_size(), d_feat);
    for (int i = 0; i < fwd.bag_size(); ++i) f.row(i) = fwd.trunk_feature(i).transpose();
    return f;
}

// per-scene forward/backward for one optimization step
struct SceneStepOutput {
    double loss = 0.0;
    double reg_loss_sum = 0.0;
    int reg_count = 0;
    int empty_bags = 0;
    bool finite = true;
};

struct SceneWorkspace {
    LabImage lab;
};

SceneStepOutput scene_step(const MilModel& model, const SceneInputs& inputs,
                           const CascadeConfig& cfg, std::uint64_t neg_seed_base,
                           bool with_grads, MilModel* grads,
                           std::vector<std::vector<PseudoLabel>>* emit,
                           std::vector<double>* emit_bag_scores, bool spsd_active,
                           const LabImage& lab) {
    SceneStepOutput out;
    const int n_obj = static_cast<int>(inputs.objects.size());
    if (n_obj == 0) return out;
    const double inv_m = 1.0 / n_obj;
    const int n_stages = static_cast<int>(cfg.plan.stages.size());

    // train-time descriptor jitter; emission keeps features clean
    std::mt19937_64 noise_rng(mix_seed(neg_seed_base, 0x11f2ULL));
    std::normal_distribution<double> noise(0.0, cfg.feature_noise);
    auto jitter = [&](Eigen::MatrixXd f) {
        if (with_grads && cfg.feature_noise > 0.0)
            for (Eigen::Index r = 0; r < f.rows(); ++r)
                for (Eigen::Index c = 0; c < f.cols(); ++c) f(r, c) += noise(noise_rng);
        return f;
    };

    std::vector<Box> prev_box(n_obj);
    std::vector<double> prev_score(n_obj);
    std::vector<Eigen::VectorXd> last_feat(n_obj);
    std::vector<double> last_merge_score(n_obj);

    // ---- coarse stage on the fixed point-anchored bags
    for (int j = 0; j < n_obj; ++j) {
        const auto& obj = inputs.objects[j];
        const auto fwd = forward_bag(model, 0, jitter(obj.cbp_features), MilMode::cbp);
        const auto l = cbp_loss(fwd.s_hat, obj.label, cfg.loss.alpha1);
        out.loss += inv_m * l.value;
        if (with_grads) backward_bag(model, fwd, inv_m * l.d_s_hat, *grads);
        prev_score[j] = fwd.s_hat.dot(obj.label);

        const auto scores = gt_scores(fwd, obj.category, cfg.merge_cls_only);
        const auto merged = topk_merge(obj.cbp_boxes, scores,
                                       trunk_features_of(fwd, model.d_feat()), cfg.plan.topk);
        prev_box[j] = merged.box;
        last_feat[j] = merged.feature;
        last_merge_score[j] = merged.score;
        if (emit)
            (*emit)[j].push_back(
                PseudoLabel{merged.box, merged.score, merged.feature, obj.object_id});
        if (emit_bag_scores) (*emit_bag_scores)[j] = prev_score[j];
    }

    // ---- refinement stages
    for (int stage = 1; stage < n_stages; ++stage) {
        const bool spsd = cfg.plan.stages[stage] == StageKind::pbr_spsd && spsd_active;
        const bool spsd_requested = cfg.plan.stages[stage] == StageKind::pbr_spsd;
        const double beta = [&] {
            double b = 0.0;
            for (int j = 0; j < n_obj; ++j) b += inv_m * prev_score[j];
            return b;
        }();

        std::vector<std::vector<Box>> bags(n_obj);
        std::vector<Eigen::MatrixXd> bag_feats(n_obj);
        std::vector<double> new_scores(n_obj);

        for (int j = 0; j < n_obj; ++j) {
            const auto& obj = inputs.objects[j];
            // clip, and keep only proposals that still contain the
            // annotated point: the box of this instance must cover it
            std::vector<Box> raw;
            for (const auto& b : pbr_sample(prev_box[j], cfg.pbr_spec)) {
                if (auto c = clip_box(b, inputs.size)) {
                    if (obj.px >= c->x1() && obj.px <= c->x2() && obj.py >= c->y1() &&
                        obj.py <= c->y2())
                        raw.push_back(*c);
                }
            }
            if (raw.empty()) {
                ++out.empty_bags;
                if (auto c = clip_box(prev_box[j], inputs.size))
                    raw.push_back(*c);
                else
                    raw.push_back(Box{inputs.size.width / 2.0, inputs.size.height / 2.0, 4, 4});
            }
            Eigen::MatrixXd raw_feats = jitter(features_for(lab, raw));

            if (spsd_requested) {
                // regression toward the stage's incoming pseudo box, trained
                // dataset-wide through the shared head
                const auto reg = forward_reg(model, raw_feats);
                Eigen::MatrixXd targets(raw.size(), 4);
                for (std::size_t i = 0; i < raw.size(); ++i) {
                    const auto d = encode_deltas(raw[i], prev_box[j]);
                    targets.row(i) << d.dx, d.dy, d.dw, d.dh;
                }
                const auto lreg = l1_loss(reg.pred, targets);
                out.loss += inv_m * lreg.value;
                out.reg_loss_sum += lreg.value;
                out.reg_count += 1;
                if (with_grads) backward_reg(model, reg, inv_m * lreg.d_pred, *grads);
            }

            if (spsd) {
                bags[j] = spsd_regress_bag(model, raw, raw_feats, inputs.size,
                                           cfg.spsd_dedup_iou, cfg.spsd_include_originals);
                bag_feats[j] = jitter(features_for(lab, bags[j]));
            } else {
                bags[j] = std::move(raw);
                bag_feats[j] = std::move(raw_feats);
            }
            // (spsd path recomputes clean features for the deduped bag)
        }

        // fresh negatives against the union of this stage's positives;
        // annotated points are kept out so badly scaled priors cannot
        // turn on-object boxes into negatives
        std::mt19937_64 neg_rng(mix_seed(neg_seed_base, static_cast<std::uint64_t>(stage)));
        const int target =
            std::min(cfg.neg_max, cfg.neg_per_object * std::max(1, n_obj));
        const auto negatives =
            sample_negatives(bags, inputs.size, cfg.neg_iou_cap, target, neg_rng, inputs.points);

        for (int j = 0; j < n_obj; ++j) {
            const auto& obj = inputs.objects[j];
            const auto fwd = forward_bag(model, stage, bag_feats[j], MilMode::pbr);
            const auto l = mil2_loss(fwd.s_hat, obj.label, prev_score[j], cfg.loss.gamma);
            out.loss += cfg.loss.alpha2 * inv_m * l.value;
            if (with_grads)
                backward_bag(model, fwd, cfg.loss.alpha2 * inv_m * l.d_s_hat, *grads);
            new_scores[j] = fwd.s_hat.dot(obj.label);

            const auto scores = gt_scores(fwd, obj.category, cfg.merge_cls_only);
            const auto merged = topk_merge(bags[j], scores,
                                           trunk_features_of(fwd, model.d_feat()), cfg.plan.topk);
            prev_box[j] = merged.box;
            last_feat[j] = merged.feature;
            last_merge_score[j] = merged.score;
            if (emit)
                (*emit)[j].push_back(
                    PseudoLabel{merged.box, merged.score, merged.feature, obj.object_id});
            if (emit_bag_scores) (*emit_bag_scores)[j] = new_scores[j];
        }

        if (!negatives.empty()) {
            const auto neg_fwd =
                forward_negatives(model, stage, jitter(features_for(lab, negatives)));
            const auto ln = neg_loss(neg_fwd.s, beta, cfg.loss.gamma);
            out.loss += cfg.loss.alpha_neg * ln.value;
            if (with_grads)
                backward_negatives(model, neg_fwd, cfg.loss.alpha_neg * ln.d_s, *grads);
        }
        prev_score = new_scores;
    }

    out.finite = std::isfinite(out.loss);
    return out;
}

}  // namespace

CascadeResult run_pipeline(const std::vector<SceneRecord>& records, const CascadeConfig& cfg) {
    cfg.plan.validate();
    const int n_scenes = static_cast<int>(records.size());
    if (n_scenes == 0) throw std::invalid_argument("run_pipeline: no scenes");

    int k_classes = 0;
    for (const auto& rec : records) {
        if (rec.points.size() != rec.gts.size())
            throw std::invalid_argument("run_pipeline: scene lacks point annotations");
        for (const auto& p : rec.points) k_classes = std::max(k_classes, p.category + 1);
    }
    if (k_classes < 2) k_classes = std::max(k_classes, 2);

    // fixed per-object inputs: the coarse bags never move
    std::vector<SceneInputs> inputs(n_scenes);
    parallel_for(n_scenes, cfg.threads, [&](int si) {
        const auto& rec = records[si];
        const LabImage lab = to_lab(rec.image);
        SceneInputs in;
        in.size = ImageSize{rec.image.width, rec.image.height};
        for (std::size_t j = 0; j < rec.points.size(); ++j) {
            const auto& pt = rec.points[j];
            ObjectInputs obj;
            obj.object_id = pt.object_id;
            obj.category = pt.category;
            obj.px = pt.x;
            obj.py = pt.y;
            obj.cbp_boxes = cbp_sample(pt.x, pt.y, in.size, cfg.cbp_spec);
            obj.cbp_features = features_for(lab, obj.cbp_boxes);
            obj.label = Eigen::VectorXd::Zero(k_classes);
            obj.label[pt.category] = 1.0;
            in.objects.push_back(std::move(obj));
            in.points.emplace_back(pt.x, pt.y);
        }
        inputs[si] = std::move(in);
    });

    CascadeResult result;
    result.model = MilModel::init(kRoiFeatureDim, 64, 64, k_classes,
                                  static_cast<int>(cfg.plan.stages.size()),
                                  cfg.plan.has_spsd(), cfg.seed);
    SgdState opt(result.model);

    for (int epoch = 0; epoch < cfg.sgd.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.sgd, epoch);
        double epoch_reg_sum = 0.0;
        int epoch_reg_count = 0;
        for (int start = 0; start < n_scenes; start += cfg.sgd.batch_scenes) {
            const int bn = std::min(cfg.sgd.batch_scenes, n_scenes - start);
            std::vector<MilModel> grads;
            grads.reserve(bn);
            for (int i = 0; i < bn; ++i) grads.push_back(zeros_like(result.model));
            std::vector<SceneStepOutput> outs(bn);
            parallel_for(bn, cfg.threads, [&](int bi) {
                const int si = start + bi;
                const LabImage lab = to_lab(records[si].image);
                const std::uint64_t neg_base =
                    mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)),
                             static_cast<std::uint64_t>(si));
                outs[bi] = scene_step(result.model, inputs[si], cfg, neg_base, true,
                                      &grads[bi], nullptr, nullptr, true, lab);
            });
            MilModel batch_grads = zeros_like(result.model);
            bool finite = true;
            for (int bi = 0; bi < bn; ++bi) {  // fixed scene order
                finite = finite && outs[bi].finite;
                epoch_reg_sum += outs[bi].reg_loss_sum;
                epoch_reg_count += outs[bi].reg_count;
                result.empty_bag_events += outs[bi].empty_bags;
                auto gs = param_spans(grads[bi]);
                auto bs = param_spans(batch_grads);
                for (std::size_t s = 0; s < gs.size(); ++s)
                    for (std::size_t i = 0; i < gs[s].second; ++i)
                        bs[s].first[i] += gs[s].first[i] / bn;
            }
            if (!finite || !sgd_step(result.model, batch_grads, opt, lr, cfg.sgd.momentum, cfg.sgd.weight_decay))
                ++result.aborted_steps;
        }
        result.reg_loss_per_epoch.push_back(
            epoch_reg_count ? epoch_reg_sum / epoch_reg_count : 0.0);
    }

    // regression divergence check: fall back to basic sampling on emission
    bool spsd_active = cfg.plan.has_spsd();
    if (spsd_active && result.reg_loss_per_epoch.size() >= 2 &&
        result.reg_loss_per_epoch.back() > result.reg_loss_per_epoch.front()) {
        result.spsd_fell_back = true;
        spsd_active = false;
    }

    // final emission with the trained model
    std::vector<std::vector<std::vector<PseudoLabel>>> emit(n_scenes);
    std::vector<std::vector<double>> emit_scores(n_scenes);
    parallel_for(n_scenes, cfg.threads, [&](int si) {
        const int n_obj = static_cast<int>(inputs[si].objects.size());
        emit[si].assign(n_obj, {});
        emit_scores[si].assign(n_obj, 0.0);
        const LabImage lab = to_lab(records[si].image);
        scene_step(result.model, inputs[si], cfg,
                   mix_seed(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(si)), false,
                   nullptr, &emit[si], &emit_scores[si], spsd_active, lab);
    });
    for (int si = 0; si < n_scenes; ++si) {
        for (std::size_t j = 0; j < inputs[si].objects.size(); ++j) {
            result.objects.push_back(ObjectRef{si, static_cast<int>(j),
                                               inputs[si].objects[j].object_id,
                                               inputs[si].objects[j].category});
            result.history.push_back(emit[si][j]);
            result.final_bag_scores.push_back(emit_scores[si][j]);
        }
    }
    return result;
}

}  // namespace pointlab
