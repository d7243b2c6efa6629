#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pointlab {

enum class MilMode { cbp, pbr };

struct LossConfig {
    double alpha1 = 0.25;
    double alpha2 = 0.25;
    double alpha_neg = 0.75;
    double gamma = 2.0;
    double alpha3 = 1.0;
    double alpha4 = 1.0;
    double alpha5 = 1.0;
};

struct AffineLayer {
    Eigen::MatrixXd w;  // out x in
    Eigen::VectorXd b;  // out
};

struct StageHeads {
    AffineLayer cls;
    AffineLayer ins;
};

// Shared two-layer trunk plus per-stage two-stream heads. Heads never
// share parameters across stages; the trunk is shared by all of them.
struct MilModel {
    AffineLayer fc1;  // d_in -> hidden
    AffineLayer fc2;  // hidden -> d
    std::vector<StageHeads> stages;
    std::optional<AffineLayer> reg;  // d -> 4 box deltas
    std::uint64_t init_seed = 0;

    int d_in() const { return static_cast<int>(fc1.w.cols()); }
    int d_feat() const { return static_cast<int>(fc2.w.rows()); }
    int num_classes() const { return static_cast<int>(stages.at(0).cls.w.rows()); }

    // Glorot-uniform weights, zero biases, seed-controlled.
    static MilModel init(int d_in, int hidden, int d, int k, int n_stages, bool with_reg,
                         std::uint64_t seed);
};

MilModel zeros_like(const MilModel& m);

// Flat scalar views over every parameter, in a fixed traversal order.
std::vector<std::pair<double*, std::size_t>> param_spans(MilModel& m);

struct TrunkCache {
    Eigen::MatrixXd x;        // U x d_in
    Eigen::MatrixXd h1, a1;   // pre/post rectifier, U x hidden
    Eigen::MatrixXd h2, f;    // pre/post rectifier, U x d
};

// Two-stream bag forward. Rows are canonicalized internally (sorted
// lexicographically by feature content) before any reduction over the
// bag, so bag score, losses and parameter gradients are exactly
// invariant to the input proposal order. Caller-facing accessors map
// back to the original order.
struct BagForward {
    MilMode mode = MilMode::cbp;
    int stage = 0;
    std::vector<int> order;      // canonical row -> original row
    std::vector<int> inv_order;  // original row -> canonical row
    TrunkCache trunk;
    Eigen::MatrixXd o_cls, o_ins;
    Eigen::MatrixXd s_cls, s_ins, s;  // canonical order
    Eigen::VectorXd s_hat;            // K

    int bag_size() const { return static_cast<int>(trunk.x.rows()); }
    // proposal score on class k, original indexing
    double proposal_score(int orig_u, int k) const { return s(inv_order[orig_u], k); }
    double cls_score(int orig_u, int k) const { return s_cls(inv_order[orig_u], k); }
    Eigen::VectorXd trunk_feature(int orig_u) const {
        return trunk.f.row(inv_order[orig_u]).transpose();
    }
};

// Throws on non-finite features or an empty bag.
BagForward forward_bag(const MilModel& m, int stage, const Eigen::MatrixXd& features,
                       MilMode mode);

// Accumulates gradients for d(loss)/d(s_hat); d_s_cls (original order) is
// an optional extra path used by the diagnostic all-positive loss.
void backward_bag(const MilModel& m, const BagForward& fwd, const Eigen::VectorXd& d_s_hat,
                  MilModel& grads);
void backward_bag(const MilModel& m, const BagForward& fwd, const Eigen::VectorXd& d_s_hat,
                  const Eigen::MatrixXd& d_s_cls_original, MilModel& grads);

// Sigmoid classification scores for a negative set (trunk + cls head only).
struct NegForward {
    int stage = 0;
    TrunkCache trunk;
    Eigen::MatrixXd s;  // N x K
};
NegForward forward_negatives(const MilModel& m, int stage, const Eigen::MatrixXd& features);
void backward_negatives(const MilModel& m, const NegForward& fwd, const Eigen::MatrixXd& d_s,
                        MilModel& grads);

// Box-delta regression head.
struct RegForward {
    TrunkCache trunk;
    Eigen::MatrixXd pred;  // U x 4
};
RegForward forward_reg(const MilModel& m, const Eigen::MatrixXd& features);
void backward_reg(const MilModel& m, const RegForward& fwd, const Eigen::MatrixXd& d_pred,
                  MilModel& grads);

// ---------------------------------------------------------------------------
// Losses. Every loss clamps probabilities into [1e-7, 1-1e-7] before
// taking logs and reports the gradient with respect to its direct input.

inline constexpr double kProbEps = 1e-7;

struct LossGrad {
    double value = 0.0;
    Eigen::VectorXd d_s_hat;
};

// Per-object binary cross-entropy on the bag score (coarse stage),
// scaled by alpha1. The 1/M average over objects is the caller's.
LossGrad cbp_loss(const Eigen::VectorXd& s_hat, const Eigen::VectorXd& label, double alpha1);

// Focal refinement loss weighted by the previous stage's bag score on
// the GT class. The weight is a constant (no gradient flows into it).
LossGrad mil2_loss(const Eigen::VectorXd& s_hat, const Eigen::VectorXd& label,
                   double prev_score_on_gt, double gamma);

struct NegLossGrad {
    double value = 0.0;
    Eigen::MatrixXd d_s;
    bool empty_set = false;
};
// Background suppression over the negative set; beta is the image-level
// mean of the previous-stage bag scores (a constant).
NegLossGrad neg_loss(const Eigen::MatrixXd& s_neg, double beta, double gamma);

struct MatLossGrad {
    double value = 0.0;
    Eigen::MatrixXd d_pred;
};
// Mean absolute error over all entries.
MatLossGrad l1_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);

// Diagnostic variant that treats every proposal in the bag as positive:
// mean cross-entropy of the per-proposal classification scores. Not part
// of any pipeline stage.
struct PosLossGrad {
    double value = 0.0;
    Eigen::MatrixXd d_s_cls;  // original order
};
PosLossGrad pos_loss(const BagForward& fwd, const Eigen::VectorXd& label);

// ---------------------------------------------------------------------------
// Optimizer

struct SgdConfig {
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 60;
    std::vector<int> decay_epochs = {40, 55};  // same 2/3, 11/12 shape as the 12-epoch schedule
    double decay_factor = 0.1;
    int batch_scenes = 4;
};

struct SgdState {
    MilModel velocity;
    explicit SgdState(const MilModel& m) : velocity(zeros_like(m)) {}
};

// p -= lr * (momentum * v + g + weight_decay * p); aborts (returns
// false) on non-finite gradients without touching the parameters.
bool sgd_step(MilModel& m, const MilModel& grads, SgdState& state, double lr,
              double momentum, double weight_decay = 0.0);

double lr_at_epoch(const SgdConfig& cfg, int epoch);

// ---------------------------------------------------------------------------
// Verification

// Central finite differences on every parameter against the analytic
// gradient. Relative error uses max(|a|, |n|, 1e-4) as the scale so
// dead parameters do not divide by zero.
double grad_check(MilModel& model, const std::function<double(const MilModel&)>& loss_value,
                  const std::function<MilModel(const MilModel&)>& loss_grad, double h = 1e-5);

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary with layer shapes, row-major parameter
// arrays and the serialized rng state.

void save_checkpoint(const MilModel& m, const std::string& rng_state,
                     const std::filesystem::path& path);
struct Checkpoint {
    MilModel model;
    std::string rng_state;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pointlab
