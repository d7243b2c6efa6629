#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "pointlab/annotation.hpp"
#include "pointlab/geometry.hpp"
#include "pointlab/mil.hpp"
#include "pointlab/scene.hpp"

namespace pointlab {

enum class BspRegion { none, inner, outer, both };

struct PixelConfig {
    int stride = 8;
    double eta = 0.1;      // boundary uncertainty ratio
    double chi1 = 0.5;     // score-map threshold
    double chi2 = 0.3;     // affinity threshold
    double sigma_c = 2.0;  // affinity temperature
    BspRegion bsp = BspRegion::both;
};

// Smallest of {64,128,256,512} covering max(w,h); 512 as the ceiling.
double pe_adjust_factor(const Box& box);

// Per-cell offsets from the cell center to the box center, divided by
// the adjust factor. Column 0 is x, column 1 is y; rows follow the
// PixelGrid cell indexing.
Eigen::MatrixXd position_embedding(const Box& box, int gw, int gh, int stride);

// Flat parameter block for the per-object three-layer 1x1-conv head:
// (c_in -> 8 -> 8 -> 1), weights ordered [w1 | b1 | w2 | b2 | w3 | b3],
// each weight matrix row-major.
struct DynamicHead {
    int c_in = 0;
    Eigen::VectorXd theta;

    static int param_count(int c_in) { return 8 * c_in + 8 + 64 + 8 + 8 + 1; }
};

// Linear map from the merged object feature to the head parameters.
struct FPar {
    Eigen::MatrixXd w;  // G x D
    Eigen::VectorXd b;  // G

    static FPar init(int d_feat, int c_in, std::uint64_t seed);
};

DynamicHead predict_theta(const Eigen::VectorXd& object_feat, const FPar& f_par);

struct ScoreMapForward {
    Eigen::MatrixXd input;   // cells x c_in
    Eigen::MatrixXd z1, a1;  // cells x 8
    Eigen::MatrixXd z2, a2;  // cells x 8
    Eigen::VectorXd z3;      // cells
    Eigen::VectorXd s;       // cells, sigmoid output in [0,1]
};

ScoreMapForward dynamic_forward(const PixelGrid& grid, const Eigen::MatrixXd& pe,
                                const DynamicHead& head);

// d(loss)/d(theta) for a given d(loss)/d(score map).
Eigen::VectorXd dynamic_backward(const ScoreMapForward& fwd, const DynamicHead& head,
                                 const Eigen::VectorXd& d_s);

// ---------------------------------------------------------------------------
// Affinity

// LAB color similarity exp(-||lab_p - lab_q|| / sigma_c) between each
// grid cell and its 8 neighbours, computed on per-cell mean colors.
// Direction order: NW, N, NE, E, SE, S, SW, W; out-of-grid entries are 0.
struct AffinityField {
    int gw = 0, gh = 0;
    std::array<Eigen::VectorXd, 8> iota;
};

AffinityField affinity(const LabImage& lab, int stride, double sigma_c);

// ---------------------------------------------------------------------------
// Reliability maps

// a_proj keeps the cells inside the shrunken box and outside the grown
// box; the band in between is excluded from the projection constraint.
// a_sim is the grown box region.
struct ReliabilityMaps {
    std::vector<std::uint8_t> a_proj;
    std::vector<std::uint8_t> a_sim;
    bool inner_empty = false;
};

// Grid rasterization used for box masks and the reliability maps: a cell
// belongs to a box when its center falls inside the closed extents, so
// eta = 0 collapses inner and outer maps onto the plain box mask.
std::vector<std::uint8_t> box_mask_grid(const Box& box, int gw, int gh, int stride);

ReliabilityMaps bsp_maps(const Box& box, double eta, int gw, int gh, int stride,
                         BspRegion region = BspRegion::both);

// ---------------------------------------------------------------------------
// Losses on score maps

struct MapLossGrad {
    double value = 0.0;
    Eigen::VectorXd d_s;
    bool flagged = false;
};

// Dice on axis-wise max projections; when a_proj is given both the map
// and the box mask are masked by it first.
MapLossGrad projection_loss(const Eigen::VectorXd& s, const std::vector<std::uint8_t>& box_mask,
                            const std::vector<std::uint8_t>* a_proj, int gw, int gh);

// Pairwise label-consistency over 8-neighbour pairs with at least one
// endpoint in `region` and affinity >= chi2.
MapLossGrad similarity_loss(const Eigen::VectorXd& s, const std::vector<std::uint8_t>& region,
                            const AffinityField& field, double chi2, int gw, int gh);

// Tight image-pixel box over cells above chi1; fallback when empty.
struct MaskBoxResult {
    Box box;
    bool used_fallback = false;
};
MaskBoxResult mask_to_box(const Eigen::VectorXd& s, double chi1, const Box& fallback, int gw,
                          int gh, int stride);

Mask threshold_to_mask(const Eigen::VectorXd& s, double chi1, int gw, int gh);
Mask upsample_nearest(const Mask& grid_mask, int stride, int width, int height);

// ---------------------------------------------------------------------------
// Training

struct PixelObjectTask {
    int scene_index = 0;
    int object_id = 0;
    int category = 0;
    Box pseudo_box;
    Eigen::VectorXd object_feat;
    double bag_weight = 1.0;  // previous-stage score on the GT class
};

struct PixelSceneInputs {
    PixelGrid grid;
    AffinityField field;
    int width = 0;
    int height = 0;
};

struct PixelObjectOutput {
    int object_id = 0;
    Eigen::VectorXd score_map;
    Box refined_box;
    Mask mask;  // image resolution
    bool box_fallback = false;
};

struct PixelTrainResult {
    FPar f_par;
    std::vector<PixelObjectOutput> outputs;
    bool diverged = false;
    double first_epoch_loss = 0.0;
    double last_epoch_loss = 0.0;
};

// Two-phase training: the cascade is frozen, only the parameter
// predictor learns. Deterministic in (tasks, seed); scene-parallel
// losses reduce in fixed task order.
PixelTrainResult train_pixel_head(const std::vector<PixelSceneInputs>& scenes,
                                  const std::vector<PixelObjectTask>& tasks,
                                  const PixelConfig& pix, const LossConfig& loss_cfg,
                                  const SgdConfig& sgd, std::uint64_t seed, int threads);

}  // namespace pointlab
