#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace pointlab {

// Axis-aligned rectangle in center format. Coordinates are continuous
// image pixels; w and h must stay positive.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x1() const { return cx - 0.5 * w; }
    double y1() const { return cy - 0.5 * h; }
    double x2() const { return cx + 0.5 * w; }
    double y2() const { return cy + 0.5 * h; }
    double area() const { return w * h; }
    bool valid() const { return w > 0.0 && h > 0.0; }

    static Box from_corners(double x1, double y1, double x2, double y2) {
        return Box{0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
    }
    // COCO-style top-left [x, y, w, h].
    static Box from_topleft(double x, double y, double w, double h) {
        return Box{x + 0.5 * w, y + 0.5 * h, w, h};
    }
};

struct ImageSize {
    int width = 0;
    int height = 0;
};

// Anchor-style scale set for the coarse sampling stage. The effective
// size factor of a sample is size * ratio (or /ratio) * delta * min(W,H)/100,
// where `delta` is an extra user multiplier on the per-image adjustment.
struct CbpScaleSpec {
    std::vector<double> sizes = {4, 8, 16, 32, 64, 128};
    std::vector<double> ratios = {1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0, 1.5, 2.0, 3.0};
    double delta = 1.0;
};

// Jitter set for the refinement stage. Width and height multipliers are
// independent sets; offsets are fractions of the jittered box size.
struct PbrJitterSpec {
    std::vector<double> w_multipliers = {0.7, 0.8, 1.0, 1.2, 1.3};
    std::vector<double> h_multipliers = {0.7, 0.8, 1.0, 1.2, 1.3};
    std::vector<std::pair<double, double>> center_offsets = {
        {0, 0}, {1, 0}, {0, 1}, {-1, 0}, {-1, -1}};
};

// Offset/log-ratio parameterization of a target box relative to a base box.
struct BoxDeltas {
    double dx = 0.0;
    double dy = 0.0;
    double dw = 0.0;
    double dh = 0.0;
};

double iou(const Box& a, const Box& b);

// Intersects with [0,W]x[0,H]; nullopt when the clipped box is degenerate.
std::optional<Box> clip_box(const Box& b, const ImageSize& img);

// Fixed anchor-like bag around an annotated point: w = ratio*size*f,
// h = size/ratio*f with f = delta * min(W,H)/100. Clipped to the image;
// degenerate clips are dropped. Throws if the point is outside the image.
std::vector<Box> cbp_sample(double px, double py, const ImageSize& img,
                            const CbpScaleSpec& spec);

// Scale/aspect/center jitter around a base box (unclipped).
std::vector<Box> pbr_sample(const Box& base, const PbrJitterSpec& spec);

// Rejection-samples boxes whose IoU with every positive proposal stays
// below iou_cap. Candidates containing any keep-out point (the annotated
// object centers) are rejected as well, so negatives stay background even
// when the positive bags are badly scaled. Gives up on a draw after a
// 50x target budget, so fewer than target_count boxes may come back.
// Throws when positives are empty.
std::vector<Box> sample_negatives(const std::vector<std::vector<Box>>& positive_bags,
                                  const ImageSize& img, double iou_cap,
                                  int target_count, std::mt19937_64& rng,
                                  std::span<const std::pair<double, double>> keep_out_points = {});

struct MergeResult {
    Box box;
    Eigen::VectorXd feature;
    double score = 0.0;
    bool zero_score_fallback = false;  // all selected scores were zero
};

// Score-weighted average of the k highest-scoring boxes (and features).
// Ties break by original index; k is capped at the bag size. The merged
// score is the plain mean of the selected scores.
MergeResult topk_merge(std::span<const Box> boxes, std::span<const double> scores,
                       const Eigen::MatrixXd& features, int k);

BoxDeltas encode_deltas(const Box& base, const Box& target);
Box decode_deltas(const Box& base, const BoxDeltas& d);

}  // namespace pointlab
