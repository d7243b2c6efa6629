#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pointlab/annotation.hpp"
#include "pointlab/geometry.hpp"

namespace pointlab {

// Interleaved 8-bit RGB image.
struct ImageRgb {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // 3 bytes per pixel, row-major

    ImageRgb() = default;
    ImageRgb(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}
    std::uint8_t* px(int x, int y) { return &data[(static_cast<std::size_t>(y) * width + x) * 3]; }
    const std::uint8_t* px(int x, int y) const {
        return &data[(static_cast<std::size_t>(y) * width + x) * 3];
    }
    bool operator==(const ImageRgb&) const = default;
};

void write_png(const ImageRgb& img, const std::filesystem::path& path);
ImageRgb read_png(const std::filesystem::path& path);

// CIELAB planes (D65 white point, sRGB input).
struct LabImage {
    int width = 0;
    int height = 0;
    std::vector<double> l, a, b;

    double plane(int ch, int x, int y) const {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        return ch == 0 ? l[i] : (ch == 1 ? a[i] : b[i]);
    }
};

std::array<double, 3> srgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<std::uint8_t, 3> lab_to_srgb(double l, double a, double b);
LabImage to_lab(const ImageRgb& img);

enum class ShapeKind { rectangle = 0, ellipse = 1, triangle = 2 };

std::string shape_name(ShapeKind k);

struct BackgroundSpec {
    std::array<double, 3> base_lab = {72.0, 2.0, -2.0};
    double coarse_amplitude = 9.0;  // low-frequency value noise, all LAB channels
    double pixel_amplitude = 0.8;   // per-pixel jitter, L channel
    int coarse_cells = 4;           // few large smooth patches
};

struct SceneSpec {
    int width = 256;
    int height = 256;
    int min_objects = 1;
    int max_objects = 5;
    std::vector<ShapeKind> shape_kinds = {ShapeKind::rectangle, ShapeKind::ellipse,
                                          ShapeKind::triangle};
    std::vector<std::array<double, 3>> palette;  // LAB; defaults set in ctor
    BackgroundSpec background;
    double overlap_cap = 0.3;
    double min_size = 28.0;
    double max_size = 96.0;

    SceneSpec();
};

struct SceneRecord {
    ImageRgb image;
    std::vector<GtObject> gts;
    std::vector<PointAnnotation> points;
    bool placement_shortfall = false;  // fewer objects than requested
};

// Deterministic in (spec, seed). Categories are the shape kinds.
SceneRecord generate_scene(const SceneSpec& spec, std::uint64_t seed);

// Box descriptor replacing RoIAlign: 3x3 grid pooled over the box's
// sampling window, per cell mean/std of L,a,b from bilinear subsamples,
// plus log box extents relative to the image. D_in = 56. The window is
// the box dilated by kRoiContextScale, standing in for the receptive
// field of the deep features this extractor replaces; without it a
// tight box and an object-interior crop produce identical statistics.
// Channels carry a fixed affine normalization (kLabShift/kLabScale,
// kStdScale) so downstream layers see roughly unit-scale inputs.
inline constexpr int kRoiFeatureDim = 56;
inline constexpr double kRoiContextScale = 1.5;
inline constexpr double kLabShift = 50.0;  // L channel only
inline constexpr double kLabScale = 40.0;
inline constexpr double kStdScale = 15.0;

struct RoiFeatures {
    Eigen::VectorXd values;
    bool degenerate = false;
};

RoiFeatures roi_features(const LabImage& lab, const Box& box);

// Per-cell pixel basis at the given stride: mean L,a,b, horizontal and
// vertical color-gradient magnitudes, local std, normalized coordinates.
inline constexpr int kPixelChannels = 8;

struct PixelGrid {
    int stride = 8;
    int gw = 0;  // ceil(W / stride)
    int gh = 0;  // ceil(H / stride)
    Eigen::MatrixXd channels;  // (gh*gw) x kPixelChannels, row per cell

    int cells() const { return gw * gh; }
    int cell_index(int gx, int gy) const { return gy * gw + gx; }
};

PixelGrid pixel_feature_map(const LabImage& lab, int stride);

// Disk layout: <dir>/images/*.png plus an index file in the dataset schema.
void save_scene_records(const std::vector<SceneRecord>& records,
                        const std::filesystem::path& dir, const std::string& index_name,
                        const std::vector<ShapeKind>& kinds);
std::vector<SceneRecord> load_scene_records(const std::filesystem::path& dir,
                                            const std::string& index_name);

// Derives a per-scene seed from a base seed (splitmix64 mixing).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index);

}  // namespace pointlab
