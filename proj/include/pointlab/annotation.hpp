#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointlab/geometry.hpp"

namespace pointlab {

// Binary pixel grid at image resolution, row-major.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

    bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v = true) {
        data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
    }
    std::size_t count() const;
    bool operator==(const Mask&) const = default;

    // Tight bounding box of the set pixels (integer pixel extents);
    // nullopt when the mask is empty.
    std::optional<Box> tight_box() const;
};

// Column-major uncompressed run lengths, first count covering zeros.
std::vector<int> rle_encode(const Mask& m);
Mask rle_decode(int width, int height, std::span<const int> counts);

double mask_iou(const Mask& a, const Mask& b);

// Quasi-center sampling parameters: a Gaussian centered on the box,
// truncated to the mask's central ellipse region.
struct QcSpec {
    double mu = 0.0;
    double sigma = 0.25;  // std as fraction of box extent
    double kappa = 0.25;  // ellipse semi-axes as fraction of box extent
};

struct GtObject {
    Box box;
    Mask mask;
    int category = 0;
};

struct PointAnnotation {
    double x = 0.0;
    double y = 0.0;
    int category = 0;
    int object_id = 0;
};

// Draws a point from N(box center, sigma*(w,h)) restricted to
// V = mask ∩ ellipse(kappa), or the whole mask if that intersection is
// empty. After 1000 rejected draws the sampler falls back to a uniform
// pick over V. Throws when the mask has no set pixels.
PointAnnotation sample_qc_point(const GtObject& gt, const QcSpec& spec,
                                std::mt19937_64& rng, int object_id);

// ---------------------------------------------------------------------------
// Dataset index file (JSON). A single schema covers plain point
// annotations and exported pseudo labels; optional fields are simply
// absent when unused.

struct DatasetImage {
    int id = 0;
    int width = 0;
    int height = 0;
    std::string file;
};

struct DatasetCategory {
    int id = 0;
    std::string name;
};

struct DatasetAnnotation {
    int id = 0;
    int image_id = 0;
    int category_id = 0;
    std::optional<std::array<double, 2>> point;
    std::optional<Box> bbox;  // serialized as top-left [x,y,w,h]
    std::optional<double> score;
    std::optional<Mask> segmentation;
};

struct Dataset {
    std::vector<DatasetImage> images;
    std::vector<DatasetCategory> categories;
    std::vector<DatasetAnnotation> annotations;

    const DatasetImage& image_by_id(int id) const;
};

// Strict parse: unknown keys, type mismatches, and dangling ids are
// reported by field name. Round-trips losslessly through save_dataset.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

struct PseudoExportEntry {
    int object_id = 0;
    Box box;
    double score = 0.0;
    std::optional<Mask> mask;  // box rasterization is exported when absent
};

// Writes the index with bbox/score/segmentation attached to the matching
// annotation ids. Entries without a pseudo label pass through untouched.
void export_labels(const Dataset& index, const std::vector<PseudoExportEntry>& pseudo,
                   const std::filesystem::path& path);

// Fills a mask with the pixels whose centers fall inside the box.
Mask rasterize_box(const Box& b, int width, int height);

}  // namespace pointlab
