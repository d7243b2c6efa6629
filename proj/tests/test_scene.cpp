#include "pointlab/scene.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"

using namespace pointlab;

namespace {

ImageRgb uniform_image(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    ImageRgb img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto* p = img.px(x, y);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
    return img;
}

}  // namespace

TEST_CASE("same seed reproduces a bit-identical scene") {
    SceneSpec spec;
    spec.min_objects = 2;
    spec.max_objects = 4;
    const auto a = generate_scene(spec, 777);
    const auto b = generate_scene(spec, 777);
    CHECK(a.image == b.image);
    REQUIRE(a.gts.size() == b.gts.size());
    for (std::size_t i = 0; i < a.gts.size(); ++i) {
        CHECK(a.gts[i].mask == b.gts[i].mask);
        CHECK(a.gts[i].box.cx == b.gts[i].box.cx);
    }
    const auto c = generate_scene(spec, 778);
    CHECK(a.image != c.image);
}

TEST_CASE("single rectangle scene has mask exactly matching its box") {
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 1;
    spec.shape_kinds = {ShapeKind::rectangle};
    const auto rec = generate_scene(spec, 4);
    REQUIRE(rec.gts.size() == 1);
    const auto& gt = rec.gts[0];
    CHECK(gt.category == 0);
    const Mask expect = rasterize_box(gt.box, spec.width, spec.height);
    CHECK(gt.mask == expect);
    const auto tight = gt.mask.tight_box();
    REQUIRE(tight.has_value());
    CHECK(iou(*tight, gt.box) == doctest::Approx(1.0));
}

TEST_CASE("gt boxes stay within the tight bound of their masks") {
    SceneSpec spec;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto rec = generate_scene(spec, mix_seed(1000, seed));
        for (const auto& gt : rec.gts) {
            const auto tight = gt.mask.tight_box();
            REQUIRE(tight.has_value());
            CHECK(std::abs(tight->x1() - gt.box.x1()) <= 1.0);
            CHECK(std::abs(tight->x2() - gt.box.x2()) <= 1.0);
            CHECK(std::abs(tight->y1() - gt.box.y1()) <= 1.0);
            CHECK(std::abs(tight->y2() - gt.box.y2()) <= 1.0);
        }
    }
}

TEST_CASE("generated corpus respects the pairwise overlap cap") {
    SceneSpec spec;
    spec.min_objects = 3;
    spec.max_objects = 5;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto rec = generate_scene(spec, mix_seed(2000, seed));
        for (std::size_t i = 0; i < rec.gts.size(); ++i)
            for (std::size_t j = i + 1; j < rec.gts.size(); ++j) {
                // placement caps the drawn candidate boxes; tight GT boxes can
                // only shrink, so allow a hair of slack over the cap
                CHECK(iou(rec.gts[i].box, rec.gts[j].box) <= spec.overlap_cap + 0.02);
            }
    }
}

TEST_CASE("png round-trip preserves pixels") {
    const auto rec = generate_scene(SceneSpec{}, 31);
    const auto path = std::filesystem::temp_directory_path() / "pl_scene_rt.png";
    write_png(rec.image, path);
    const auto back = read_png(path);
    CHECK(back == rec.image);
}

TEST_CASE("scene records round-trip through the dataset directory") {
    SceneSpec spec;
    spec.min_objects = 2;
    spec.max_objects = 3;
    std::vector<SceneRecord> records;
    for (std::uint64_t s = 0; s < 3; ++s) records.push_back(generate_scene(spec, mix_seed(5, s)));
    const auto dir = std::filesystem::temp_directory_path() / "pl_scene_records";
    std::filesystem::remove_all(dir);
    save_scene_records(records, dir, "dataset.json", spec.shape_kinds);
    const auto back = load_scene_records(dir, "dataset.json");
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(back[i].image == records[i].image);
        REQUIRE(back[i].gts.size() == records[i].gts.size());
        for (std::size_t j = 0; j < records[i].gts.size(); ++j) {
            CHECK(back[i].gts[j].mask == records[i].gts[j].mask);
            CHECK(back[i].gts[j].category == records[i].gts[j].category);
        }
    }
}

TEST_CASE("lab conversion round-trips the default palette") {
    const SceneSpec spec;
    for (const auto& lab : spec.palette) {
        const auto rgb = lab_to_srgb(lab[0], lab[1], lab[2]);
        const auto lab2 = srgb_to_lab(rgb[0], rgb[1], rgb[2]);
        CHECK(std::abs(lab[0] - lab2[0]) < 1.0);
        CHECK(std::abs(lab[1] - lab2[1]) < 1.0);
        CHECK(std::abs(lab[2] - lab2[2]) < 1.0);
    }
}

TEST_CASE("roi features on a uniform image have zero stds and equal means") {
    const auto img = uniform_image(64, 64, 120, 90, 200);
    const auto lab = to_lab(img);
    const auto f = roi_features(lab, Box{32, 32, 20, 14});
    CHECK(!f.degenerate);
    // layout: per cell mean/std interleaved per channel
    for (int cell = 0; cell < 9; ++cell)
        for (int ch = 0; ch < 3; ++ch) {
            const int base = cell * 6 + ch * 2;
            CHECK(f.values[base] == doctest::Approx(f.values[ch * 2]).epsilon(1e-9));
            CHECK(f.values[base + 1] == doctest::Approx(0.0).epsilon(1e-9));
        }
}

TEST_CASE("roi features geometry dims vanish for the full-image box") {
    const auto img = uniform_image(48, 32, 10, 200, 30);
    const auto lab = to_lab(img);
    const auto f = roi_features(lab, Box{24, 16, 48, 32});
    CHECK(f.values[54] == doctest::Approx(0.0));
    CHECK(f.values[55] == doctest::Approx(0.0));
}

TEST_CASE("roi features flag degenerate clipped boxes") {
    const auto img = uniform_image(32, 32, 0, 0, 0);
    const auto lab = to_lab(img);
    const auto f = roi_features(lab, Box{-50, -50, 10, 10});
    CHECK(f.degenerate);
    CHECK(f.values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("roi features shift by less than the gradient bound on a smooth ramp") {
    // horizontal ramp; the worst adjacent-column LAB delta bounds how much
    // any mean/std feature may move when the box shifts one pixel
    ImageRgb img(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const auto v = static_cast<std::uint8_t>(60 + 2 * x);
            auto* p = img.px(x, y);
            p[0] = v;
            p[1] = v;
            p[2] = v;
        }
    const auto lab = to_lab(img);
    double bound = 0.0;
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x + 1 < 64; ++x)
                bound = std::max(bound, std::abs(lab.plane(ch, x + 1, y) - lab.plane(ch, x, y)));
    const auto fa = roi_features(lab, Box{30, 32, 18, 18});
    const auto fb = roi_features(lab, Box{31, 32, 18, 18});
    for (int i = 0; i < 54; ++i)
        CHECK(std::abs(fa.values[i] - fb.values[i]) <= bound + 1e-9);
}

TEST_CASE("roi features are translation covariant away from borders") {
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 1;
    spec.background.coarse_amplitude = 0.0;
    spec.background.pixel_amplitude = 0.0;
    SceneRecord rec = generate_scene(spec, 9);
    // keep the context window interior on both images: use a small box
    // near the middle of the frame instead of the generated object box
    rec.gts[0].box = Box{120, 120, 30, 24};
    // translate the whole image by (+5, +3)
    ImageRgb shifted(rec.image.width, rec.image.height);
    for (int y = 0; y < rec.image.height; ++y)
        for (int x = 0; x < rec.image.width; ++x) {
            const int sx = std::clamp(x - 5, 0, rec.image.width - 1);
            const int sy = std::clamp(y - 3, 0, rec.image.height - 1);
            const auto* src = rec.image.px(sx, sy);
            auto* dst = shifted.px(x, y);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
        }
    const auto lab_a = to_lab(rec.image);
    const auto lab_b = to_lab(shifted);
    const Box base = rec.gts[0].box;
    const Box moved{base.cx + 5, base.cy + 3, base.w, base.h};
    const auto fa = roi_features(lab_a, base);
    const auto fb = roi_features(lab_b, moved);
    CHECK((fa.values.head(54) - fb.values.head(54)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("pixel feature map matches the expected grid shape") {
    const auto img = uniform_image(256, 256, 128, 128, 128);
    const auto grid = pixel_feature_map(to_lab(img), 8);
    CHECK(grid.gw == 32);
    CHECK(grid.gh == 32);
    CHECK(grid.channels.rows() == 32 * 32);
    CHECK(grid.channels.cols() == kPixelChannels);
}

TEST_CASE("pixel feature map gradients and stds vanish on a constant image") {
    const auto img = uniform_image(64, 48, 30, 99, 180);
    const auto grid = pixel_feature_map(to_lab(img), 8);
    for (int i = 0; i < grid.cells(); ++i) {
        CHECK(grid.channels(i, 3) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(grid.channels(i, 4) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(grid.channels(i, 5) == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("two-tone seam shows up only in adjacent gradient cells") {
    ImageRgb img(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            auto* p = img.px(x, y);
            const std::uint8_t v = x < 32 ? 40 : 220;
            p[0] = v;
            p[1] = v;
            p[2] = v;
        }
    const auto grid = pixel_feature_map(to_lab(img), 8);
    // seam between cell columns 3 and 4
    for (int gy = 0; gy < grid.gh; ++gy) {
        for (int gx = 0; gx < grid.gw; ++gx) {
            const double g = grid.channels(grid.cell_index(gx, gy), 3);
            if (gx == 3 || gx == 4)
                CHECK(g > 0.1);
            else
                CHECK(g == doctest::Approx(0.0).epsilon(1e-9));
        }
    }
}
