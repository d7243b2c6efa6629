#include "pointlab/scene.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace pointlab {

// ---------------------------------------------------------------------------
// PNG I/O

void write_png(const ImageRgb& img, const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png write failed: " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.px(0, y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

ImageRgb read_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open for reading: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read failed: " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    ImageRgb img(static_cast<int>(png_get_image_width(png, info)),
                 static_cast<int>(png_get_image_height(png, info)));
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.px(0, y), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// ---------------------------------------------------------------------------
// Color space

namespace {

double srgb_to_linear(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

double lab_f(double t) {
    constexpr double kCube = 216.0 / 24389.0;  // (6/29)^3
    return t > kCube ? std::cbrt(t) : t * (841.0 / 108.0) + 4.0 / 29.0;
}

double lab_f_inv(double t) {
    constexpr double kLin = 6.0 / 29.0;
    return t > kLin ? t * t * t : (t - 4.0 / 29.0) * (108.0 / 841.0);
}

constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;  // D65

}  // namespace

std::array<double, 3> srgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double r = srgb_to_linear(r8 / 255.0);
    const double g = srgb_to_linear(g8 / 255.0);
    const double b = srgb_to_linear(b8 / 255.0);
    const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const double fx = lab_f(x / kXn), fy = lab_f(y / kYn), fz = lab_f(z / kZn);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<std::uint8_t, 3> lab_to_srgb(double l, double a, double b) {
    const double fy = (l + 16.0) / 116.0;
    const double fx = fy + a / 500.0;
    const double fz = fy - b / 200.0;
    const double x = kXn * lab_f_inv(fx);
    const double y = kYn * lab_f_inv(fy);
    const double z = kZn * lab_f_inv(fz);
    const double rl = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    const double gl = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    const double bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    auto to8 = [](double c) {
        const double s = std::clamp(linear_to_srgb(std::clamp(c, 0.0, 1.0)), 0.0, 1.0);
        return static_cast<std::uint8_t>(std::lround(s * 255.0));
    };
    return {to8(rl), to8(gl), to8(bl)};
}

LabImage to_lab(const ImageRgb& img) {
    // 8-bit inputs take only 256 linearization values
    static const auto lut = [] {
        std::array<double, 256> t{};
        for (int i = 0; i < 256; ++i) t[i] = srgb_to_linear(i / 255.0);
        return t;
    }();
    LabImage out;
    out.width = img.width;
    out.height = img.height;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    out.l.resize(n);
    out.a.resize(n);
    out.b.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = &img.data[i * 3];
        const double r = lut[p[0]], g = lut[p[1]], b = lut[p[2]];
        const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        const double fx = lab_f(x / kXn), fy = lab_f(y / kYn), fz = lab_f(z / kZn);
        out.l[i] = 116.0 * fy - 16.0;
        out.a[i] = 500.0 * (fx - fy);
        out.b[i] = 200.0 * (fy - fz);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene generation

std::string shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::ellipse: return "ellipse";
        case ShapeKind::triangle: return "triangle";
    }
    return "unknown";
}

SceneSpec::SceneSpec() {
    // vivid accents, pairwise LAB distance comfortably above 15
    const std::array<std::array<std::uint8_t, 3>, 8> rgb = {{{220, 50, 47},
                                                             {38, 139, 210},
                                                             {133, 153, 0},
                                                             {211, 54, 130},
                                                             {203, 75, 22},
                                                             {42, 161, 152},
                                                             {108, 113, 196},
                                                             {181, 137, 0}}};
    for (const auto& c : rgb) palette.push_back(srgb_to_lab(c[0], c[1], c[2]));
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

bool point_in_shape(ShapeKind kind, double x, double y, const Box& box) {
    switch (kind) {
        case ShapeKind::rectangle:
            return x >= box.x1() && x <= box.x2() && y >= box.y1() && y <= box.y2();
        case ShapeKind::ellipse: {
            const double nx = (x - box.cx) / (0.5 * box.w);
            const double ny = (y - box.cy) / (0.5 * box.h);
            return nx * nx + ny * ny <= 1.0;
        }
        case ShapeKind::triangle: {
            // apex at the top-center, base along the bottom edge
            if (y < box.y1() || y > box.y2() || x < box.x1() || x > box.x2()) return false;
            const double t = (y - box.y1()) / box.h;  // 0 at apex row
            const double half = 0.5 * box.w * t;
            return std::abs(x - box.cx) <= half;
        }
    }
    return false;
}

double palette_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dl = a[0] - b[0], da = a[1] - b[1], db = a[2] - b[2];
    return std::sqrt(dl * dl + da * da + db * db);
}

void paint_background(ImageRgb& img, const BackgroundSpec& bg, std::mt19937_64& rng) {
    // large smooth color patches; far-field content varies per scene so
    // wide crops carry no stable class signal
    const int cells = std::max(2, bg.coarse_cells);
    std::vector<std::array<double, 3>> grid(static_cast<std::size_t>(cells) * cells);
    std::uniform_real_distribution<double> uc(-bg.coarse_amplitude, bg.coarse_amplitude);
    for (auto& g : grid) g = {uc(rng), uc(rng) * 0.7, uc(rng) * 0.7};
    std::uniform_real_distribution<double> up(-bg.pixel_amplitude, bg.pixel_amplitude);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double gx = static_cast<double>(x) / img.width * (cells - 1);
            const double gy = static_cast<double>(y) / img.height * (cells - 1);
            const int ix = std::min(static_cast<int>(gx), cells - 2);
            const int iy = std::min(static_cast<int>(gy), cells - 2);
            const double fx = gx - ix, fy = gy - iy;
            double noise[3];
            for (int ch = 0; ch < 3; ++ch) {
                const double v00 = grid[iy * cells + ix][ch], v10 = grid[iy * cells + ix + 1][ch];
                const double v01 = grid[(iy + 1) * cells + ix][ch],
                             v11 = grid[(iy + 1) * cells + ix + 1][ch];
                noise[ch] = v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy) +
                            v01 * (1 - fx) * fy + v11 * fx * fy;
            }
            const auto rgbv = lab_to_srgb(bg.base_lab[0] + noise[0] + up(rng),
                                          bg.base_lab[1] + noise[1], bg.base_lab[2] + noise[2]);
            auto* p = img.px(x, y);
            p[0] = rgbv[0];
            p[1] = rgbv[1];
            p[2] = rgbv[2];
        }
    }
}

}  // namespace

SceneRecord generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    if (spec.min_objects < 1 || spec.max_objects < spec.min_objects)
        throw std::invalid_argument("generate_scene: bad objects_per_scene range");
    if (spec.shape_kinds.empty()) throw std::invalid_argument("generate_scene: no shape kinds");
    for (std::size_t i = 0; i < spec.palette.size(); ++i)
        for (std::size_t j = i + 1; j < spec.palette.size(); ++j)
            if (palette_distance(spec.palette[i], spec.palette[j]) < 15.0)
                throw std::invalid_argument("generate_scene: palette colors too close");

    std::mt19937_64 rng(seed);
    SceneRecord rec;
    rec.image = ImageRgb(spec.width, spec.height);
    paint_background(rec.image, spec.background, rng);

    std::uniform_int_distribution<int> un(spec.min_objects, spec.max_objects);
    const int want = un(rng);
    std::uniform_real_distribution<double> usize(std::log(spec.min_size),
                                                 std::log(std::min({spec.max_size,
                                                                    double(spec.width),
                                                                    double(spec.height)})));
    std::vector<Box> placed;
    for (int obj = 0; obj < want; ++obj) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            const double w = std::exp(usize(rng));
            const double h = std::exp(usize(rng));
            std::uniform_real_distribution<double> ux(0.5 * w + 2.0, spec.width - 0.5 * w - 2.0);
            std::uniform_real_distribution<double> uy(0.5 * h + 2.0, spec.height - 0.5 * h - 2.0);
            if (ux.a() >= ux.b() || uy.a() >= uy.b()) continue;
            const Box cand{ux(rng), uy(rng), w, h};
            bool clash = false;
            for (const auto& p : placed)
                if (iou(cand, p) > spec.overlap_cap) {
                    clash = true;
                    break;
                }
            if (clash) continue;

            const ShapeKind kind = spec.shape_kinds[rng() % spec.shape_kinds.size()];
            const auto& lab = spec.palette[rng() % spec.palette.size()];
            const auto rgbv = lab_to_srgb(lab[0], lab[1], lab[2]);

            Mask mask(spec.width, spec.height);
            const int x0 = std::max(0, static_cast<int>(std::floor(cand.x1())));
            const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(cand.x2())));
            const int y0 = std::max(0, static_cast<int>(std::floor(cand.y1())));
            const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(cand.y2())));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x)
                    if (point_in_shape(kind, x + 0.5, y + 0.5, cand)) mask.set(x, y);
            const auto tight = mask.tight_box();
            if (!tight) continue;

            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    if (!mask.at(x, y)) continue;
                    auto* p = rec.image.px(x, y);
                    p[0] = rgbv[0];
                    p[1] = rgbv[1];
                    p[2] = rgbv[2];
                }
            }
            GtObject gt;
            gt.box = *tight;
            gt.mask = std::move(mask);
            gt.category = static_cast<int>(kind);
            rec.gts.push_back(std::move(gt));
            placed.push_back(cand);
            ok = true;
        }
        if (!ok) {
            rec.placement_shortfall = true;
            break;
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Feature extraction

namespace {

double bilinear(const std::vector<double>& plane, int w, int h, double x, double y) {
    // sample at pixel-center lattice with clamped borders
    const double u = std::clamp(x - 0.5, 0.0, w - 1.0);
    const double v = std::clamp(y - 0.5, 0.0, h - 1.0);
    const int x0 = std::min(static_cast<int>(u), w - 2 < 0 ? 0 : w - 2);
    const int y0 = std::min(static_cast<int>(v), h - 2 < 0 ? 0 : h - 2);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = u - x0, fy = v - y0;
    const double v00 = plane[static_cast<std::size_t>(y0) * w + x0];
    const double v10 = plane[static_cast<std::size_t>(y0) * w + x1];
    const double v01 = plane[static_cast<std::size_t>(y1) * w + x0];
    const double v11 = plane[static_cast<std::size_t>(y1) * w + x1];
    return v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy) + v01 * (1 - fx) * fy + v11 * fx * fy;
}

}  // namespace

RoiFeatures roi_features(const LabImage& lab, const Box& box) {
    RoiFeatures out;
    out.values = Eigen::VectorXd::Zero(kRoiFeatureDim);
    const Box window{box.cx, box.cy, box.w * kRoiContextScale, box.h * kRoiContextScale};
    const auto clipped = clip_box(window, ImageSize{lab.width, lab.height});
    if (!clipped) {
        out.degenerate = true;
        return out;
    }
    const Box& c = *clipped;
    // Sparse subsampling acts as a scale bandpass: content much smaller
    // than the window falls between sample points and stops registering,
    // the way small structure vanishes from coarse pyramid levels.
    constexpr int kSub = 2;  // subsamples per cell and axis
    const std::vector<double>* planes[3] = {&lab.l, &lab.a, &lab.b};
    int fi = 0;
    for (int cy = 0; cy < 3; ++cy) {
        for (int cx = 0; cx < 3; ++cx) {
            const double cw = c.w / 3.0, ch = c.h / 3.0;
            const double ox = c.x1() + cx * cw, oy = c.y1() + cy * ch;
            for (int ch_i = 0; ch_i < 3; ++ch_i) {
                std::array<double, kSub * kSub> samples;
                int si = 0;
                for (int sy = 0; sy < kSub; ++sy) {
                    for (int sx = 0; sx < kSub; ++sx) {
                        const double x = ox + (sx + 0.5) / kSub * cw;
                        const double y = oy + (sy + 0.5) / kSub * ch;
                        samples[si++] = bilinear(*planes[ch_i], lab.width, lab.height, x, y);
                    }
                }
                const double n = kSub * kSub;
                double mean = 0.0;
                for (double v : samples) mean += v;
                mean /= n;
                double var = 0.0;
                for (double v : samples) var += (v - mean) * (v - mean);
                const double shift = ch_i == 0 ? kLabShift : 0.0;
                out.values[fi++] = (mean - shift) / kLabScale;
                out.values[fi++] = std::sqrt(var / n) / kStdScale;
            }
        }
    }
    const auto box_clipped = clip_box(box, ImageSize{lab.width, lab.height});
    const Box& g = box_clipped ? *box_clipped : c;
    out.values[54] = std::log(g.w / lab.width);
    out.values[55] = std::log(g.h / lab.height);
    return out;
}

PixelGrid pixel_feature_map(const LabImage& lab, int stride) {
    if (stride < 1) throw std::invalid_argument("pixel_feature_map: stride < 1");
    PixelGrid grid;
    grid.stride = stride;
    grid.gw = (lab.width + stride - 1) / stride;
    grid.gh = (lab.height + stride - 1) / stride;
    grid.channels = Eigen::MatrixXd::Zero(grid.cells(), kPixelChannels);

    Eigen::MatrixXd means(grid.cells(), 3);
    Eigen::VectorXd stds(grid.cells());
    for (int gy = 0; gy < grid.gh; ++gy) {
        for (int gx = 0; gx < grid.gw; ++gx) {
            const int x0 = gx * stride, y0 = gy * stride;
            const int x1 = std::min(lab.width, x0 + stride);
            const int y1 = std::min(lab.height, y0 + stride);
            double s[3] = {0, 0, 0};
            int n = 0;
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    for (int ch = 0; ch < 3; ++ch) s[ch] += lab.plane(ch, x, y);
                    ++n;
                }
            }
            const int idx = grid.cell_index(gx, gy);
            double var_sum = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                const double mean = s[ch] / n;
                means(idx, ch) = mean;
                double var = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        const double d = lab.plane(ch, x, y) - mean;
                        var += d * d;
                    }
                var_sum += var / n;
            }
            stds(idx) = std::sqrt(var_sum / 3.0);
        }
    }
    for (int gy = 0; gy < grid.gh; ++gy) {
        for (int gx = 0; gx < grid.gw; ++gx) {
            const int idx = grid.cell_index(gx, gy);
            const int xl = std::max(0, gx - 1), xr = std::min(grid.gw - 1, gx + 1);
            const int yl = std::max(0, gy - 1), yr = std::min(grid.gh - 1, gy + 1);
            double gxv = 0.0, gyv = 0.0;
            if (xr > xl) {
                const auto d = (means.row(grid.cell_index(xr, gy)) -
                                means.row(grid.cell_index(xl, gy))) /
                               (xr - xl);
                gxv = d.norm();
            }
            if (yr > yl) {
                const auto d = (means.row(grid.cell_index(gx, yr)) -
                                means.row(grid.cell_index(gx, yl))) /
                               (yr - yl);
                gyv = d.norm();
            }
            grid.channels(idx, 0) = (means(idx, 0) - kLabShift) / kLabScale;
            grid.channels(idx, 1) = means(idx, 1) / kLabScale;
            grid.channels(idx, 2) = means(idx, 2) / kLabScale;
            grid.channels(idx, 3) = gxv / kStdScale;
            grid.channels(idx, 4) = gyv / kStdScale;
            grid.channels(idx, 5) = stds(idx) / kStdScale;
            grid.channels(idx, 6) = (gx + 0.5) / grid.gw;
            grid.channels(idx, 7) = (gy + 0.5) / grid.gh;
        }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Disk layout

void save_scene_records(const std::vector<SceneRecord>& records,
                        const std::filesystem::path& dir, const std::string& index_name,
                        const std::vector<ShapeKind>& kinds) {
    std::filesystem::create_directories(dir / "images");
    Dataset ds;
    for (ShapeKind k : kinds)
        ds.categories.push_back({static_cast<int>(k), shape_name(k)});
    int next_ann = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        char name[64];
        std::snprintf(name, sizeof(name), "scene_%05zu.png", i);
        write_png(rec.image, dir / "images" / name);
        ds.images.push_back({static_cast<int>(i), rec.image.width, rec.image.height,
                             std::string("images/") + name});
        for (std::size_t j = 0; j < rec.gts.size(); ++j) {
            const auto& gt = rec.gts[j];
            DatasetAnnotation a;
            a.id = next_ann++;
            a.image_id = static_cast<int>(i);
            a.category_id = gt.category;
            a.bbox = gt.box;
            a.segmentation = gt.mask;
            if (j < rec.points.size())
                a.point = std::array<double, 2>{rec.points[j].x, rec.points[j].y};
            ds.annotations.push_back(std::move(a));
        }
    }
    save_dataset(ds, dir / index_name);
}

std::vector<SceneRecord> load_scene_records(const std::filesystem::path& dir,
                                            const std::string& index_name) {
    const Dataset ds = load_dataset(dir / index_name);
    std::vector<SceneRecord> records(ds.images.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        records[i].image = read_png(dir / ds.images[i].file);
        if (records[i].image.width != ds.images[i].width ||
            records[i].image.height != ds.images[i].height)
            throw std::runtime_error("image size mismatch for " + ds.images[i].file);
    }
    for (const auto& a : ds.annotations) {
        std::size_t img_idx = 0;
        for (; img_idx < ds.images.size(); ++img_idx)
            if (ds.images[img_idx].id == a.image_id) break;
        auto& rec = records[img_idx];
        GtObject gt;
        if (a.bbox) gt.box = *a.bbox;
        if (a.segmentation) gt.mask = *a.segmentation;
        gt.category = a.category_id;
        rec.gts.push_back(std::move(gt));
        if (a.point)
            rec.points.push_back(
                PointAnnotation{(*a.point)[0], (*a.point)[1], a.category_id, a.id});
    }
    return records;
}

}  // namespace pointlab
