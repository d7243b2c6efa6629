#include "pointlab/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace pointlab {

using ordered_json = nlohmann::ordered_json;

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1));
}

std::optional<Box> Mask::tight_box() const {
    int x0 = width, y0 = height, x1 = -1, y1 = -1;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (!at(x, y)) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) return std::nullopt;
    return Box::from_corners(x0, y0, x1 + 1, y1 + 1);
}

std::vector<int> rle_encode(const Mask& m) {
    std::vector<int> counts;
    std::uint8_t cur = 0;  // runs always start on zeros
    int run = 0;
    for (int x = 0; x < m.width; ++x) {
        for (int y = 0; y < m.height; ++y) {
            const std::uint8_t v = m.at(x, y) ? 1 : 0;
            if (v == cur) {
                ++run;
            } else {
                counts.push_back(run);
                cur = v;
                run = 1;
            }
        }
    }
    counts.push_back(run);
    return counts;
}

Mask rle_decode(int width, int height, std::span<const int> counts) {
    Mask m(width, height);
    long total = 0;
    for (int c : counts) {
        if (c < 0) throw std::runtime_error("segmentation.counts: negative run");
        total += c;
    }
    if (total != static_cast<long>(width) * height)
        throw std::runtime_error("segmentation.counts: runs do not cover size");
    long pos = 0;
    std::uint8_t cur = 0;
    for (int c : counts) {
        for (int i = 0; i < c; ++i, ++pos) {
            const int x = static_cast<int>(pos / height);
            const int y = static_cast<int>(pos % height);
            if (cur) m.set(x, y);
        }
        cur ^= 1;
    }
    return m;
}

double mask_iou(const Mask& a, const Mask& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += av && bv;
        uni += av || bv;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Mask rasterize_box(const Box& b, int width, int height) {
    Mask m(width, height);
    for (int y = 0; y < height; ++y) {
        const double cy = y + 0.5;
        if (cy < b.y1() || cy > b.y2()) continue;
        for (int x = 0; x < width; ++x) {
            const double cx = x + 0.5;
            if (cx >= b.x1() && cx <= b.x2()) m.set(x, y);
        }
    }
    return m;
}

namespace {

bool pixel_in_ellipse(int px, int py, const Box& box, double kappa) {
    const double ax = kappa * box.w;
    const double ay = kappa * box.h;
    if (ax <= 0.0 || ay <= 0.0) return false;
    const double nx = (px + 0.5 - box.cx) / ax;
    const double ny = (py + 0.5 - box.cy) / ay;
    return nx * nx + ny * ny <= 1.0;
}

}  // namespace

PointAnnotation sample_qc_point(const GtObject& gt, const QcSpec& spec,
                                std::mt19937_64& rng, int object_id) {
    const Mask& m = gt.mask;
    // V = mask ∩ central ellipse, or the whole mask when disjoint
    std::vector<std::pair<int, int>> support;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y) && pixel_in_ellipse(x, y, gt.box, spec.kappa))
                support.emplace_back(x, y);
    const bool ellipse_hit = !support.empty();
    if (!ellipse_hit) {
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x)
                if (m.at(x, y)) support.emplace_back(x, y);
    }
    if (support.empty())
        throw std::invalid_argument("sample_qc_point: empty mask");

    auto in_support = [&](double x, double y) {
        const int px = static_cast<int>(std::floor(x));
        const int py = static_cast<int>(std::floor(y));
        if (px < 0 || py < 0 || px >= m.width || py >= m.height) return false;
        if (!m.at(px, py)) return false;
        return !ellipse_hit || pixel_in_ellipse(px, py, gt.box, spec.kappa);
    };

    std::normal_distribution<double> nx(gt.box.cx + spec.mu, spec.sigma * gt.box.w);
    std::normal_distribution<double> ny(gt.box.cy + spec.mu, spec.sigma * gt.box.h);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double x = nx(rng);
        const double y = ny(rng);
        if (in_support(x, y)) return PointAnnotation{x, y, gt.category, object_id};
    }
    const auto [px, py] = support[rng() % support.size()];
    return PointAnnotation{px + 0.5, py + 0.5, gt.category, object_id};
}

// ---------------------------------------------------------------------------
// JSON index

namespace {

[[noreturn]] void schema_error(const std::string& where, const std::string& what) {
    throw std::runtime_error("dataset schema: " + where + ": " + what);
}

void require_keys(const ordered_json& obj, const std::string& where,
                  const std::vector<std::string>& required,
                  const std::vector<std::string>& optional = {}) {
    for (const auto& k : required)
        if (!obj.contains(k)) schema_error(where, "missing key '" + k + "'");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const std::string& k = it.key();
        if (std::find(required.begin(), required.end(), k) == required.end() &&
            std::find(optional.begin(), optional.end(), k) == optional.end())
            schema_error(where, "unknown key '" + k + "'");
    }
}

int get_int(const ordered_json& obj, const std::string& where, const std::string& key) {
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) schema_error(where + "." + key, "expected integer");
    return v.get<int>();
}

double get_num(const ordered_json& obj, const std::string& where, const std::string& key) {
    const auto& v = obj.at(key);
    if (!v.is_number()) schema_error(where + "." + key, "expected number");
    return v.get<double>();
}

std::string get_str(const ordered_json& obj, const std::string& where,
                    const std::string& key) {
    const auto& v = obj.at(key);
    if (!v.is_string()) schema_error(where + "." + key, "expected string");
    return v.get<std::string>();
}

ordered_json annotation_to_json(const DatasetAnnotation& a) {
    ordered_json j;
    j["id"] = a.id;
    j["image_id"] = a.image_id;
    j["category_id"] = a.category_id;
    if (a.point) j["point"] = {(*a.point)[0], (*a.point)[1]};
    if (a.bbox) j["bbox"] = {a.bbox->x1(), a.bbox->y1(), a.bbox->w, a.bbox->h};
    if (a.score) j["score"] = *a.score;
    if (a.segmentation) {
        j["segmentation"] = {{"size", {a.segmentation->height, a.segmentation->width}},
                             {"counts", rle_encode(*a.segmentation)}};
    }
    return j;
}

}  // namespace

const DatasetImage& Dataset::image_by_id(int id) const {
    for (const auto& im : images)
        if (im.id == id) return im;
    throw std::runtime_error("dataset: no image with id " + std::to_string(id));
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("dataset parse error in " + path.string() + ": " + e.what());
    }
    require_keys(j, "root", {"images", "categories", "annotations"});

    Dataset ds;
    for (const auto& ji : j.at("images")) {
        require_keys(ji, "images[]", {"id", "width", "height", "file"});
        ds.images.push_back(DatasetImage{get_int(ji, "images[]", "id"),
                                         get_int(ji, "images[]", "width"),
                                         get_int(ji, "images[]", "height"),
                                         get_str(ji, "images[]", "file")});
    }
    for (const auto& jc : j.at("categories")) {
        require_keys(jc, "categories[]", {"id", "name"});
        ds.categories.push_back(
            DatasetCategory{get_int(jc, "categories[]", "id"), get_str(jc, "categories[]", "name")});
    }
    for (const auto& ja : j.at("annotations")) {
        require_keys(ja, "annotations[]", {"id", "image_id", "category_id"},
                     {"point", "bbox", "score", "segmentation"});
        DatasetAnnotation a;
        a.id = get_int(ja, "annotations[]", "id");
        a.image_id = get_int(ja, "annotations[]", "image_id");
        a.category_id = get_int(ja, "annotations[]", "category_id");
        if (ja.contains("point")) {
            const auto& p = ja.at("point");
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
                schema_error("annotations[].point", "expected [x, y]");
            a.point = std::array<double, 2>{p[0].get<double>(), p[1].get<double>()};
        }
        if (ja.contains("bbox")) {
            const auto& b = ja.at("bbox");
            if (!b.is_array() || b.size() != 4)
                schema_error("annotations[].bbox", "expected [x, y, w, h]");
            a.bbox = Box::from_topleft(b[0].get<double>(), b[1].get<double>(),
                                       b[2].get<double>(), b[3].get<double>());
        }
        if (ja.contains("score")) a.score = get_num(ja, "annotations[]", "score");
        if (ja.contains("segmentation")) {
            const auto& s = ja.at("segmentation");
            require_keys(s, "annotations[].segmentation", {"size", "counts"});
            const auto& sz = s.at("size");
            if (!sz.is_array() || sz.size() != 2)
                schema_error("annotations[].segmentation.size", "expected [h, w]");
            const int h = sz[0].get<int>(), w = sz[1].get<int>();
            std::vector<int> counts;
            for (const auto& c : s.at("counts")) {
                if (!c.is_number_integer())
                    schema_error("annotations[].segmentation.counts", "expected integers");
                counts.push_back(c.get<int>());
            }
            a.segmentation = rle_decode(w, h, counts);
        }
        ds.annotations.push_back(std::move(a));
    }

    for (const auto& a : ds.annotations) {
        const bool cat_known =
            std::any_of(ds.categories.begin(), ds.categories.end(),
                        [&](const DatasetCategory& c) { return c.id == a.category_id; });
        if (!cat_known)
            schema_error("annotations[].category_id",
                         "unknown category id " + std::to_string(a.category_id));
        const bool img_known = std::any_of(ds.images.begin(), ds.images.end(),
                                           [&](const DatasetImage& i) { return i.id == a.image_id; });
        if (!img_known)
            schema_error("annotations[].image_id",
                         "unknown image id " + std::to_string(a.image_id));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    ordered_json j;
    j["images"] = ordered_json::array();
    for (const auto& im : ds.images)
        j["images"].push_back(
            {{"id", im.id}, {"width", im.width}, {"height", im.height}, {"file", im.file}});
    j["categories"] = ordered_json::array();
    for (const auto& c : ds.categories)
        j["categories"].push_back({{"id", c.id}, {"name", c.name}});
    j["annotations"] = ordered_json::array();
    for (const auto& a : ds.annotations) j["annotations"].push_back(annotation_to_json(a));

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path.string());
    out << j.dump(1) << "\n";
}

void export_labels(const Dataset& index, const std::vector<PseudoExportEntry>& pseudo,
                   const std::filesystem::path& path) {
    Dataset out = index;
    for (const auto& p : pseudo) {
        auto it = std::find_if(out.annotations.begin(), out.annotations.end(),
                               [&](const DatasetAnnotation& a) { return a.id == p.object_id; });
        if (it == out.annotations.end())
            throw std::runtime_error("export_labels: no annotation with id " +
                                     std::to_string(p.object_id));
        it->bbox = p.box;
        it->score = p.score;
        if (p.mask) {
            it->segmentation = *p.mask;
        } else {
            const auto& im = out.image_by_id(it->image_id);
            it->segmentation = rasterize_box(p.box, im.width, im.height);
        }
    }
    save_dataset(out, path);
}

}  // namespace pointlab
