#include "pointlab/cascade.hpp"

#include <random>

#include "doctest.h"
#include "pointlab/annotation.hpp"

using namespace pointlab;

namespace {

// tiny annotated corpus for fast pipeline runs
std::vector<SceneRecord> tiny_corpus(int n_scenes, std::uint64_t seed) {
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 2;
    std::vector<SceneRecord> records;
    std::mt19937_64 rng(seed);
    int next_id = 0;
    for (int i = 0; i < n_scenes; ++i) {
        auto rec = generate_scene(spec, mix_seed(seed, i));
        for (const auto& gt : rec.gts)
            rec.points.push_back(sample_qc_point(gt, QcSpec{}, rng, next_id++));
        records.push_back(std::move(rec));
    }
    return records;
}

CascadeConfig fast_config(const std::string& plan, std::uint64_t seed, int threads = 1) {
    CascadeConfig cfg;
    cfg.plan = StagePlan::parse(plan);
    cfg.sgd.epochs = 2;
    cfg.sgd.decay_epochs = {};
    cfg.threads = threads;
    cfg.seed = seed;
    return cfg;
}

bool histories_identical(const CascadeResult& a, const CascadeResult& b) {
    if (a.history.size() != b.history.size()) return false;
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        if (a.history[i].size() != b.history[i].size()) return false;
        for (std::size_t s = 0; s < a.history[i].size(); ++s) {
            const auto& x = a.history[i][s];
            const auto& y = b.history[i][s];
            if (x.box.cx != y.box.cx || x.box.cy != y.box.cy || x.box.w != y.box.w ||
                x.box.h != y.box.h || x.score != y.score || x.object_id != y.object_id)
                return false;
            if ((x.object_feat - y.object_feat).cwiseAbs().maxCoeff() != 0.0) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("stage plans parse, validate, and round-trip names") {
    const auto two = StagePlan::parse("cbp+pbr");
    CHECK(two.stages.size() == 2);
    CHECK(two.pbr_iterations() == 1);
    CHECK(!two.has_spsd());
    CHECK(two.name() == "cbp+pbr");

    const auto three = StagePlan::parse("cbp+pbr+spsd");
    CHECK(three.has_spsd());
    CHECK(three.name() == "cbp+pbr+spsd");

    CHECK_THROWS(StagePlan::parse("pbr+cbp"));
    CHECK_THROWS(StagePlan::parse("cbp+spsd+pbr"));
    CHECK_THROWS(StagePlan::parse("cbp+banana"));
}

TEST_CASE("predict_pseudo on a singleton bag returns the proposal") {
    const MilModel m = MilModel::init(kRoiFeatureDim, 16, 16, 3, 1, false, 5);
    const Box only{40, 40, 12, 18};
    Eigen::MatrixXd feats = Eigen::MatrixXd::Random(1, kRoiFeatureDim);
    const auto label = predict_pseudo(m, 0, MilMode::cbp, std::vector<Box>{only}, feats, 1, 4);
    CHECK(label.box.cx == only.cx);
    CHECK(label.box.w == only.w);
}

TEST_CASE("zero-initialized regression head decodes to the input boxes") {
    MilModel m = MilModel::init(kRoiFeatureDim, 16, 16, 3, 2, true, 7);
    m.reg->w.setZero();
    m.reg->b.setZero();
    const std::vector<Box> raw = {Box{30, 30, 10, 10}, Box{60, 50, 24, 12}};
    Eigen::MatrixXd feats = Eigen::MatrixXd::Random(2, kRoiFeatureDim);
    const auto bag =
        spsd_regress_bag(m, raw, feats, ImageSize{128, 128}, 0.95, /*include_originals=*/true);
    // decoded == raw, so the originals dedup away and the bag equals the input
    REQUIRE(bag.size() == raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        CHECK(bag[i].cx == doctest::Approx(raw[i].cx));
        CHECK(bag[i].w == doctest::Approx(raw[i].w));
    }
}

TEST_CASE("coarse-only plan emits anchor-hull pseudo boxes with history length 1") {
    const auto records = tiny_corpus(3, 42);
    const auto cfg = fast_config("cbp", 11);
    const auto result = run_pipeline(records, cfg);
    REQUIRE(result.history.size() == result.objects.size());
    std::size_t obj = 0;
    for (const auto& rec : records) {
        for (const auto& pt : rec.points) {
            REQUIRE(result.history[obj].size() == 1);
            const auto& label = result.history[obj][0];
            // merged coordinates stay inside the anchor hull around the point
            const auto anchors = cbp_sample(pt.x, pt.y, ImageSize{rec.image.width, rec.image.height},
                                            cfg.cbp_spec);
            double wlo = 1e9, whi = -1e9, xlo = 1e9, xhi = -1e9;
            for (const auto& a : anchors) {
                wlo = std::min(wlo, a.w);
                whi = std::max(whi, a.w);
                xlo = std::min(xlo, a.cx);
                xhi = std::max(xhi, a.cx);
            }
            CHECK(label.box.w >= wlo - 1e-9);
            CHECK(label.box.w <= whi + 1e-9);
            CHECK(label.box.cx >= xlo - 1e-9);
            CHECK(label.box.cx <= xhi + 1e-9);
            ++obj;
        }
    }
}

TEST_CASE("pseudo-label history length equals the stage count") {
    const auto records = tiny_corpus(2, 77);
    for (const char* plan : {"cbp", "cbp+pbr", "cbp+pbr+spsd"}) {
        const auto result = run_pipeline(records, fast_config(plan, 3));
        const std::size_t expect = StagePlan::parse(plan).stages.size();
        for (const auto& h : result.history) CHECK(h.size() == expect);
        CHECK(result.final_bag_scores.size() == result.history.size());
    }
}

TEST_CASE("identical seeds give bit-identical histories") {
    const auto records = tiny_corpus(2, 5);
    const auto a = run_pipeline(records, fast_config("cbp+pbr", 9));
    const auto b = run_pipeline(records, fast_config("cbp+pbr", 9));
    CHECK(histories_identical(a, b));
    const auto c = run_pipeline(records, fast_config("cbp+pbr", 10));
    CHECK(!histories_identical(a, c));
}

TEST_CASE("thread count does not change the result") {
    const auto records = tiny_corpus(3, 21);
    const auto a = run_pipeline(records, fast_config("cbp+pbr+spsd", 13, 1));
    const auto b = run_pipeline(records, fast_config("cbp+pbr+spsd", 13, 2));
    CHECK(histories_identical(a, b));
}

TEST_CASE("pipeline requires point annotations") {
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 1;
    std::vector<SceneRecord> records = {generate_scene(spec, 3)};  // no points
    CHECK_THROWS_AS(run_pipeline(records, fast_config("cbp", 1)), std::invalid_argument);
}
