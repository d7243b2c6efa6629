#include "pointlab/mil.hpp"

#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"

using namespace pointlab;

namespace {

Eigen::MatrixXd random_features(std::mt19937_64& rng, int u, int d) {
    std::normal_distribution<double> n(0.0, 1.0);
    return Eigen::MatrixXd::NullaryExpr(u, d, [&]() { return n(rng); });
}

Eigen::VectorXd one_hot(int k, int idx) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(k);
    v[idx] = 1.0;
    return v;
}

// Plain-loop reimplementation of the bag forward, used as an oracle.
Eigen::VectorXd naive_bag_score(const MilModel& m, int stage, const Eigen::MatrixXd& x,
                                MilMode mode) {
    const int u = static_cast<int>(x.rows());
    const int hidden = static_cast<int>(m.fc1.w.rows());
    const int d = static_cast<int>(m.fc2.w.rows());
    const int k = m.num_classes();
    std::vector<std::vector<double>> f(u, std::vector<double>(d));
    for (int i = 0; i < u; ++i) {
        std::vector<double> a1(hidden);
        for (int hh = 0; hh < hidden; ++hh) {
            double s = m.fc1.b[hh];
            for (int c = 0; c < x.cols(); ++c) s += m.fc1.w(hh, c) * x(i, c);
            a1[hh] = std::max(0.0, s);
        }
        for (int dd = 0; dd < d; ++dd) {
            double s = m.fc2.b[dd];
            for (int hh = 0; hh < hidden; ++hh) s += m.fc2.w(dd, hh) * a1[hh];
            f[i][dd] = std::max(0.0, s);
        }
    }
    std::vector<std::vector<double>> ocls(u, std::vector<double>(k)), oins = ocls;
    for (int i = 0; i < u; ++i)
        for (int kk = 0; kk < k; ++kk) {
            double sc = m.stages[stage].cls.b[kk], si = m.stages[stage].ins.b[kk];
            for (int dd = 0; dd < d; ++dd) {
                sc += m.stages[stage].cls.w(kk, dd) * f[i][dd];
                si += m.stages[stage].ins.w(kk, dd) * f[i][dd];
            }
            ocls[i][kk] = sc;
            oins[i][kk] = si;
        }
    std::vector<std::vector<double>> scls(u, std::vector<double>(k)), sins = scls;
    for (int i = 0; i < u; ++i) {
        if (mode == MilMode::cbp) {
            double denom = 0.0;
            for (int kk = 0; kk < k; ++kk) denom += std::exp(ocls[i][kk]);
            for (int kk = 0; kk < k; ++kk) scls[i][kk] = std::exp(ocls[i][kk]) / denom;
        } else {
            for (int kk = 0; kk < k; ++kk) scls[i][kk] = 1.0 / (1.0 + std::exp(-ocls[i][kk]));
        }
    }
    for (int kk = 0; kk < k; ++kk) {
        double denom = 0.0;
        for (int i = 0; i < u; ++i) denom += std::exp(oins[i][kk]);
        for (int i = 0; i < u; ++i) sins[i][kk] = std::exp(oins[i][kk]) / denom;
    }
    Eigen::VectorXd s_hat = Eigen::VectorXd::Zero(k);
    for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < u; ++i) s_hat[kk] += scls[i][kk] * sins[i][kk];
    return s_hat;
}

MilModel toy_model(std::uint64_t seed, bool with_reg = true) {
    return MilModel::init(8, 10, 10, 3, 2, with_reg, seed);
}

}  // namespace

TEST_CASE("all-zero logits give the symmetric bag forward") {
    MilModel m = zeros_like(toy_model(1));
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 8);

    SUBCASE("cbp mode") {
        // K=3 here, so the row softmax spreads to 1/3 per class
        const auto fwd = forward_bag(m, 0, x, MilMode::cbp);
        CHECK(fwd.s_cls(0, 0) == doctest::Approx(1.0 / 3.0));
        CHECK(fwd.s_ins(0, 0) == doctest::Approx(0.5));
        CHECK(fwd.s(0, 0) == doctest::Approx(1.0 / 6.0));
        CHECK(fwd.s_hat[0] == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("pbr mode") {
        const auto fwd = forward_bag(m, 1, x, MilMode::pbr);
        CHECK(fwd.s_cls(0, 0) == doctest::Approx(0.5));
        CHECK(fwd.s_ins(1, 2) == doctest::Approx(0.5));
        CHECK(fwd.s_hat[0] == doctest::Approx(0.5));
        CHECK(fwd.s_hat[2] == doctest::Approx(0.5));
    }
}

TEST_CASE("two-class all-zero logits reproduce the textbook 0.25 table") {
    MilModel m = zeros_like(MilModel::init(4, 6, 6, 2, 1, false, 3));
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 4);
    const auto fwd = forward_bag(m, 0, x, MilMode::cbp);
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < 2; ++k) {
            CHECK(fwd.s_cls(i, k) == doctest::Approx(0.5));
            CHECK(fwd.s_ins(i, k) == doctest::Approx(0.5));
            CHECK(fwd.s(i, k) == doctest::Approx(0.25));
        }
    CHECK(fwd.s_hat[0] == doctest::Approx(0.5));
    CHECK(fwd.s_hat[1] == doctest::Approx(0.5));
}

TEST_CASE("bag forward matches the naive loop oracle") {
    std::mt19937_64 rng(17);
    const MilModel m = toy_model(99);
    for (int trial = 0; trial < 30; ++trial) {
        const int u = 1 + static_cast<int>(rng() % 7);
        const Eigen::MatrixXd x = random_features(rng, u, 8);
        for (MilMode mode : {MilMode::cbp, MilMode::pbr}) {
            const int stage = mode == MilMode::cbp ? 0 : 1;
            const auto fwd = forward_bag(m, stage, x, mode);
            const auto oracle = naive_bag_score(m, stage, x, mode);
            CHECK((fwd.s_hat - oracle).cwiseAbs().maxCoeff() < 1e-12);
            for (int k = 0; k < 3; ++k) {
                CHECK(fwd.s_hat[k] >= 0.0);
                CHECK(fwd.s_hat[k] <= 1.0);
            }
        }
    }
}

TEST_CASE("softmax normalization invariants hold over random bags") {
    std::mt19937_64 rng(23);
    const MilModel m = toy_model(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const int u = 1 + static_cast<int>(rng() % 8);
        const auto fwd = forward_bag(m, trial % 2, random_features(rng, u, 8),
                                     trial % 2 == 0 ? MilMode::cbp : MilMode::pbr);
        if (trial % 2 == 0)
            for (int i = 0; i < u; ++i)
                CHECK(std::abs(fwd.s_cls.row(i).sum() - 1.0) < 1e-6);
        for (int k = 0; k < 3; ++k) {
            CHECK(std::abs(fwd.s_ins.col(k).sum() - 1.0) < 1e-6);
            CHECK(fwd.s_hat[k] >= 0.0);
            CHECK(fwd.s_hat[k] <= 1.0);
        }
    }
}

TEST_CASE("bag score, loss, and gradients are exactly permutation invariant") {
    std::mt19937_64 rng(31);
    const MilModel m = toy_model(11);
    const int u = 6;
    const Eigen::MatrixXd x = random_features(rng, u, 8);
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    Eigen::MatrixXd xp(u, 8);
    for (int i = 0; i < u; ++i) xp.row(i) = x.row(perm[i]);

    const Eigen::VectorXd label = one_hot(3, 1);
    for (MilMode mode : {MilMode::cbp, MilMode::pbr}) {
        const int stage = mode == MilMode::cbp ? 0 : 1;
        const auto fa = forward_bag(m, stage, x, mode);
        const auto fb = forward_bag(m, stage, xp, mode);
        for (int k = 0; k < 3; ++k) CHECK(fa.s_hat[k] == fb.s_hat[k]);

        const auto la = cbp_loss(fa.s_hat, label, 0.25);
        const auto lb = cbp_loss(fb.s_hat, label, 0.25);
        CHECK(la.value == lb.value);

        MilModel ga = zeros_like(m), gb = zeros_like(m);
        backward_bag(m, fa, la.d_s_hat, ga);
        backward_bag(m, fb, lb.d_s_hat, gb);
        auto sa = param_spans(ga), sb = param_spans(gb);
        for (std::size_t s = 0; s < sa.size(); ++s)
            for (std::size_t i = 0; i < sa[s].second; ++i)
                CHECK(sa[s].first[i] == sb[s].first[i]);

        // per-proposal scores follow the permutation
        for (int i = 0; i < u; ++i)
            CHECK(fa.proposal_score(perm[i], 1) == fb.proposal_score(i, 1));
    }
}

TEST_CASE("cbp loss hand values") {
    const Eigen::VectorXd label = one_hot(2, 0);
    SUBCASE("perfect prediction is (numerically) zero") {
        Eigen::VectorXd s(2);
        s << 1.0, 0.0;
        const auto l = cbp_loss(s, label, 0.25);
        CHECK(l.value >= 0.0);
        CHECK(l.value <= 0.25 * 2 * 1e-6);
    }
    SUBCASE("uniform prediction equals 0.25 * 2 ln 2") {
        Eigen::VectorXd s(2);
        s << 0.5, 0.5;
        const auto l = cbp_loss(s, label, 0.25);
        CHECK(l.value == doctest::Approx(0.25 * 2.0 * std::log(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("cbp loss gradient matches central differences to 1e-6") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> up(0.05, 0.95);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd s(4), label = one_hot(4, static_cast<int>(rng() % 4));
        for (int i = 0; i < 4; ++i) s[i] = up(rng);
        const auto l = cbp_loss(s, label, 0.25);
        for (int i = 0; i < 4; ++i) {
            const double h = 1e-6;
            Eigen::VectorXd sp = s, sm = s;
            sp[i] += h;
            sm[i] -= h;
            const double numeric =
                (cbp_loss(sp, label, 0.25).value - cbp_loss(sm, label, 0.25).value) / (2 * h);
            CHECK(std::abs(l.d_s_hat[i] - numeric) /
                      std::max({std::abs(numeric), std::abs(l.d_s_hat[i]), 1.0}) <
                  1e-6);
        }
    }
}

TEST_CASE("refinement losses match a term-by-term scalar reference") {
    Eigen::VectorXd s(2), label = one_hot(2, 0);
    s << 0.5, 0.5;
    const double gamma = 2.0;

    const auto m2 = mil2_loss(s, label, 1.0, gamma);
    // scalar reference: -[(1-p)^2 log p] for the GT class, -[p^2 log(1-p)] otherwise
    const double ref_focal = -(std::pow(1.0 - 0.5, gamma) * std::log(0.5)) -
                             (std::pow(0.5, gamma) * std::log(1.0 - 0.5));
    CHECK(m2.value == doctest::Approx(ref_focal).epsilon(1e-12));

    Eigen::MatrixXd s_neg(1, 2);
    s_neg << 0.5, 0.5;
    const auto ln = neg_loss(s_neg, 1.0, gamma);
    const double ref_neg = -2.0 * std::pow(0.5, gamma) * std::log(1.0 - 0.5);
    CHECK(ln.value == doctest::Approx(ref_neg).epsilon(1e-12));
    CHECK(!ln.empty_set);
}

TEST_CASE("refinement loss edge cases") {
    Eigen::VectorXd label = one_hot(2, 0);
    SUBCASE("zero previous score annihilates the positive loss") {
        Eigen::VectorXd s(2);
        s << 0.3, 0.9;
        const auto l = mil2_loss(s, label, 0.0, 2.0);
        CHECK(l.value == 0.0);
        CHECK(l.d_s_hat.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("doubling the previous score exactly doubles the loss") {
        Eigen::VectorXd s(2);
        s << 0.3, 0.7;
        const auto l1 = mil2_loss(s, label, 0.4, 2.0);
        const auto l2 = mil2_loss(s, label, 0.8, 2.0);
        CHECK(l2.value == doctest::Approx(2.0 * l1.value).epsilon(1e-15));
    }
    SUBCASE("all-zero negative scores give (numerically) zero loss") {
        Eigen::MatrixXd s_neg = Eigen::MatrixXd::Zero(5, 2);
        const auto l = neg_loss(s_neg, 1.0, 2.0);
        CHECK(std::abs(l.value) < 1e-12);
    }
    SUBCASE("empty negative set flags and returns zero") {
        const auto l = neg_loss(Eigen::MatrixXd(0, 3), 1.0, 2.0);
        CHECK(l.empty_set);
        CHECK(l.value == 0.0);
    }
}

TEST_CASE("l1 regression loss") {
    Eigen::MatrixXd a(3, 4), b(3, 4);
    a.setRandom();
    b = a;
    CHECK(l1_loss(a, b).value == 0.0);
    b.array() += 0.5;
    CHECK(l1_loss(a, b).value == doctest::Approx(0.5).epsilon(1e-12));

    std::mt19937_64 rng(55);
    std::normal_distribution<double> n(0, 1);
    Eigen::MatrixXd p = Eigen::MatrixXd::NullaryExpr(5, 4, [&]() { return n(rng); });
    Eigen::MatrixXd t = Eigen::MatrixXd::NullaryExpr(5, 4, [&]() { return n(rng); });
    double naive = 0.0;
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) naive += std::abs(p(r, c) - t(r, c));
    naive /= 20.0;
    CHECK(l1_loss(p, t).value == doctest::Approx(naive).epsilon(1e-12));
}

// end-to-end toy objective used for whole-model gradient checks
namespace {

struct ToyBatch {
    std::vector<Eigen::MatrixXd> bags;
    std::vector<Eigen::VectorXd> labels;
    Eigen::MatrixXd negatives;
    Eigen::MatrixXd reg_targets;  // per-proposal deltas for the first bag
};

ToyBatch make_toy_batch(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ToyBatch b;
    b.bags.push_back(random_features(rng, 6, 8));
    b.bags.push_back(random_features(rng, 4, 8));
    b.labels.push_back(one_hot(3, 0));
    b.labels.push_back(one_hot(3, 2));
    b.negatives = random_features(rng, 5, 8);
    std::normal_distribution<double> n(0.0, 0.3);
    b.reg_targets = Eigen::MatrixXd::NullaryExpr(6, 4, [&]() { return n(rng); });
    return b;
}

// Stage weights (previous-stage bag scores and their mean) are frozen
// constants in the joint objective: no gradient flows through them, so
// the finite-difference probe must hold them fixed as well.
struct FrozenWeights {
    std::vector<double> prev_scores;
    double beta = 0.0;
};

FrozenWeights freeze_weights(const MilModel& m, const ToyBatch& b) {
    FrozenWeights w;
    for (std::size_t j = 0; j < b.bags.size(); ++j) {
        const auto fwd = forward_bag(m, 0, b.bags[j], MilMode::cbp);
        w.prev_scores.push_back(fwd.s_hat.dot(b.labels[j]));
    }
    for (double s : w.prev_scores) w.beta += s / static_cast<double>(b.bags.size());
    return w;
}

// joint CBP + refinement + negative + regression objective on the toy batch
double toy_loss(const MilModel& m, const ToyBatch& b, const FrozenWeights& w,
                const LossConfig& cfg) {
    double total = 0.0;
    const double inv_m = 1.0 / static_cast<double>(b.bags.size());
    for (std::size_t j = 0; j < b.bags.size(); ++j) {
        const auto fwd = forward_bag(m, 0, b.bags[j], MilMode::cbp);
        total += inv_m * cbp_loss(fwd.s_hat, b.labels[j], cfg.alpha1).value;
    }
    for (std::size_t j = 0; j < b.bags.size(); ++j) {
        const auto fwd = forward_bag(m, 1, b.bags[j], MilMode::pbr);
        total += cfg.alpha2 * inv_m *
                 mil2_loss(fwd.s_hat, b.labels[j], w.prev_scores[j], cfg.gamma).value;
    }
    const auto negs = forward_negatives(m, 1, b.negatives);
    total += cfg.alpha_neg * neg_loss(negs.s, w.beta, cfg.gamma).value;
    const auto reg = forward_reg(m, b.bags[0]);
    total += l1_loss(reg.pred, b.reg_targets).value;
    return total;
}

MilModel toy_grad(const MilModel& m, const ToyBatch& b, const FrozenWeights& w,
                  const LossConfig& cfg) {
    MilModel g = zeros_like(m);
    const double inv_m = 1.0 / static_cast<double>(b.bags.size());
    for (std::size_t j = 0; j < b.bags.size(); ++j) {
        const auto fwd = forward_bag(m, 0, b.bags[j], MilMode::cbp);
        const auto l = cbp_loss(fwd.s_hat, b.labels[j], cfg.alpha1);
        backward_bag(m, fwd, inv_m * l.d_s_hat, g);
    }
    for (std::size_t j = 0; j < b.bags.size(); ++j) {
        const auto fwd = forward_bag(m, 1, b.bags[j], MilMode::pbr);
        const auto l = mil2_loss(fwd.s_hat, b.labels[j], w.prev_scores[j], cfg.gamma);
        backward_bag(m, fwd, cfg.alpha2 * inv_m * l.d_s_hat, g);
    }
    const auto negs = forward_negatives(m, 1, b.negatives);
    const auto ln = neg_loss(negs.s, w.beta, cfg.gamma);
    backward_negatives(m, negs, cfg.alpha_neg * ln.d_s, g);
    const auto reg = forward_reg(m, b.bags[0]);
    const auto lr = l1_loss(reg.pred, b.reg_targets);
    backward_reg(m, reg, lr.d_pred, g);
    return g;
}

}  // namespace

TEST_CASE("full-model gradients match finite differences") {
    MilModel m = toy_model(2024);
    const ToyBatch batch = make_toy_batch(5);
    const LossConfig cfg;
    const FrozenWeights w = freeze_weights(m, batch);
    const double err = grad_check(
        m, [&](const MilModel& mm) { return toy_loss(mm, batch, w, cfg); },
        [&](const MilModel& mm) { return toy_grad(mm, batch, w, cfg); });
    CHECK(err <= 1e-4);
}

TEST_CASE("per-loss gradients match finite differences") {
    MilModel m = toy_model(77);
    const ToyBatch batch = make_toy_batch(9);
    const LossConfig cfg;

    SUBCASE("cbp only") {
        const double err = grad_check(
            m,
            [&](const MilModel& mm) {
                const auto fwd = forward_bag(mm, 0, batch.bags[0], MilMode::cbp);
                return cbp_loss(fwd.s_hat, batch.labels[0], cfg.alpha1).value;
            },
            [&](const MilModel& mm) {
                MilModel g = zeros_like(mm);
                const auto fwd = forward_bag(mm, 0, batch.bags[0], MilMode::cbp);
                backward_bag(mm, fwd, cbp_loss(fwd.s_hat, batch.labels[0], cfg.alpha1).d_s_hat, g);
                return g;
            });
        CHECK(err <= 1e-4);
    }
    SUBCASE("focal refinement only") {
        const double err = grad_check(
            m,
            [&](const MilModel& mm) {
                const auto fwd = forward_bag(mm, 1, batch.bags[0], MilMode::pbr);
                return mil2_loss(fwd.s_hat, batch.labels[0], 0.7, cfg.gamma).value;
            },
            [&](const MilModel& mm) {
                MilModel g = zeros_like(mm);
                const auto fwd = forward_bag(mm, 1, batch.bags[0], MilMode::pbr);
                backward_bag(mm, fwd,
                             mil2_loss(fwd.s_hat, batch.labels[0], 0.7, cfg.gamma).d_s_hat, g);
                return g;
            });
        CHECK(err <= 1e-4);
    }
    SUBCASE("negative loss only") {
        const double err = grad_check(
            m,
            [&](const MilModel& mm) {
                return neg_loss(forward_negatives(mm, 1, batch.negatives).s, 0.6, cfg.gamma).value;
            },
            [&](const MilModel& mm) {
                MilModel g = zeros_like(mm);
                const auto fwd = forward_negatives(mm, 1, batch.negatives);
                backward_negatives(mm, fwd, neg_loss(fwd.s, 0.6, cfg.gamma).d_s, g);
                return g;
            });
        CHECK(err <= 1e-4);
    }
    SUBCASE("regression only") {
        const double err = grad_check(
            m,
            [&](const MilModel& mm) {
                return l1_loss(forward_reg(mm, batch.bags[0]).pred, batch.reg_targets).value;
            },
            [&](const MilModel& mm) {
                MilModel g = zeros_like(mm);
                const auto fwd = forward_reg(mm, batch.bags[0]);
                backward_reg(mm, fwd, l1_loss(fwd.pred, batch.reg_targets).d_pred, g);
                return g;
            });
        CHECK(err <= 1e-4);
    }
    SUBCASE("all-positive diagnostic loss") {
        const double err = grad_check(
            m,
            [&](const MilModel& mm) {
                const auto fwd = forward_bag(mm, 0, batch.bags[0], MilMode::cbp);
                return pos_loss(fwd, batch.labels[0]).value;
            },
            [&](const MilModel& mm) {
                MilModel g = zeros_like(mm);
                const auto fwd = forward_bag(mm, 0, batch.bags[0], MilMode::cbp);
                backward_bag(mm, fwd, Eigen::VectorXd::Zero(3),
                             pos_loss(fwd, batch.labels[0]).d_s_cls, g);
                return g;
            });
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("a corrupted gradient is detected") {
    MilModel m = toy_model(31);
    const ToyBatch batch = make_toy_batch(13);
    const LossConfig cfg;
    const FrozenWeights w = freeze_weights(m, batch);
    const double err = grad_check(
        m, [&](const MilModel& mm) { return toy_loss(mm, batch, w, cfg); },
        [&](const MilModel& mm) {
            MilModel g = toy_grad(mm, batch, w, cfg);
            // corrupt the largest-magnitude gradient entry by 1%
            auto spans = param_spans(g);
            double* worst = nullptr;
            double best = -1.0;
            for (auto [p, n] : spans)
                for (std::size_t i = 0; i < n; ++i)
                    if (std::abs(p[i]) > best) {
                        best = std::abs(p[i]);
                        worst = &p[i];
                    }
            *worst *= 1.01;
            return g;
        });
    CHECK(err > 1e-3);
}

TEST_CASE("finite-difference error shrinks as the step shrinks") {
    MilModel m = toy_model(47);
    const ToyBatch batch = make_toy_batch(21);
    const LossConfig cfg;
    const FrozenWeights w = freeze_weights(m, batch);
    auto value = [&](const MilModel& mm) { return toy_loss(mm, batch, w, cfg); };
    auto grad = [&](const MilModel& mm) { return toy_grad(mm, batch, w, cfg); };
    const double coarse = grad_check(m, value, grad, 1e-3);
    const double fine = grad_check(m, value, grad, 1e-5);
    CHECK(fine <= coarse);
    CHECK(fine <= 1e-4);
}

TEST_CASE("sgd step mechanics") {
    MilModel m = toy_model(3);
    const ToyBatch batch = make_toy_batch(33);
    const LossConfig cfg;

    SUBCASE("zero learning rate leaves the model unchanged") {
        const MilModel before = m;
        SgdState state(m);
        const MilModel g = toy_grad(m, batch, freeze_weights(m, batch), cfg);
        CHECK(sgd_step(m, g, state, 0.0, 0.9));
        auto sa = param_spans(m);
        MilModel b2 = before;
        auto sb = param_spans(b2);
        for (std::size_t s = 0; s < sa.size(); ++s)
            for (std::size_t i = 0; i < sa[s].second; ++i)
                CHECK(sa[s].first[i] == sb[s].first[i]);
    }
    SUBCASE("a small step decreases the loss") {
        SgdState state(m);
        const FrozenWeights w = freeze_weights(m, batch);
        const double before = toy_loss(m, batch, w, cfg);
        const MilModel g = toy_grad(m, batch, w, cfg);
        CHECK(sgd_step(m, g, state, 1e-3, 0.0));
        CHECK(toy_loss(m, batch, w, cfg) < before);
    }
    SUBCASE("non-finite gradients abort the step") {
        SgdState state(m);
        MilModel g = toy_grad(m, batch, freeze_weights(m, batch), cfg);
        g.fc1.w(0, 0) = std::numeric_limits<double>::quiet_NaN();
        const MilModel before = m;
        CHECK(!sgd_step(m, g, state, 1e-2, 0.9));
        MilModel b2 = before;
        auto sa = param_spans(m), sb = param_spans(b2);
        for (std::size_t s = 0; s < sa.size(); ++s)
            for (std::size_t i = 0; i < sa[s].second; ++i)
                CHECK(sa[s].first[i] == sb[s].first[i]);
    }
}

TEST_CASE("learning-rate schedule decays at the configured epochs") {
    SgdConfig cfg;
    cfg.lr = 0.01;
    cfg.decay_epochs = {8, 11};
    CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(0.01));
    CHECK(lr_at_epoch(cfg, 7) == doctest::Approx(0.01));
    CHECK(lr_at_epoch(cfg, 8) == doctest::Approx(0.001));
    CHECK(lr_at_epoch(cfg, 11) == doctest::Approx(0.0001));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const MilModel m = toy_model(2718);
    const auto path = std::filesystem::temp_directory_path() / "pl_mil_ck.bin";
    std::mt19937_64 rng(5);
    rng();  // advance
    std::ostringstream ss;
    ss << rng;
    save_checkpoint(m, ss.str(), path);
    const auto ck = load_checkpoint(path);
    CHECK(ck.rng_state == ss.str());
    CHECK(ck.model.init_seed == m.init_seed);
    MilModel a = m, b = ck.model;
    auto sa = param_spans(a), sb = param_spans(b);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t s = 0; s < sa.size(); ++s) {
        REQUIRE(sa[s].second == sb[s].second);
        for (std::size_t i = 0; i < sa[s].second; ++i)
            CHECK(sa[s].first[i] == sb[s].first[i]);
    }
    // restoring the rng reproduces the stream
    std::mt19937_64 restored;
    std::istringstream in(ck.rng_state);
    in >> restored;
    CHECK(restored() == rng());
}

TEST_CASE("forward rejects non-finite features and empty bags") {
    const MilModel m = toy_model(8);
    Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 8);
    bad(1, 3) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(forward_bag(m, 0, bad, MilMode::cbp), std::invalid_argument);
    CHECK_THROWS_AS(forward_bag(m, 0, Eigen::MatrixXd(0, 8), MilMode::cbp),
                    std::invalid_argument);
}
