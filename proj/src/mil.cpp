#include "pointlab/mil.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace pointlab {

namespace {

AffineLayer init_affine(int out, int in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    AffineLayer l;
    l.w = Eigen::MatrixXd::NullaryExpr(out, in, [&]() { return u(rng); });
    l.b = Eigen::VectorXd::Zero(out);
    return l;
}

AffineLayer zero_affine(const AffineLayer& src) {
    return AffineLayer{Eigen::MatrixXd::Zero(src.w.rows(), src.w.cols()),
                       Eigen::VectorXd::Zero(src.b.size())};
}

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

}  // namespace

MilModel MilModel::init(int d_in, int hidden, int d, int k, int n_stages, bool with_reg,
                        std::uint64_t seed) {
    if (n_stages < 1) throw std::invalid_argument("MilModel: need at least one stage");
    std::mt19937_64 rng(seed);
    MilModel m;
    m.init_seed = seed;
    m.fc1 = init_affine(hidden, d_in, rng);
    m.fc2 = init_affine(d, hidden, rng);
    for (int s = 0; s < n_stages; ++s)
        m.stages.push_back(StageHeads{init_affine(k, d, rng), init_affine(k, d, rng)});
    if (with_reg) m.reg = init_affine(4, d, rng);
    return m;
}

MilModel zeros_like(const MilModel& m) {
    MilModel z;
    z.init_seed = m.init_seed;
    z.fc1 = zero_affine(m.fc1);
    z.fc2 = zero_affine(m.fc2);
    for (const auto& s : m.stages)
        z.stages.push_back(StageHeads{zero_affine(s.cls), zero_affine(s.ins)});
    if (m.reg) z.reg = zero_affine(*m.reg);
    return z;
}

std::vector<std::pair<double*, std::size_t>> param_spans(MilModel& m) {
    std::vector<std::pair<double*, std::size_t>> spans;
    auto add = [&](AffineLayer& l) {
        spans.emplace_back(l.w.data(), static_cast<std::size_t>(l.w.size()));
        spans.emplace_back(l.b.data(), static_cast<std::size_t>(l.b.size()));
    };
    add(m.fc1);
    add(m.fc2);
    for (auto& s : m.stages) {
        add(s.cls);
        add(s.ins);
    }
    if (m.reg) add(*m.reg);
    return spans;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

TrunkCache forward_trunk(const MilModel& m, const Eigen::MatrixXd& x) {
    TrunkCache t;
    t.x = x;
    t.h1 = (x * m.fc1.w.transpose()).rowwise() + m.fc1.b.transpose();
    t.a1 = t.h1.cwiseMax(0.0);
    t.h2 = (t.a1 * m.fc2.w.transpose()).rowwise() + m.fc2.b.transpose();
    t.f = t.h2.cwiseMax(0.0);
    return t;
}

void backward_trunk(const MilModel& m, const TrunkCache& t, const Eigen::MatrixXd& d_f,
                    MilModel& g) {
    const Eigen::MatrixXd d_h2 =
        d_f.cwiseProduct((t.h2.array() > 0.0).cast<double>().matrix());
    g.fc2.w += d_h2.transpose() * t.a1;
    g.fc2.b += d_h2.colwise().sum().transpose();
    const Eigen::MatrixXd d_a1 = d_h2 * m.fc2.w;
    const Eigen::MatrixXd d_h1 =
        d_a1.cwiseProduct((t.h1.array() > 0.0).cast<double>().matrix());
    g.fc1.w += d_h1.transpose() * t.x;
    g.fc1.b += d_h1.colwise().sum().transpose();
}

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& o) {
    Eigen::MatrixXd s(o.rows(), o.cols());
    for (Eigen::Index r = 0; r < o.rows(); ++r) {
        const double mx = o.row(r).maxCoeff();
        Eigen::ArrayXd e = (o.row(r).array() - mx).exp();
        s.row(r) = (e / e.sum()).matrix();
    }
    return s;
}

Eigen::MatrixXd col_softmax(const Eigen::MatrixXd& o) {
    Eigen::MatrixXd s(o.rows(), o.cols());
    for (Eigen::Index c = 0; c < o.cols(); ++c) {
        const double mx = o.col(c).maxCoeff();
        Eigen::ArrayXd e = (o.col(c).array() - mx).exp();
        s.col(c) = (e / e.sum()).matrix();
    }
    return s;
}

// canonical row order: lexicographic on feature content
std::vector<int> canonical_order(const Eigen::MatrixXd& x) {
    std::vector<int> order(x.rows());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            if (x(a, c) < x(b, c)) return true;
            if (x(a, c) > x(b, c)) return false;
        }
        return false;
    });
    return order;
}

}  // namespace

BagForward forward_bag(const MilModel& m, int stage, const Eigen::MatrixXd& features,
                       MilMode mode) {
    if (features.rows() < 1) throw std::invalid_argument("forward_bag: empty bag");
    if (!features.allFinite()) throw std::invalid_argument("forward_bag: non-finite features");
    if (stage < 0 || stage >= static_cast<int>(m.stages.size()))
        throw std::invalid_argument("forward_bag: stage out of range");

    BagForward fwd;
    fwd.mode = mode;
    fwd.stage = stage;
    fwd.order = canonical_order(features);
    fwd.inv_order.resize(fwd.order.size());
    for (std::size_t i = 0; i < fwd.order.size(); ++i) fwd.inv_order[fwd.order[i]] = static_cast<int>(i);

    Eigen::MatrixXd sorted(features.rows(), features.cols());
    for (Eigen::Index i = 0; i < sorted.rows(); ++i) sorted.row(i) = features.row(fwd.order[i]);

    fwd.trunk = forward_trunk(m, sorted);
    const auto& heads = m.stages[stage];
    fwd.o_cls = (fwd.trunk.f * heads.cls.w.transpose()).rowwise() + heads.cls.b.transpose();
    fwd.o_ins = (fwd.trunk.f * heads.ins.w.transpose()).rowwise() + heads.ins.b.transpose();
    fwd.s_cls = mode == MilMode::cbp
                    ? row_softmax(fwd.o_cls)
                    : (1.0 / (1.0 + (-fwd.o_cls.array()).exp())).matrix();
    fwd.s_ins = col_softmax(fwd.o_ins);
    fwd.s = fwd.s_cls.cwiseProduct(fwd.s_ins);
    fwd.s_hat = fwd.s.colwise().sum().transpose();
    return fwd;
}

void backward_bag(const MilModel& m, const BagForward& fwd, const Eigen::VectorXd& d_s_hat,
                  MilModel& grads) {
    backward_bag(m, fwd, d_s_hat, Eigen::MatrixXd(), grads);
}

void backward_bag(const MilModel& m, const BagForward& fwd, const Eigen::VectorXd& d_s_hat,
                  const Eigen::MatrixXd& d_s_cls_original, MilModel& grads) {
    const Eigen::Index u = fwd.trunk.x.rows();
    const Eigen::Index k = fwd.s_hat.size();

    // dL/dS is d_s_hat broadcast over rows
    Eigen::MatrixXd d_s_cls = fwd.s_ins.array().rowwise() * d_s_hat.transpose().array();
    Eigen::MatrixXd d_s_ins = fwd.s_cls.array().rowwise() * d_s_hat.transpose().array();
    if (d_s_cls_original.size() > 0) {
        for (Eigen::Index i = 0; i < u; ++i)
            d_s_cls.row(i) += d_s_cls_original.row(fwd.order[i]);
    }

    Eigen::MatrixXd d_o_cls(u, k);
    if (fwd.mode == MilMode::cbp) {
        for (Eigen::Index r = 0; r < u; ++r) {
            const double dot = d_s_cls.row(r).dot(fwd.s_cls.row(r));
            d_o_cls.row(r) =
                fwd.s_cls.row(r).cwiseProduct(d_s_cls.row(r) - Eigen::RowVectorXd::Constant(k, dot));
        }
    } else {
        d_o_cls = d_s_cls.cwiseProduct(
            fwd.s_cls.cwiseProduct((1.0 - fwd.s_cls.array()).matrix()));
    }

    Eigen::MatrixXd d_o_ins(u, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        const double dot = d_s_ins.col(c).dot(fwd.s_ins.col(c));
        d_o_ins.col(c) =
            fwd.s_ins.col(c).cwiseProduct(d_s_ins.col(c) - Eigen::VectorXd::Constant(u, dot));
    }

    const auto& heads = m.stages[fwd.stage];
    auto& ghead = grads.stages[fwd.stage];
    ghead.cls.w += d_o_cls.transpose() * fwd.trunk.f;
    ghead.cls.b += d_o_cls.colwise().sum().transpose();
    ghead.ins.w += d_o_ins.transpose() * fwd.trunk.f;
    ghead.ins.b += d_o_ins.colwise().sum().transpose();

    const Eigen::MatrixXd d_f = d_o_cls * heads.cls.w + d_o_ins * heads.ins.w;
    backward_trunk(m, fwd.trunk, d_f, grads);
}

NegForward forward_negatives(const MilModel& m, int stage, const Eigen::MatrixXd& features) {
    if (!features.allFinite())
        throw std::invalid_argument("forward_negatives: non-finite features");
    NegForward fwd;
    fwd.stage = stage;
    fwd.trunk = forward_trunk(m, features);
    const auto& heads = m.stages.at(stage);
    const Eigen::MatrixXd o =
        (fwd.trunk.f * heads.cls.w.transpose()).rowwise() + heads.cls.b.transpose();
    fwd.s = (1.0 / (1.0 + (-o.array()).exp())).matrix();
    return fwd;
}

void backward_negatives(const MilModel& m, const NegForward& fwd, const Eigen::MatrixXd& d_s,
                        MilModel& grads) {
    const Eigen::MatrixXd d_o =
        d_s.cwiseProduct(fwd.s.cwiseProduct((1.0 - fwd.s.array()).matrix()));
    const auto& heads = m.stages.at(fwd.stage);
    auto& ghead = grads.stages.at(fwd.stage);
    ghead.cls.w += d_o.transpose() * fwd.trunk.f;
    ghead.cls.b += d_o.colwise().sum().transpose();
    backward_trunk(m, fwd.trunk, d_o * heads.cls.w, grads);
}

RegForward forward_reg(const MilModel& m, const Eigen::MatrixXd& features) {
    if (!m.reg) throw std::logic_error("forward_reg: model has no regression head");
    RegForward fwd;
    fwd.trunk = forward_trunk(m, features);
    fwd.pred = (fwd.trunk.f * m.reg->w.transpose()).rowwise() + m.reg->b.transpose();
    return fwd;
}

void backward_reg(const MilModel& m, const RegForward& fwd, const Eigen::MatrixXd& d_pred,
                  MilModel& grads) {
    grads.reg->w += d_pred.transpose() * fwd.trunk.f;
    grads.reg->b += d_pred.colwise().sum().transpose();
    backward_trunk(m, fwd.trunk, d_pred * m.reg->w, grads);
}

// ---------------------------------------------------------------------------
// Losses

LossGrad cbp_loss(const Eigen::VectorXd& s_hat, const Eigen::VectorXd& label, double alpha1) {
    LossGrad out;
    out.d_s_hat = Eigen::VectorXd::Zero(s_hat.size());
    for (Eigen::Index i = 0; i < s_hat.size(); ++i) {
        const double p = clamp_prob(s_hat[i]);
        const double c = label[i];
        out.value += -alpha1 * (c * std::log(p) + (1.0 - c) * std::log(1.0 - p));
        if (s_hat[i] > kProbEps && s_hat[i] < 1.0 - kProbEps)
            out.d_s_hat[i] = alpha1 * (p - c) / (p * (1.0 - p));
    }
    return out;
}

namespace {

// focal term and derivative at one probability
std::pair<double, double> focal_term(double s, double c, double gamma) {
    const double p = clamp_prob(s);
    const bool active = s > kProbEps && s < 1.0 - kProbEps;
    double value, grad;
    if (c > 0.5) {
        value = -std::pow(1.0 - p, gamma) * std::log(p);
        grad = gamma * std::pow(1.0 - p, gamma - 1.0) * std::log(p) - std::pow(1.0 - p, gamma) / p;
    } else {
        value = -std::pow(p, gamma) * std::log(1.0 - p);
        grad = -gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p) + std::pow(p, gamma) / (1.0 - p);
    }
    return {value, active ? grad : 0.0};
}

}  // namespace

LossGrad mil2_loss(const Eigen::VectorXd& s_hat, const Eigen::VectorXd& label,
                   double prev_score_on_gt, double gamma) {
    LossGrad out;
    out.d_s_hat = Eigen::VectorXd::Zero(s_hat.size());
    for (Eigen::Index i = 0; i < s_hat.size(); ++i) {
        const auto [v, g] = focal_term(s_hat[i], label[i], gamma);
        out.value += prev_score_on_gt * v;
        out.d_s_hat[i] = prev_score_on_gt * g;
    }
    return out;
}

NegLossGrad neg_loss(const Eigen::MatrixXd& s_neg, double beta, double gamma) {
    NegLossGrad out;
    out.d_s = Eigen::MatrixXd::Zero(s_neg.rows(), s_neg.cols());
    if (s_neg.rows() == 0) {
        out.empty_set = true;
        return out;
    }
    const double inv_n = 1.0 / static_cast<double>(s_neg.rows());
    for (Eigen::Index r = 0; r < s_neg.rows(); ++r) {
        for (Eigen::Index c = 0; c < s_neg.cols(); ++c) {
            const double p = clamp_prob(s_neg(r, c));
            out.value += -inv_n * beta * std::pow(p, gamma) * std::log(1.0 - p);
            if (s_neg(r, c) > kProbEps && s_neg(r, c) < 1.0 - kProbEps)
                out.d_s(r, c) =
                    -inv_n * beta *
                    (gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p) -
                     std::pow(p, gamma) / (1.0 - p));
        }
    }
    return out;
}

MatLossGrad l1_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw std::invalid_argument("l1_loss: shape mismatch");
    MatLossGrad out;
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    out.d_pred = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
        for (Eigen::Index c = 0; c < pred.cols(); ++c) {
            const double d = pred(r, c) - target(r, c);
            out.value += inv_n * std::abs(d);
            out.d_pred(r, c) = inv_n * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
    }
    return out;
}

PosLossGrad pos_loss(const BagForward& fwd, const Eigen::VectorXd& label) {
    PosLossGrad out;
    const Eigen::Index u = fwd.trunk.x.rows();
    out.d_s_cls = Eigen::MatrixXd::Zero(u, fwd.s_cls.cols());
    int gt = 0;
    label.maxCoeff(&gt);
    const double inv_u = 1.0 / static_cast<double>(u);
    for (Eigen::Index i = 0; i < u; ++i) {  // canonical row i is original order[i]
        const double p = clamp_prob(fwd.s_cls(i, gt));
        out.value += -inv_u * std::log(p);
        if (fwd.s_cls(i, gt) > kProbEps && fwd.s_cls(i, gt) < 1.0 - kProbEps)
            out.d_s_cls(fwd.order[i], gt) = -inv_u / p;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

bool sgd_step(MilModel& m, const MilModel& grads, SgdState& state, double lr,
              double momentum, double weight_decay) {
    MilModel g_copy = grads;  // cheap relative to the step itself
    auto gs = param_spans(g_copy);
    for (auto [ptr, n] : gs)
        for (std::size_t i = 0; i < n; ++i)
            if (!std::isfinite(ptr[i])) return false;

    auto ps = param_spans(m);
    auto vs = param_spans(state.velocity);
    for (std::size_t s = 0; s < ps.size(); ++s) {
        double* p = ps[s].first;
        double* v = vs[s].first;
        const double* g = gs[s].first;
        for (std::size_t i = 0; i < ps[s].second; ++i) {
            v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
            p[i] -= lr * v[i];
        }
    }
    return true;
}

double lr_at_epoch(const SgdConfig& cfg, int epoch) {
    double lr = cfg.lr;
    for (int e : cfg.decay_epochs)
        if (epoch >= e) lr *= cfg.decay_factor;
    return lr;
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(MilModel& model, const std::function<double(const MilModel&)>& loss_value,
                  const std::function<MilModel(const MilModel&)>& loss_grad, double h) {
    const MilModel analytic = [&] {
        return loss_grad(model);
    }();
    MilModel analytic_copy = analytic;
    auto as = param_spans(analytic_copy);
    auto ps = param_spans(model);

    double worst = 0.0;
    for (std::size_t s = 0; s < ps.size(); ++s) {
        for (std::size_t i = 0; i < ps[s].second; ++i) {
            double& p = ps[s].first[i];
            const double saved = p;
            p = saved + h;
            const double up = loss_value(model);
            p = saved - h;
            const double down = loss_value(model);
            p = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = as[s].first[i];
            const double scale = std::max({std::abs(a), std::abs(numeric), 1e-4});
            worst = std::max(worst, std::abs(a - numeric) / scale);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)  // row-major on disk
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
}

Eigen::MatrixXd read_matrix(std::ifstream& in) {
    const std::uint32_t rows = read_u32(in), cols = read_u32(in);
    Eigen::MatrixXd m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c) {
            double v;
            in.read(reinterpret_cast<char*>(&v), sizeof(v));
            m(r, c) = v;
        }
    if (!in) throw std::runtime_error("checkpoint: truncated matrix");
    return m;
}

void write_affine(std::ofstream& out, const AffineLayer& l) {
    write_matrix(out, l.w);
    write_matrix(out, l.b);
}

AffineLayer read_affine(std::ifstream& in) {
    AffineLayer l;
    l.w = read_matrix(in);
    l.b = read_matrix(in).col(0);
    return l;
}

}  // namespace

void save_checkpoint(const MilModel& m, const std::string& rng_state,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(m.stages.size()));
    write_u32(out, m.reg ? 1 : 0);
    const std::uint64_t seed = m.init_seed;
    out.write(reinterpret_cast<const char*>(&seed), sizeof(seed));
    write_affine(out, m.fc1);
    write_affine(out, m.fc2);
    for (const auto& s : m.stages) {
        write_affine(out, s.cls);
        write_affine(out, s.ins);
    }
    if (m.reg) write_affine(out, *m.reg);
    write_u32(out, static_cast<std::uint32_t>(rng_state.size()));
    out.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t n_stages = read_u32(in);
    const bool has_reg = read_u32(in) != 0;
    Checkpoint ck;
    in.read(reinterpret_cast<char*>(&ck.model.init_seed), sizeof(ck.model.init_seed));
    ck.model.fc1 = read_affine(in);
    ck.model.fc2 = read_affine(in);
    for (std::uint32_t s = 0; s < n_stages; ++s) {
        StageHeads heads;
        heads.cls = read_affine(in);
        heads.ins = read_affine(in);
        ck.model.stages.push_back(std::move(heads));
    }
    if (has_reg) ck.model.reg = read_affine(in);
    const std::uint32_t rng_len = read_u32(in);
    ck.rng_state.resize(rng_len);
    in.read(ck.rng_state.data(), rng_len);
    if (!in) throw std::runtime_error("checkpoint: truncated file " + path.string());
    return ck;
}

}  // namespace pointlab
