#include "pointlab/pixel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "parallel.hpp"

namespace pointlab {

double pe_adjust_factor(const Box& box) {
    const double m = std::max(box.w, box.h);
    for (double f : {64.0, 128.0, 256.0, 512.0})
        if (f >= m) return f;
    return 512.0;
}

Eigen::MatrixXd position_embedding(const Box& box, int gw, int gh, int stride) {
    const double f = pe_adjust_factor(box);
    Eigen::MatrixXd pe(gw * gh, 2);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int idx = gy * gw + gx;
            pe(idx, 0) = ((gx + 0.5) * stride - box.cx) / f;
            pe(idx, 1) = ((gy + 0.5) * stride - box.cy) / f;
        }
    }
    return pe;
}

FPar FPar::init(int d_feat, int c_in, std::uint64_t seed) {
    const int g = DynamicHead::param_count(c_in);
    std::mt19937_64 rng(seed);
    const double bound = std::sqrt(6.0 / (d_feat + g));
    std::uniform_real_distribution<double> u(-bound, bound);
    FPar f;
    f.w = Eigen::MatrixXd::NullaryExpr(g, d_feat, [&]() { return u(rng); });
    f.b = Eigen::VectorXd::Zero(g);
    return f;
}

DynamicHead predict_theta(const Eigen::VectorXd& object_feat, const FPar& f_par) {
    DynamicHead head;
    head.theta = f_par.w * object_feat + f_par.b;
    head.c_in = static_cast<int>((f_par.w.rows() - 89) / 8);  // invert param_count
    return head;
}

namespace {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                    Eigen::RowMajor>>;

struct HeadView {
    RowMajorMap w1, w2, w3;
    Eigen::Map<const Eigen::VectorXd> b1, b2, b3;
};

HeadView view_head(const DynamicHead& head) {
    const int c = head.c_in;
    const double* t = head.theta.data();
    return HeadView{RowMajorMap(t, 8, c),
                    RowMajorMap(t + 8 * c + 8, 8, 8),
                    RowMajorMap(t + 8 * c + 8 + 64 + 8, 1, 8),
                    Eigen::Map<const Eigen::VectorXd>(t + 8 * c, 8),
                    Eigen::Map<const Eigen::VectorXd>(t + 8 * c + 8 + 64, 8),
                    Eigen::Map<const Eigen::VectorXd>(t + 8 * c + 8 + 64 + 8 + 8, 1)};
}

}  // namespace

ScoreMapForward dynamic_forward(const PixelGrid& grid, const Eigen::MatrixXd& pe,
                                const DynamicHead& head) {
    const int cells = grid.cells();
    if (pe.rows() != cells) throw std::invalid_argument("dynamic_forward: pe shape mismatch");
    if (head.c_in != grid.channels.cols() + 2)
        throw std::invalid_argument("dynamic_forward: head channel mismatch");
    if (DynamicHead::param_count(head.c_in) != head.theta.size())
        throw std::invalid_argument("dynamic_forward: theta length mismatch");

    ScoreMapForward fwd;
    fwd.input.resize(cells, head.c_in);
    fwd.input << grid.channels, pe;
    const auto v = view_head(head);
    fwd.z1 = (fwd.input * v.w1.transpose()).rowwise() + v.b1.transpose();
    fwd.a1 = fwd.z1.cwiseMax(0.0);
    fwd.z2 = (fwd.a1 * v.w2.transpose()).rowwise() + v.b2.transpose();
    fwd.a2 = fwd.z2.cwiseMax(0.0);
    fwd.z3 = (fwd.a2 * v.w3.transpose()).col(0).array() + v.b3[0];
    fwd.s = (1.0 / (1.0 + (-fwd.z3.array()).exp())).matrix();
    return fwd;
}

Eigen::VectorXd dynamic_backward(const ScoreMapForward& fwd, const DynamicHead& head,
                                 const Eigen::VectorXd& d_s) {
    const int c = head.c_in;
    const auto v = view_head(head);

    const Eigen::VectorXd d_z3 =
        d_s.cwiseProduct(fwd.s.cwiseProduct((1.0 - fwd.s.array()).matrix()));
    const Eigen::MatrixXd d_a2 = d_z3 * v.w3;  // cells x 8
    const Eigen::MatrixXd d_z2 =
        d_a2.cwiseProduct((fwd.z2.array() > 0.0).cast<double>().matrix());
    const Eigen::MatrixXd d_a1 = d_z2 * v.w2;
    const Eigen::MatrixXd d_z1 =
        d_a1.cwiseProduct((fwd.z1.array() > 0.0).cast<double>().matrix());

    Eigen::VectorXd d_theta = Eigen::VectorXd::Zero(head.theta.size());
    using RowMajorMutable =
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    double* t = d_theta.data();
    RowMajorMutable(t, 8, c) = d_z1.transpose() * fwd.input;
    Eigen::Map<Eigen::VectorXd>(t + 8 * c, 8) = d_z1.colwise().sum().transpose();
    RowMajorMutable(t + 8 * c + 8, 8, 8) = d_z2.transpose() * fwd.a1;
    Eigen::Map<Eigen::VectorXd>(t + 8 * c + 8 + 64, 8) = d_z2.colwise().sum().transpose();
    RowMajorMutable(t + 8 * c + 8 + 64 + 8, 1, 8) = d_z3.transpose() * fwd.a2;
    t[8 * c + 8 + 64 + 8 + 8] = d_z3.sum();
    return d_theta;
}

// ---------------------------------------------------------------------------
// Affinity

AffinityField affinity(const LabImage& lab, int stride, double sigma_c) {
    const int gw = (lab.width + stride - 1) / stride;
    const int gh = (lab.height + stride - 1) / stride;
    AffinityField field;
    field.gw = gw;
    field.gh = gh;
    for (auto& plane : field.iota) plane = Eigen::VectorXd::Zero(gw * gh);

    Eigen::MatrixXd means(gw * gh, 3);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int x0 = gx * stride, y0 = gy * stride;
            const int x1 = std::min(lab.width, x0 + stride);
            const int y1 = std::min(lab.height, y0 + stride);
            double s[3] = {0, 0, 0};
            int n = 0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    for (int ch = 0; ch < 3; ++ch) s[ch] += lab.plane(ch, x, y);
                    ++n;
                }
            for (int ch = 0; ch < 3; ++ch) means(gy * gw + gx, ch) = s[ch] / n;
        }
    }

    // direction order: NW N NE E SE S SW W; opposite(d) = (d+4) % 8
    const int dx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
    const int dy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int p = gy * gw + gx;
            for (int d : {3, 4, 5, 6}) {  // E SE S SW; mirrored to the rest
                const int qx = gx + dx[d], qy = gy + dy[d];
                if (qx < 0 || qy < 0 || qx >= gw || qy >= gh) continue;
                const int q = qy * gw + qx;
                const double dist = (means.row(p) - means.row(q)).norm();
                const double v = std::exp(-dist / sigma_c);
                field.iota[d][p] = v;
                field.iota[(d + 4) % 8][q] = v;
            }
        }
    }
    return field;
}

// ---------------------------------------------------------------------------
// Reliability maps

std::vector<std::uint8_t> box_mask_grid(const Box& box, int gw, int gh, int stride) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(gw) * gh, 0);
    for (int gy = 0; gy < gh; ++gy) {
        const double cy = (gy + 0.5) * stride;
        if (cy < box.y1() || cy > box.y2()) continue;
        for (int gx = 0; gx < gw; ++gx) {
            const double cx = (gx + 0.5) * stride;
            if (cx >= box.x1() && cx <= box.x2()) m[gy * gw + gx] = 1;
        }
    }
    return m;
}

ReliabilityMaps bsp_maps(const Box& box, double eta, int gw, int gh, int stride,
                         BspRegion region) {
    if (eta < 0.0) throw std::invalid_argument("bsp_maps: eta < 0");
    const std::size_t cells = static_cast<std::size_t>(gw) * gh;
    ReliabilityMaps maps;
    maps.a_proj.assign(cells, 1);
    maps.a_sim.assign(cells, 0);

    const auto box_cells = box_mask_grid(box, gw, gh, stride);
    if (region == BspRegion::none) {
        maps.a_sim = box_cells;
        return maps;
    }

    const double il = box.x1() + eta * box.w, ir = box.x2() - eta * box.w;
    const double ib = box.y1() + eta * box.h, iu = box.y2() - eta * box.h;
    std::vector<std::uint8_t> m1(cells, 0);
    if (ir > il && iu > ib) {
        m1 = box_mask_grid(Box::from_corners(il, ib, ir, iu), gw, gh, stride);
    } else {
        maps.inner_empty = true;
    }
    const Box grown = Box::from_corners(box.x1() - eta * box.w, box.y1() - eta * box.h,
                                        box.x2() + eta * box.w, box.y2() + eta * box.h);
    const auto m2 = box_mask_grid(grown, gw, gh, stride);

    for (std::size_t i = 0; i < cells; ++i) {
        switch (region) {
            case BspRegion::both:
                maps.a_proj[i] = (m1[i] + m2[i]) != 1 ? 1 : 0;
                break;
            case BspRegion::inner:  // only the band inside the box is uncertain
                maps.a_proj[i] = (box_cells[i] && !m1[i]) ? 0 : 1;
                break;
            case BspRegion::outer:  // only the band outside the box is uncertain
                maps.a_proj[i] = (m2[i] && !box_cells[i]) ? 0 : 1;
                break;
            case BspRegion::none:
                break;
        }
    }
    maps.a_sim = (region == BspRegion::inner) ? box_cells : m2;
    return maps;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

constexpr double kDiceEps = 1e-6;

// dice on 1-d projections; adds the gradient into d_proj
double dice_1d(const Eigen::VectorXd& proj, const Eigen::VectorXd& target,
               Eigen::VectorXd& d_proj) {
    const double num = proj.dot(target);
    const double den = proj.squaredNorm() + target.squaredNorm() + kDiceEps;
    for (Eigen::Index i = 0; i < proj.size(); ++i)
        d_proj[i] += -2.0 * (target[i] * den - num * 2.0 * proj[i]) / (den * den);
    return 1.0 - 2.0 * num / den;
}

}  // namespace

MapLossGrad projection_loss(const Eigen::VectorXd& s, const std::vector<std::uint8_t>& box_mask,
                            const std::vector<std::uint8_t>* a_proj, int gw, int gh) {
    const int cells = gw * gh;
    if (s.size() != cells || static_cast<int>(box_mask.size()) != cells)
        throw std::invalid_argument("projection_loss: shape mismatch");
    if (a_proj && static_cast<int>(a_proj->size()) != cells)
        throw std::invalid_argument("projection_loss: reliability map shape mismatch");

    auto masked = [&](int idx, double v) { return a_proj && !(*a_proj)[idx] ? 0.0 : v; };

    // column projections (max over rows) and row projections (max over cols)
    Eigen::VectorXd col_proj = Eigen::VectorXd::Zero(gw), col_tgt = Eigen::VectorXd::Zero(gw);
    Eigen::VectorXd row_proj = Eigen::VectorXd::Zero(gh), row_tgt = Eigen::VectorXd::Zero(gh);
    std::vector<int> col_arg(gw, -1), row_arg(gh, -1);
    for (int gx = 0; gx < gw; ++gx) {
        for (int gy = 0; gy < gh; ++gy) {
            const int idx = gy * gw + gx;
            const double v = masked(idx, s[idx]);
            if (col_arg[gx] < 0 || v > col_proj[gx]) {
                col_proj[gx] = v;
                col_arg[gx] = idx;
            }
            col_tgt[gx] = std::max(col_tgt[gx], masked(idx, double(box_mask[idx])));
        }
    }
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int idx = gy * gw + gx;
            const double v = masked(idx, s[idx]);
            if (row_arg[gy] < 0 || v > row_proj[gy]) {
                row_proj[gy] = v;
                row_arg[gy] = idx;
            }
            row_tgt[gy] = std::max(row_tgt[gy], masked(idx, double(box_mask[idx])));
        }
    }

    MapLossGrad out;
    out.d_s = Eigen::VectorXd::Zero(cells);
    Eigen::VectorXd d_col = Eigen::VectorXd::Zero(gw), d_row = Eigen::VectorXd::Zero(gh);
    out.value = dice_1d(col_proj, col_tgt, d_col) + dice_1d(row_proj, row_tgt, d_row);
    for (int gx = 0; gx < gw; ++gx)
        if (col_arg[gx] >= 0 && (!a_proj || (*a_proj)[col_arg[gx]])) out.d_s[col_arg[gx]] += d_col[gx];
    for (int gy = 0; gy < gh; ++gy)
        if (row_arg[gy] >= 0 && (!a_proj || (*a_proj)[row_arg[gy]])) out.d_s[row_arg[gy]] += d_row[gy];
    return out;
}

MapLossGrad similarity_loss(const Eigen::VectorXd& s, const std::vector<std::uint8_t>& region,
                            const AffinityField& field, double chi2, int gw, int gh) {
    const int cells = gw * gh;
    if (s.size() != cells || static_cast<int>(region.size()) != cells)
        throw std::invalid_argument("similarity_loss: shape mismatch");

    // undirected pairs once: E, SE, S, SW from each cell
    const int dirs[4] = {3, 4, 5, 6};
    const int dx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
    const int dy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
    std::vector<std::pair<int, int>> pairs;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int p = gy * gw + gx;
            for (int d : dirs) {
                const int qx = gx + dx[d], qy = gy + dy[d];
                if (qx < 0 || qy < 0 || qx >= gw || qy >= gh) continue;
                const int q = qy * gw + qx;
                if (!region[p] && !region[q]) continue;
                if (field.iota[d][p] < chi2) continue;
                pairs.emplace_back(p, q);
            }
        }
    }

    MapLossGrad out;
    out.d_s = Eigen::VectorXd::Zero(cells);
    if (pairs.empty()) {
        out.flagged = true;
        return out;
    }
    const double inv_n = 1.0 / static_cast<double>(pairs.size());
    for (auto [p, q] : pairs) {
        const double sp = s[p], sq = s[q];
        const double prob = sp * sq + (1.0 - sp) * (1.0 - sq);
        const double clamped = std::max(prob, kProbEps);
        out.value += -inv_n * std::log(clamped);
        if (prob > kProbEps) {
            out.d_s[p] += -inv_n * (2.0 * sq - 1.0) / clamped;
            out.d_s[q] += -inv_n * (2.0 * sp - 1.0) / clamped;
        }
    }
    return out;
}

MaskBoxResult mask_to_box(const Eigen::VectorXd& s, double chi1, const Box& fallback, int gw,
                          int gh, int stride) {
    int x0 = gw, y0 = gh, x1 = -1, y1 = -1;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            if (s[gy * gw + gx] > chi1) {
                x0 = std::min(x0, gx);
                y0 = std::min(y0, gy);
                x1 = std::max(x1, gx);
                y1 = std::max(y1, gy);
            }
    if (x1 < 0) return MaskBoxResult{fallback, true};
    return MaskBoxResult{Box::from_corners(x0 * stride, y0 * stride, (x1 + 1) * stride,
                                           (y1 + 1) * stride),
                         false};
}

Mask threshold_to_mask(const Eigen::VectorXd& s, double chi1, int gw, int gh) {
    Mask m(gw, gh);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            if (s[gy * gw + gx] > chi1) m.set(gx, gy);
    return m;
}

Mask upsample_nearest(const Mask& grid_mask, int stride, int width, int height) {
    Mask m(width, height);
    for (int y = 0; y < height; ++y) {
        const int gy = std::min(y / stride, grid_mask.height - 1);
        for (int x = 0; x < width; ++x) {
            const int gx = std::min(x / stride, grid_mask.width - 1);
            if (grid_mask.at(gx, gy)) m.set(x, y);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Training

PixelTrainResult train_pixel_head(const std::vector<PixelSceneInputs>& scenes,
                                  const std::vector<PixelObjectTask>& tasks,
                                  const PixelConfig& pix, const LossConfig& loss_cfg,
                                  const SgdConfig& sgd, std::uint64_t seed, int threads) {
    if (tasks.empty()) throw std::invalid_argument("train_pixel_head: no tasks");
    const int c_in = kPixelChannels + 2;
    const int d_feat = static_cast<int>(tasks[0].object_feat.size());

    PixelTrainResult result;
    result.f_par = FPar::init(d_feat, c_in, seed);

    // frozen per-object supervision targets
    struct Prepared {
        Eigen::MatrixXd pe;
        std::vector<std::uint8_t> box_mask;
        ReliabilityMaps maps;
    };
    std::vector<Prepared> prep(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), threads, [&](int i) {
        const auto& t = tasks[i];
        const auto& sc = scenes[t.scene_index];
        prep[i].pe = position_embedding(t.pseudo_box, sc.grid.gw, sc.grid.gh, pix.stride);
        prep[i].box_mask = box_mask_grid(t.pseudo_box, sc.grid.gw, sc.grid.gh, pix.stride);
        prep[i].maps =
            bsp_maps(t.pseudo_box, pix.bsp == BspRegion::none ? 0.0 : pix.eta, sc.grid.gw,
                     sc.grid.gh, pix.stride, pix.bsp);
    });

    // group tasks by scene for batching
    std::vector<std::vector<int>> by_scene(scenes.size());
    for (std::size_t i = 0; i < tasks.size(); ++i)
        by_scene[tasks[i].scene_index].push_back(static_cast<int>(i));

    FPar velocity{Eigen::MatrixXd::Zero(result.f_par.w.rows(), result.f_par.w.cols()),
                  Eigen::VectorXd::Zero(result.f_par.b.size())};

    auto object_pass = [&](int task_idx, Eigen::MatrixXd* gw_out, Eigen::VectorXd* gb_out) {
        const auto& t = tasks[task_idx];
        const auto& sc = scenes[t.scene_index];
        const auto& pr = prep[task_idx];
        const DynamicHead head = predict_theta(t.object_feat, result.f_par);
        const auto fwd = dynamic_forward(sc.grid, pr.pe, head);

        const auto proj = projection_loss(fwd.s, pr.box_mask, &pr.maps.a_proj, sc.grid.gw,
                                          sc.grid.gh);
        const auto sim =
            similarity_loss(fwd.s, pr.maps.a_sim, sc.field, pix.chi2, sc.grid.gw, sc.grid.gh);
        const double w = t.bag_weight;
        const double loss = w * (loss_cfg.alpha4 * proj.value + loss_cfg.alpha5 * sim.value);
        if (gw_out) {
            const Eigen::VectorXd d_s =
                w * (loss_cfg.alpha4 * proj.d_s + loss_cfg.alpha5 * sim.d_s);
            const Eigen::VectorXd d_theta = dynamic_backward(fwd, head, d_s);
            *gw_out += d_theta * t.object_feat.transpose();
            *gb_out += d_theta;
        }
        return loss;
    };

    double first_loss = 0.0, last_loss = 0.0;
    for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
        const double lr = lr_at_epoch(sgd, epoch);
        double epoch_loss = 0.0;
        int epoch_objects = 0;
        for (std::size_t batch_start = 0; batch_start < scenes.size();
             batch_start += sgd.batch_scenes) {
            const int batch_n = static_cast<int>(
                std::min<std::size_t>(sgd.batch_scenes, scenes.size() - batch_start));
            std::vector<Eigen::MatrixXd> gws(batch_n);
            std::vector<Eigen::VectorXd> gbs(batch_n);
            std::vector<double> losses(batch_n, 0.0);
            std::vector<int> counts(batch_n, 0);
            parallel_for(batch_n, threads, [&](int bi) {
                gws[bi] = Eigen::MatrixXd::Zero(result.f_par.w.rows(), result.f_par.w.cols());
                gbs[bi] = Eigen::VectorXd::Zero(result.f_par.b.size());
                for (int ti : by_scene[batch_start + bi]) {
                    losses[bi] += object_pass(ti, &gws[bi], &gbs[bi]);
                    counts[bi] += 1;
                }
            });
            int total = 0;
            for (int bi = 0; bi < batch_n; ++bi) total += counts[bi];
            if (total == 0) continue;
            Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(result.f_par.w.rows(),
                                                       result.f_par.w.cols());
            Eigen::VectorXd gb = Eigen::VectorXd::Zero(result.f_par.b.size());
            for (int bi = 0; bi < batch_n; ++bi) {  // fixed scene order
                gw += gws[bi];
                gb += gbs[bi];
                epoch_loss += losses[bi];
                epoch_objects += counts[bi];
            }
            gw /= total;
            gb /= total;
            if (!gw.allFinite() || !gb.allFinite()) {
                result.diverged = true;
                break;
            }
            velocity.w = sgd.momentum * velocity.w + gw;
            velocity.b = sgd.momentum * velocity.b + gb;
            result.f_par.w -= lr * velocity.w;
            result.f_par.b -= lr * velocity.b;
        }
        if (result.diverged) break;
        const double mean_loss = epoch_objects ? epoch_loss / epoch_objects : 0.0;
        if (epoch == 0) first_loss = mean_loss;
        last_loss = mean_loss;
    }
    result.first_epoch_loss = first_loss;
    result.last_epoch_loss = last_loss;
    if (last_loss > first_loss) result.diverged = true;

    // final emission with the trained predictor
    result.outputs.resize(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), threads, [&](int i) {
        const auto& t = tasks[i];
        const auto& sc = scenes[t.scene_index];
        const DynamicHead head = predict_theta(t.object_feat, result.f_par);
        const auto fwd = dynamic_forward(sc.grid, prep[i].pe, head);
        PixelObjectOutput out;
        out.object_id = t.object_id;
        out.score_map = fwd.s;
        const auto mb = mask_to_box(fwd.s, pix.chi1, t.pseudo_box, sc.grid.gw, sc.grid.gh,
                                    pix.stride);
        out.refined_box = mb.box;
        out.box_fallback = mb.used_fallback;
        const Mask grid_mask = threshold_to_mask(fwd.s, pix.chi1, sc.grid.gw, sc.grid.gh);
        out.mask = upsample_nearest(grid_mask, pix.stride, sc.width, sc.height);
        result.outputs[i] = std::move(out);
    });
    return result;
}

}  // namespace pointlab
