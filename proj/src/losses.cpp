#include "maunet/losses.hpp"

#include "maunet/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace maunet {

namespace {

constexpr double kProbClamp = 1e-7;

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b)) throw ShapeError(std::string(what) + ": shape " + to_string(a) + " vs " + to_string(b));
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

}  // namespace

Var bce_with_logits(const Var& logits, const Tensor& mask) {
    require_same_shape(logits.shape(), mask.shape(), "bce_with_logits");
    const Eigen::ArrayXd& x = logits.value().data();
    const Eigen::ArrayXd& m = mask.data();
    const auto count = static_cast<double>(x.size());
    const double loss = (x.unaryExpr([](double v) { return softplus_value(v); }) - m * x).sum() / count;
    Graph* g = logits.graph();
    const int xid = logits.id();
    const int mid = g->constant(mask).id();
    return g->record(OpTag::bce_with_logits, {xid, mid}, Tensor::scalar(loss), [xid, mid, count](Graph& gr, int self) {
        if (auto* gx = gr.grad_sink(xid)) {
            const Eigen::ArrayXd p = gr.value(xid).data().unaryExpr([](double v) { return sigmoid_value(v); });
            *gx += gr.grad(self)[0] / count * (p - gr.value(mid).data());
        }
    });
}

Var soft_dice_loss(const Var& logits, const Tensor& mask, double smooth) {
    require_same_shape(logits.shape(), mask.shape(), "soft_dice_loss");
    const Shape s = logits.shape();
    const auto per_image = static_cast<Eigen::Index>(s.size() / static_cast<std::size_t>(s.n));
    const Eigen::ArrayXd p = logits.value().data().unaryExpr([](double v) { return sigmoid_value(v); });
    const Eigen::ArrayXd& m = mask.data();

    double loss = 0.0;
    for (int n = 0; n < s.n; ++n) {
        const auto ps = p.segment(n * per_image, per_image);
        const auto ms = m.segment(n * per_image, per_image);
        loss += 1.0 - (2.0 * (ps * ms).sum() + smooth) / (ps.sum() + ms.sum() + smooth);
    }
    loss /= s.n;

    Graph* g = logits.graph();
    const int xid = logits.id();
    const int mid = g->constant(mask).id();
    return g->record(OpTag::soft_dice_loss, {xid, mid}, Tensor::scalar(loss),
                     [xid, mid, smooth, per_image, n_img = s.n](Graph& gr, int self) {
        auto* gx = gr.grad_sink(xid);
        if (!gx) return;
        const Eigen::ArrayXd pr = gr.value(xid).data().unaryExpr([](double v) { return sigmoid_value(v); });
        const Eigen::ArrayXd& mk = gr.value(mid).data();
        const double scale = gr.grad(self)[0] / n_img;
        for (int n = 0; n < n_img; ++n) {
            const auto ps = pr.segment(n * per_image, per_image);
            const auto ms = mk.segment(n * per_image, per_image);
            const double num = 2.0 * (ps * ms).sum() + smooth;
            const double den = ps.sum() + ms.sum() + smooth;
            // d(1 - num/den)/dp = -(2m*den - num) / den^2
            gx->segment(n * per_image, per_image) += scale * (-(2.0 * ms * den - num) / (den * den)) * ps * (1.0 - ps);
        }
    });
}

Var seg_loss(const Var& logits, const Tensor& mask) {
    return add(scale(bce_with_logits(logits, mask), 0.5), scale(soft_dice_loss(logits, mask), 0.5));
}

Var bernoulli_kl(const Tensor& teacher_logits, const Var& student_logits, double temperature) {
    require_same_shape(teacher_logits.shape(), student_logits.shape(), "bernoulli_kl");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw DomainError("KL temperature must be positive");
    const double t = temperature;
    const Eigen::ArrayXd pt = teacher_logits.data().unaryExpr([t](double v) { return clamp_prob(sigmoid_value(v / t)); });
    const Eigen::ArrayXd ps_raw = student_logits.value().data().unaryExpr([t](double v) { return sigmoid_value(v / t); });
    const Eigen::ArrayXd ps = ps_raw.unaryExpr([](double v) { return clamp_prob(v); });
    const auto count = static_cast<double>(pt.size());
    const Eigen::ArrayXd kl = pt * (pt / ps).log() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).log();
    const double loss = kl.sum() / count * t * t;

    Graph* g = student_logits.graph();
    const int sid = student_logits.id();
    const int tid = g->constant(teacher_logits).id();
    return g->record(OpTag::bernoulli_kl, {sid, tid}, Tensor::scalar(loss), [sid, tid, t, count](Graph& gr, int self) {
        auto* gs = gr.grad_sink(sid);
        if (!gs) return;
        const Eigen::ArrayXd& sl = gr.value(sid).data();
        const Eigen::ArrayXd& tl = gr.value(tid).data();
        const double scale = gr.grad(self)[0] * t * t / count;
        for (Eigen::Index i = 0; i < sl.size(); ++i) {
            const double raw = sigmoid_value(sl[i] / t);
            if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;  // clamped: flat
            const double q = clamp_prob(sigmoid_value(tl[i] / t));
            // dKL/dp_s * dp_s/dz = (p_s - p_t) / (p_s (1 - p_s)) * p_s (1 - p_s) / t
            (*gs)[i] += scale * (raw - q) / t;
        }
    });
}

Var squared_error_mean(const Var& a, const Tensor& target) {
    require_same_shape(a.shape(), target.shape(), "squared_error_mean");
    const auto count = static_cast<double>(target.size());
    const double loss = (a.value().data() - target.data()).square().sum() / count;
    Graph* g = a.graph();
    const int aid = a.id();
    const int tid = g->constant(target).id();
    return g->record(OpTag::squared_error_mean, {aid, tid}, Tensor::scalar(loss), [aid, tid, count](Graph& gr, int self) {
        if (auto* ga = gr.grad_sink(aid)) {
            *ga += gr.grad(self)[0] * 2.0 / count * (gr.value(aid).data() - gr.value(tid).data());
        }
    });
}

Var mimic_loss(std::span<const Var> student_taps, std::span<const Tensor> teacher_taps, std::span<const double> lambda) {
    if (student_taps.empty() || student_taps.size() != teacher_taps.size() || lambda.size() != student_taps.size()) {
        throw ShapeError("mimic_loss needs matching numbers of student taps, teacher taps and weights");
    }
    Var total;
    for (std::size_t l = 0; l < student_taps.size(); ++l) {
        if (!(lambda[l] >= 0.0) || !std::isfinite(lambda[l])) throw DomainError("mimic weights must be finite and >= 0");
        Var term = scale(squared_error_mean(student_taps[l], teacher_taps[l]), lambda[l]);
        total = total.valid() ? add(total, term) : term;
    }
    return total;
}

Var mean_square(std::span<const Var> params) {
    if (params.empty()) throw ShapeError("mean_square needs at least one tensor");
    Graph* g = params.front().graph();
    std::vector<int> ids;
    double acc = 0.0;
    double count = 0.0;
    for (const Var& p : params) {
        if (p.graph() != g) throw GraphError("mean_square inputs must share a graph");
        ids.push_back(p.id());
        acc += p.value().data().square().sum();
        count += static_cast<double>(p.value().size());
    }
    return g->record(OpTag::mean_square, ids, Tensor::scalar(acc / count), [ids, count](Graph& gr, int self) {
        const double scale = gr.grad(self)[0] * 2.0 / count;
        for (int id : ids) {
            if (auto* gp = gr.grad_sink(id)) *gp += scale * gr.value(id).data();
        }
    });
}

PreferenceMasks preference_partition(const Tensor& teacher_probs, double tau_h, double tau_l) {
    if (!(tau_l < tau_h)) throw DomainError("preference thresholds need tau_l < tau_h");
    const Eigen::ArrayXd& p = teacher_probs.data();
    if ((p < 0.0).any() || (p > 1.0).any() || !p.isFinite().all()) throw DomainError("teacher probabilities must lie in [0, 1]");
    const Shape s = teacher_probs.shape();
    PreferenceMasks m{Tensor(s), Tensor(s), Tensor(s)};
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] >= tau_h) {
            m.positive.data()[i] = 1.0;
        } else if (p[i] <= tau_l) {
            m.negative.data()[i] = 1.0;
        } else {
            m.ignored.data()[i] = 1.0;
        }
    }
    return m;
}

void subsample_masks(PreferenceMasks& masks, std::size_t per_class, std::mt19937_64& rng) {
    for (Tensor* t : {&masks.positive, &masks.negative}) {
        std::vector<Eigen::Index> on;
        for (Eigen::Index i = 0; i < t->data().size(); ++i)
            if (t->data()[i] != 0.0) on.push_back(i);
        if (on.size() <= per_class) continue;
        std::shuffle(on.begin(), on.end(), rng);
        for (std::size_t k = per_class; k < on.size(); ++k) {
            t->data()[on[k]] = 0.0;
            masks.ignored.data()[on[k]] = 1.0;
        }
    }
}

ContrastiveResult contrastive_loss(const Var& embeddings, const Tensor& positive, const Tensor& negative,
                                   double temperature) {
    const Shape es = embeddings.shape();
    const Shape ms{es.n, 1, es.h, es.w};
    require_same_shape(positive.shape(), ms, "contrastive_loss positive mask");
    require_same_shape(negative.shape(), ms, "contrastive_loss negative mask");
    if (!(temperature > 0.0)) throw DomainError("contrastive temperature must be positive");

    // Pixel offsets (n*C*HW + hw) of the selected pixels: positives first.
    std::vector<Eigen::Index> base;
    const auto hw = static_cast<Eigen::Index>(es.plane());
    for (const Tensor* mask : {&positive, &negative})
        for (int n = 0; n < es.n; ++n)
            for (Eigen::Index i = 0; i < hw; ++i)
                if (mask->data()[n * hw + i] != 0.0) base.push_back(n * es.c * hw + i);
    const auto n_pos = static_cast<Eigen::Index>(positive.data().sum());
    const auto n_all = static_cast<Eigen::Index>(base.size());
    Graph* g = embeddings.graph();
    if (n_pos < 2 || n_all == n_pos) return {g->constant(Tensor::scalar(0.0)), true};

    const Var z = l2_normalize_channels(embeddings);
    Eigen::MatrixXd feats(n_all, es.c);
    for (Eigen::Index r = 0; r < n_all; ++r)
        for (int c = 0; c < es.c; ++c) feats(r, c) = z.value().data()[base[static_cast<std::size_t>(r)] + c * hw];

    const double inv_t = 1.0 / temperature;
    const Eigen::MatrixXd sim = feats.topRows(n_pos) * feats.transpose() * inv_t;
    // dL/ds for every (anchor, column); self-similarity stays zero.
    Eigen::MatrixXd dsim = Eigen::MatrixXd::Zero(n_pos, n_all);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n_pos; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n_all; ++j)
            if (j != i) mx = std::max(mx, sim(i, j));
        double a = 0.0;
        double b = 0.0;
        for (Eigen::Index j = 0; j < n_all; ++j) {
            if (j == i) continue;
            const double e = std::exp(sim(i, j) - mx);
            dsim(i, j) = e;
            (j < n_pos ? a : b) += e;
        }
        loss += std::log(a + b) - std::log(a);
        for (Eigen::Index j = 0; j < n_all; ++j) {
            if (j == i) continue;
            dsim(i, j) = dsim(i, j) / (a + b) - (j < n_pos ? dsim(i, j) / a : 0.0);
        }
    }
    loss /= static_cast<double>(n_pos);
    dsim /= static_cast<double>(n_pos);

    const int zid = z.id();
    Var out = g->record(OpTag::info_nce, {zid}, Tensor::scalar(loss),
                        [zid, base, feats, dsim, n_pos, inv_t, hw, c = es.c](Graph& gr, int self) {
        auto* gz = gr.grad_sink(zid);
        if (!gz) return;
        Eigen::MatrixXd dfeat = dsim.transpose() * feats.topRows(n_pos) * inv_t;
        dfeat.topRows(n_pos) += dsim * feats * inv_t;
        dfeat *= gr.grad(self)[0];
        for (Eigen::Index r = 0; r < dfeat.rows(); ++r)
            for (int ch = 0; ch < c; ++ch) (*gz)[base[static_cast<std::size_t>(r)] + ch * hw] += dfeat(r, ch);
    });
    return {out, false};
}

double stage1_loss(double l_seg, double l_mimic, double l_kl, double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw DomainError("omega must lie in [0, 1]");
    return l_seg + (1.0 - omega) * l_mimic + omega * l_kl;
}

Var stage1_loss(const Var& l_seg, const Var& l_mimic, const Var& l_kl, double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw DomainError("omega must lie in [0, 1]");
    return add(add(l_seg, scale(l_mimic, 1.0 - omega)), scale(l_kl, omega));
}

double stage2_loss(double l_seg, double l_cont, double l_reg, double rho) {
    if (!(rho >= 0.0)) throw DomainError("rho must be >= 0");
    return l_seg + l_cont + rho * l_reg;
}

Var stage2_loss(const Var& l_seg, const Var& l_cont, const Var& l_reg, double rho) {
    if (!(rho >= 0.0)) throw DomainError("rho must be >= 0");
    return add(add(l_seg, l_cont), scale(l_reg, rho));
}

}  // namespace maunet
