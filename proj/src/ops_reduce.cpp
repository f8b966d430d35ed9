#include "maunet/errors.hpp"
#include "maunet/ops.hpp"

#include <Eigen/Dense>

namespace maunet {

Var sum(const Var& x) {
    const int xid = x.id();
    return x.graph()->record(OpTag::sum, {xid}, Tensor::scalar(x.value().data().sum()), [xid](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) *gx += g.grad(self)[0];
    });
}

Var mean(const Var& x) {
    const int xid = x.id();
    const auto count = static_cast<double>(x.value().size());
    return x.graph()->record(OpTag::mean, {xid}, Tensor::scalar(x.value().data().sum() / count),
                             [xid, count](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) *gx += g.grad(self)[0] / count;
    });
}

Var global_avg_pool(const Var& x) {
    const Shape s = x.shape();
    const int xid = x.id();
    const auto hw = static_cast<Eigen::Index>(s.plane());
    Tensor out({s.n, s.c, 1, 1});
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.n) * s.c; ++i) {
        out.data()[i] = x.value().data().segment(i * hw, hw).sum() / static_cast<double>(hw);
    }
    return x.graph()->record(OpTag::global_avg_pool, {xid}, std::move(out), [xid, s, hw](Graph& g, int self) {
        auto* gx = g.grad_sink(xid);
        if (!gx) return;
        const Eigen::ArrayXd& go = g.grad(self);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.n) * s.c; ++i) {
            gx->segment(i * hw, hw) += go[i] / static_cast<double>(hw);
        }
    });
}

Var fully_connected(const Var& x, const Var& w, const std::optional<Var>& bias) {
    if (x.graph() != w.graph()) throw GraphError("operands belong to different graphs");
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    if (xs.h != 1 || xs.w != 1) throw ShapeError("fully_connected expects a spatially 1x1 input, got " + to_string(xs));
    if (ws.h != 1 || ws.w != 1 || ws.c != xs.c) {
        throw ShapeError("fully_connected weight " + to_string(ws) + " does not match input " + to_string(xs));
    }
    const int in = xs.c;
    const int outc = ws.n;
    if (bias && bias->shape() != Shape{1, outc, 1, 1}) throw ShapeError("fully_connected bias shape mismatch");

    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Tensor out({xs.n, outc, 1, 1});
    {
        Eigen::Map<const RowMat> wm(w.value().data().data(), outc, in);
        Eigen::Map<const Eigen::MatrixXd> xm(x.value().data().data(), in, xs.n);
        Eigen::Map<Eigen::MatrixXd> om(out.data().data(), outc, xs.n);
        om.noalias() = wm * xm;
        if (bias) om.colwise() += bias->value().data().matrix();
    }

    std::vector<int> inputs{x.id(), w.id()};
    if (bias) inputs.push_back(bias->id());
    const int xid = x.id();
    const int wid = w.id();
    const int bid = bias ? bias->id() : -1;
    const int n = xs.n;
    return x.graph()->record(OpTag::fully_connected, std::move(inputs), std::move(out), [=](Graph& g, int self) {
        Eigen::Map<const Eigen::MatrixXd> gm(g.grad(self).data(), outc, n);
        if (auto* gx = g.grad_sink(xid)) {
            Eigen::Map<const RowMat> wm(g.value(wid).data().data(), outc, in);
            Eigen::Map<Eigen::MatrixXd>(gx->data(), in, n).noalias() += wm.transpose() * gm;
        }
        if (auto* gw = g.grad_sink(wid)) {
            Eigen::Map<const Eigen::MatrixXd> xm(g.value(xid).data().data(), in, n);
            Eigen::Map<RowMat>(gw->data(), outc, in).noalias() += gm * xm.transpose();
        }
        if (bid >= 0) {
            if (auto* gb = g.grad_sink(bid)) gb->matrix() += gm.rowwise().sum();
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    const Shape s = x.shape();
    const Shape os{s.n, s.c, s.h * 2, s.w * 2};
    const int xid = x.id();
    Tensor out(os);
    const Tensor& xv = x.value();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < os.h; ++y) {
                for (int xx = 0; xx < os.w; ++xx) out.at(n, c, y, xx) = xv.at(n, c, y / 2, xx / 2);
            }
        }
    }
    return x.graph()->record(OpTag::upsample_nearest2x, {xid}, std::move(out), [xid, s, os](Graph& g, int self) {
        auto* gx = g.grad_sink(xid);
        if (!gx) return;
        const Eigen::ArrayXd& go = g.grad(self);
        std::ptrdiff_t o = 0;
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(n) * s.c + c) * s.h * s.w;
                for (int y = 0; y < os.h; ++y) {
                    for (int xx = 0; xx < os.w; ++xx, ++o) (*gx)[base + (y / 2) * s.w + xx / 2] += go[o];
                }
            }
        }
    });
}

}  // namespace maunet
