#include "maunet/errors.hpp"
#include "maunet/ops.hpp"

#include <cmath>
#include <numbers>

namespace maunet {

namespace {

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

void check_same_graph(const Var& a, const Var& b) {
    if (a.graph() != b.graph() || !a.valid()) throw GraphError("operands belong to different graphs");
}

// Strides of `s` inside a broadcast output; 0 on axes that are broadcast.
struct Strides {
    std::ptrdiff_t n, c, h, w;
};

Strides broadcast_strides(const Shape& s, const Shape& out) {
    const std::ptrdiff_t w = 1;
    const std::ptrdiff_t h = s.w;
    const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(s.h) * s.w;
    const std::ptrdiff_t n = c * s.c;
    return {s.n == out.n ? n : 0, s.c == out.c ? c : 0, s.h == out.h ? h : 0, s.w == out.w ? w : 0};
}

int broadcast_extent(int a, int b, const Shape& sa, const Shape& sb) {
    if (a == b || b == 1) return a;
    if (a == 1) return b;
    throw ShapeError("shapes " + to_string(sa) + " and " + to_string(sb) + " are not broadcastable");
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    return {broadcast_extent(a.n, b.n, a, b), broadcast_extent(a.c, b.c, a, b), broadcast_extent(a.h, b.h, a, b),
            broadcast_extent(a.w, b.w, a, b)};
}

// Visits every output element with the matching flat offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
    std::ptrdiff_t o = 0;
    for (int n = 0; n < out.n; ++n) {
        for (int c = 0; c < out.c; ++c) {
            for (int y = 0; y < out.h; ++y) {
                const std::ptrdiff_t ia = n * sa.n + c * sa.c + y * sa.h;
                const std::ptrdiff_t ib = n * sb.n + c * sb.c + y * sb.h;
                for (int x = 0; x < out.w; ++x, ++o) f(o, ia + x * sa.w, ib + x * sb.w);
            }
        }
    }
}

enum class Binary { add, sub, mul };

Var binary(const Var& a, const Var& b, Binary kind) {
    check_same_graph(a, b);
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    const Shape os = broadcast_shape(sa, sb);
    const OpTag tag = kind == Binary::add ? OpTag::add : kind == Binary::sub ? OpTag::sub : OpTag::mul;
    const int aid = a.id();
    const int bid = b.id();

    Tensor out(os);
    const Eigen::ArrayXd& av = a.value().data();
    const Eigen::ArrayXd& bv = b.value().data();
    const bool same = sa == sb;
    if (same) {
        switch (kind) {
            case Binary::add: out.data() = av + bv; break;
            case Binary::sub: out.data() = av - bv; break;
            case Binary::mul: out.data() = av * bv; break;
        }
    } else {
        const Strides ta = broadcast_strides(sa, os);
        const Strides tb = broadcast_strides(sb, os);
        double* o = out.data().data();
        for_each_broadcast(os, ta, tb, [&](std::ptrdiff_t i, std::ptrdiff_t ia, std::ptrdiff_t ib) {
            switch (kind) {
                case Binary::add: o[i] = av[ia] + bv[ib]; break;
                case Binary::sub: o[i] = av[ia] - bv[ib]; break;
                case Binary::mul: o[i] = av[ia] * bv[ib]; break;
            }
        });
    }

    return a.graph()->record(tag, {aid, bid}, std::move(out), [=](Graph& g, int self) {
        const Eigen::ArrayXd& go = g.grad(self);
        Eigen::ArrayXd* ga = g.grad_sink(aid);
        Eigen::ArrayXd* gb = g.grad_sink(bid);
        const Eigen::ArrayXd& av = g.value(aid).data();
        const Eigen::ArrayXd& bv = g.value(bid).data();
        if (same) {
            switch (kind) {
                case Binary::add:
                    if (ga) *ga += go;
                    if (gb) *gb += go;
                    break;
                case Binary::sub:
                    if (ga) *ga += go;
                    if (gb) *gb -= go;
                    break;
                case Binary::mul:
                    if (ga) *ga += go * bv;
                    if (gb) *gb += go * av;
                    break;
            }
            return;
        }
        const Strides ta = broadcast_strides(sa, os);
        const Strides tb = broadcast_strides(sb, os);
        for_each_broadcast(os, ta, tb, [&](std::ptrdiff_t i, std::ptrdiff_t ia, std::ptrdiff_t ib) {
            switch (kind) {
                case Binary::add:
                    if (ga) (*ga)[ia] += go[i];
                    if (gb) (*gb)[ib] += go[i];
                    break;
                case Binary::sub:
                    if (ga) (*ga)[ia] += go[i];
                    if (gb) (*gb)[ib] -= go[i];
                    break;
                case Binary::mul:
                    if (ga) (*ga)[ia] += go[i] * bv[ib];
                    if (gb) (*gb)[ib] += go[i] * av[ia];
                    break;
            }
        });
    });
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x))); }

double gelu_derivative(double x) {
    const double t = std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
}

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Var gelu(const Var& x) {
    const int xid = x.id();
    Tensor out(x.shape(), x.value().data().unaryExpr([](double v) { return gelu_value(v); }));
    return x.graph()->record(OpTag::gelu, {xid}, std::move(out), [xid](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) {
            *gx += g.grad(self) * g.value(xid).data().unaryExpr([](double v) { return gelu_derivative(v); });
        }
    });
}

Var sigmoid(const Var& x) {
    const int xid = x.id();
    Tensor out(x.shape(), x.value().data().unaryExpr([](double v) { return sigmoid_value(v); }));
    return x.graph()->record(OpTag::sigmoid, {xid}, std::move(out), [xid](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) {
            const Eigen::ArrayXd& s = g.value(self).data();
            *gx += g.grad(self) * s * (1.0 - s);
        }
    });
}

Var add(const Var& a, const Var& b) { return binary(a, b, Binary::add); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Binary::sub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Binary::mul); }

Var scale(const Var& x, double s) {
    const int xid = x.id();
    Tensor out(x.shape(), x.value().data() * s);
    return x.graph()->record(OpTag::scale, {xid}, std::move(out), [xid, s](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) *gx += g.grad(self) * s;
    });
}

Var gradient_probe(const Var& x, double factor) {
    const int xid = x.id();
    return x.graph()->record(OpTag::gradient_probe, {xid}, x.value(), [xid, factor](Graph& g, int self) {
        if (auto* gx = g.grad_sink(xid)) *gx += g.grad(self) * factor;
    });
}

Var softmax_channels(const Var& x) {
    const Shape s = x.shape();
    const int xid = x.id();
    if (s.c == 1) {
        Tensor out(s, x.value().data().unaryExpr([](double v) { return sigmoid_value(v); }));
        return x.graph()->record(OpTag::softmax_channels, {xid}, std::move(out), [xid](Graph& g, int self) {
            if (auto* gx = g.grad_sink(xid)) {
                const Eigen::ArrayXd& p = g.value(self).data();
                *gx += g.grad(self) * p * (1.0 - p);
            }
        });
    }
    const auto hw = static_cast<std::ptrdiff_t>(s.plane());
    Tensor out(s);
    const double* in = x.value().data().data();
    double* o = out.data().data();
    for (int n = 0; n < s.n; ++n) {
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
        for (std::ptrdiff_t p = 0; p < hw; ++p) {
            double m = in[base + p];
            for (int c = 1; c < s.c; ++c) m = std::max(m, in[base + c * hw + p]);
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) z += std::exp(in[base + c * hw + p] - m);
            for (int c = 0; c < s.c; ++c) o[base + c * hw + p] = std::exp(in[base + c * hw + p] - m) / z;
        }
    }
    return x.graph()->record(OpTag::softmax_channels, {xid}, std::move(out), [xid, s, hw](Graph& g, int self) {
        auto* gx = g.grad_sink(xid);
        if (!gx) return;
        const double* y = g.value(self).data().data();
        const double* go = g.grad(self).data();
        for (int n = 0; n < s.n; ++n) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
            for (std::ptrdiff_t p = 0; p < hw; ++p) {
                double dot = 0.0;
                for (int c = 0; c < s.c; ++c) dot += go[base + c * hw + p] * y[base + c * hw + p];
                for (int c = 0; c < s.c; ++c) {
                    const std::ptrdiff_t i = base + c * hw + p;
                    (*gx)[i] += y[i] * (go[i] - dot);
                }
            }
        }
    });
}

Var log_softmax_channels(const Var& x) {
    const Shape s = x.shape();
    const int xid = x.id();
    if (s.c == 1) {
        Tensor out(s, x.value().data().unaryExpr([](double v) { return -softplus_value(-v); }));
        return x.graph()->record(OpTag::log_softmax_channels, {xid}, std::move(out), [xid](Graph& g, int self) {
            if (auto* gx = g.grad_sink(xid)) {
                *gx += g.grad(self) * g.value(xid).data().unaryExpr([](double v) { return 1.0 - sigmoid_value(v); });
            }
        });
    }
    const auto hw = static_cast<std::ptrdiff_t>(s.plane());
    Tensor out(s);
    const double* in = x.value().data().data();
    double* o = out.data().data();
    for (int n = 0; n < s.n; ++n) {
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
        for (std::ptrdiff_t p = 0; p < hw; ++p) {
            double m = in[base + p];
            for (int c = 1; c < s.c; ++c) m = std::max(m, in[base + c * hw + p]);
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) z += std::exp(in[base + c * hw + p] - m);
            const double lse = m + std::log(z);
            for (int c = 0; c < s.c; ++c) o[base + c * hw + p] = in[base + c * hw + p] - lse;
        }
    }
    return x.graph()->record(OpTag::log_softmax_channels, {xid}, std::move(out), [xid, s, hw](Graph& g, int self) {
        auto* gx = g.grad_sink(xid);
        if (!gx) return;
        const double* y = g.value(self).data().data();
        const double* go = g.grad(self).data();
        for (int n = 0; n < s.n; ++n) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
            for (std::ptrdiff_t p = 0; p < hw; ++p) {
                double total = 0.0;
                for (int c = 0; c < s.c; ++c) total += go[base + c * hw + p];
                for (int c = 0; c < s.c; ++c) {
                    const std::ptrdiff_t i = base + c * hw + p;
                    (*gx)[i] += go[i] - std::exp(y[i]) * total;
                }
            }
        }
    });
}

Var l2_normalize_channels(const Var& x, double eps) {
    const Shape s = x.shape();
    const int xid = x.id();
    const auto hw = static_cast<std::ptrdiff_t>(s.plane());
    Tensor out(s);
    const double* in = x.value().data().data();
    double* o = out.data().data();
    for (int n = 0; n < s.n; ++n) {
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
        for (std::ptrdiff_t p = 0; p < hw; ++p) {
            double ss = eps;
            for (int c = 0; c < s.c; ++c) ss += in[base + c * hw + p] * in[base + c * hw + p];
            const double inv = 1.0 / std::sqrt(ss);
            for (int c = 0; c < s.c; ++c) o[base + c * hw + p] = in[base + c * hw + p] * inv;
        }
    }
    return x.graph()->record(OpTag::l2_normalize_channels, {xid}, std::move(out), [=](Graph& g, int self) {
        auto* gx = g.grad_sink(xid);
        if (!gx) return;
        const double* in = g.value(xid).data().data();
        const double* go = g.grad(self).data();
        for (int n = 0; n < s.n; ++n) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(n) * s.c * hw;
            for (std::ptrdiff_t p = 0; p < hw; ++p) {
                double ss = eps;
                double dot = 0.0;
                for (int c = 0; c < s.c; ++c) {
                    const std::ptrdiff_t i = base + c * hw + p;
                    ss += in[i] * in[i];
                    dot += go[i] * in[i];
                }
                const double r = std::sqrt(ss);
                for (int c = 0; c < s.c; ++c) {
                    const std::ptrdiff_t i = base + c * hw + p;
                    (*gx)[i] += go[i] / r - in[i] * dot / (r * r * r);
                }
            }
        }
    });
}

}  // namespace maunet
