#include "maunet/errors.hpp"
#include "maunet/ops.hpp"

#include <Eigen/Dense>

#include <vector>

namespace maunet {

namespace {

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return -floor_div(-a, b); }

// Output positions o in [lo, hi) whose input coordinate o*stride + offset
// falls inside [0, in_extent).
struct TapRange {
    int offset;
    int lo;
    int hi;
};

std::vector<TapRange> tap_ranges(int k, int in_extent, int out_extent, const ConvOptions& opt) {
    std::vector<TapRange> r(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) {
        const int off = t * opt.dilation - opt.pad;
        int lo = ceil_div(-off, opt.stride);
        int hi = floor_div(in_extent - 1 - off, opt.stride) + 1;
        lo = std::max(lo, 0);
        hi = std::min(hi, out_extent);
        r[static_cast<std::size_t>(t)] = {off, lo, std::max(lo, hi)};
    }
    return r;
}

struct Geometry {
    int k;
    int h_in, w_in, h_out, w_out;
    int stride;
    std::vector<TapRange> ys, xs;
};

Geometry make_geometry(const Shape& x, int k, const ConvOptions& opt) {
    if (k <= 0 || k % 2 == 0) throw ShapeError("kernel size must be odd, got " + std::to_string(k));
    if (opt.stride < 1 || opt.dilation < 1 || opt.pad < 0) throw ShapeError("invalid stride/dilation/pad");
    Geometry g{k, x.h, x.w, conv_output_extent(x.h, k, opt), conv_output_extent(x.w, k, opt), opt.stride, {}, {}};
    if (g.h_out <= 0 || g.w_out <= 0) throw ShapeError("convolution output would be empty for input " + to_string(x));
    g.ys = tap_ranges(k, x.h, g.h_out, opt);
    g.xs = tap_ranges(k, x.w, g.w_out, opt);
    return g;
}

// out_plane += wv * shifted(in_plane) for one kernel tap.
void tap_forward(const Geometry& g, const TapRange& ry, const TapRange& rx, double wv, const double* in,
                 double* out) {
    for (int oy = ry.lo; oy < ry.hi; ++oy) {
        const double* in_row = in + static_cast<std::ptrdiff_t>(oy * g.stride + ry.offset) * g.w_in;
        double* out_row = out + static_cast<std::ptrdiff_t>(oy) * g.w_out;
        if (g.stride == 1) {
            const double* src = in_row + rx.offset;
            for (int ox = rx.lo; ox < rx.hi; ++ox) out_row[ox] += wv * src[ox];
        } else {
            for (int ox = rx.lo; ox < rx.hi; ++ox) out_row[ox] += wv * in_row[ox * g.stride + rx.offset];
        }
    }
}

// Transpose of tap_forward: scatter the output gradient back to the input.
void tap_backward_input(const Geometry& g, const TapRange& ry, const TapRange& rx, double wv,
                        const double* gout, double* gin) {
    for (int oy = ry.lo; oy < ry.hi; ++oy) {
        double* gin_row = gin + static_cast<std::ptrdiff_t>(oy * g.stride + ry.offset) * g.w_in;
        const double* g_row = gout + static_cast<std::ptrdiff_t>(oy) * g.w_out;
        if (g.stride == 1) {
            double* dst = gin_row + rx.offset;
            for (int ox = rx.lo; ox < rx.hi; ++ox) dst[ox] += wv * g_row[ox];
        } else {
            for (int ox = rx.lo; ox < rx.hi; ++ox) gin_row[ox * g.stride + rx.offset] += wv * g_row[ox];
        }
    }
}

double tap_weight_grad(const Geometry& g, const TapRange& ry, const TapRange& rx, const double* in,
                       const double* gout) {
    double acc = 0.0;
    for (int oy = ry.lo; oy < ry.hi; ++oy) {
        const double* in_row = in + static_cast<std::ptrdiff_t>(oy * g.stride + ry.offset) * g.w_in;
        const double* g_row = gout + static_cast<std::ptrdiff_t>(oy) * g.w_out;
        for (int ox = rx.lo; ox < rx.hi; ++ox) acc += g_row[ox] * in_row[ox * g.stride + rx.offset];
    }
    return acc;
}

void check_same_graph(const Var& a, const Var& b) {
    if (a.graph() != b.graph() || !a.valid()) throw GraphError("operands belong to different graphs");
}

void check_bias(const std::optional<Var>& bias, int c_out, const Var& x) {
    if (!bias) return;
    check_same_graph(x, *bias);
    if (bias->shape() != Shape{1, c_out, 1, 1}) {
        throw ShapeError("bias must be 1x" + std::to_string(c_out) + "x1x1, got " + to_string(bias->shape()));
    }
}

void accumulate_bias_grad(const Eigen::ArrayXd& gout, const Shape& out, Eigen::ArrayXd& gb) {
    const auto plane = static_cast<Eigen::Index>(out.plane());
    for (int n = 0; n < out.n; ++n) {
        for (int c = 0; c < out.c; ++c) {
            gb[c] += gout.segment((static_cast<Eigen::Index>(n) * out.c + c) * plane, plane).sum();
        }
    }
}

using ConstMat = Eigen::Map<const Eigen::MatrixXd>;
using Mat = Eigen::Map<Eigen::MatrixXd>;

}  // namespace

int conv_output_extent(int in, int k, const ConvOptions& opt) {
    return (in + 2 * opt.pad - opt.dilation * (k - 1) - 1) / opt.stride + 1;
}

Var conv2d(const Var& x, const Var& w, const std::optional<Var>& bias, const ConvOptions& opt) {
    check_same_graph(x, w);
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    if (ws.h != ws.w) throw ShapeError("conv2d kernel must be square");
    if (ws.c != xs.c) {
        throw ShapeError("conv2d expects " + std::to_string(ws.c) + " input channels, got " + std::to_string(xs.c));
    }
    check_bias(bias, ws.n, x);
    const Geometry geo = make_geometry(xs, ws.h, opt);
    const Shape os{xs.n, ws.n, geo.h_out, geo.w_out};
    const int k = geo.k;
    const int cin = xs.c;
    const int cout = ws.n;

    Tensor out(os);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    for (int n = 0; n < xs.n; ++n) {
        for (int co = 0; co < cout; ++co) {
            double* op = out.plane(n, co).data();
            if (bias) std::fill_n(op, os.plane(), bias->value().data()[co]);
            for (int ci = 0; ci < cin; ++ci) {
                const double* ip = xv.plane(n, ci).data();
                const double* wk = wv.plane(co, ci).data();
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        tap_forward(geo, geo.ys[ky], geo.xs[kx], wk[ky * k + kx], ip, op);
                    }
                }
            }
        }
    }

    std::vector<int> inputs{x.id(), w.id()};
    if (bias) inputs.push_back(bias->id());
    const int xid = x.id();
    const int wid = w.id();
    const int bid = bias ? bias->id() : -1;
    return x.graph()->record(OpTag::conv2d, std::move(inputs), std::move(out),
                             [=](Graph& g, int self) {
        const Eigen::ArrayXd& gout = g.grad(self);
        const Tensor& xv = g.value(xid);
        const Tensor& wv = g.value(wid);
        Eigen::ArrayXd* gx = g.grad_sink(xid);
        Eigen::ArrayXd* gw = g.grad_sink(wid);
        const auto plane_out = static_cast<std::ptrdiff_t>(os.plane());
        const auto plane_in = static_cast<std::ptrdiff_t>(xs.plane());
        for (int n = 0; n < xs.n; ++n) {
            for (int co = 0; co < cout; ++co) {
                const double* gp = gout.data() + (static_cast<std::ptrdiff_t>(n) * cout + co) * plane_out;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* wk = wv.plane(co, ci).data();
                    const std::ptrdiff_t in_off = (static_cast<std::ptrdiff_t>(n) * cin + ci) * plane_in;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            if (gx) {
                                tap_backward_input(geo, geo.ys[ky], geo.xs[kx], wk[ky * k + kx], gp,
                                                   gx->data() + in_off);
                            }
                            if (gw) {
                                (*gw)[((co * cin + ci) * k + ky) * k + kx] +=
                                    tap_weight_grad(geo, geo.ys[ky], geo.xs[kx], xv.data().data() + in_off, gp);
                            }
                        }
                    }
                }
            }
        }
        if (bid >= 0) {
            if (auto* gb = g.grad_sink(bid)) accumulate_bias_grad(gout, os, *gb);
        }
    });
}

Var depthwise_conv2d(const Var& x, const Var& w, const ConvOptions& opt) {
    check_same_graph(x, w);
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    if (ws.h != ws.w || ws.c != 1) throw ShapeError("depthwise kernel must be [C,1,K,K], got " + to_string(ws));
    if (ws.n != xs.c) {
        throw ShapeError("depthwise kernel has " + std::to_string(ws.n) + " channels, input has " +
                         std::to_string(xs.c));
    }
    const Geometry geo = make_geometry(xs, ws.h, opt);
    const Shape os{xs.n, xs.c, geo.h_out, geo.w_out};
    const int k = geo.k;

    Tensor out(os);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const double* wk = wv.plane(c, 0).data();
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    tap_forward(geo, geo.ys[ky], geo.xs[kx], wk[ky * k + kx], xv.plane(n, c).data(),
                                out.plane(n, c).data());
                }
            }
        }
    }

    const int xid = x.id();
    const int wid = w.id();
    return x.graph()->record(OpTag::depthwise_conv2d, {xid, wid}, std::move(out), [=](Graph& g, int self) {
        const Eigen::ArrayXd& gout = g.grad(self);
        const Tensor& xv = g.value(xid);
        const Tensor& wv = g.value(wid);
        Eigen::ArrayXd* gx = g.grad_sink(xid);
        Eigen::ArrayXd* gw = g.grad_sink(wid);
        const auto plane_out = static_cast<std::ptrdiff_t>(os.plane());
        const auto plane_in = static_cast<std::ptrdiff_t>(xs.plane());
        for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < xs.c; ++c) {
                const double* gp = gout.data() + (static_cast<std::ptrdiff_t>(n) * xs.c + c) * plane_out;
                const std::ptrdiff_t in_off = (static_cast<std::ptrdiff_t>(n) * xs.c + c) * plane_in;
                const double* wk = wv.plane(c, 0).data();
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        if (gx) tap_backward_input(geo, geo.ys[ky], geo.xs[kx], wk[ky * k + kx], gp, gx->data() + in_off);
                        if (gw) {
                            (*gw)[(c * k + ky) * k + kx] +=
                                tap_weight_grad(geo, geo.ys[ky], geo.xs[kx], xv.data().data() + in_off, gp);
                        }
                    }
                }
            }
        }
    });
}

Var pointwise_conv2d(const Var& x, const Var& w, const std::optional<Var>& bias) {
    check_same_graph(x, w);
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    if (ws.h != 1 || ws.w != 1) throw ShapeError("pointwise kernel must be 1x1, got " + to_string(ws));
    if (ws.c != xs.c) {
        throw ShapeError("pointwise kernel expects " + std::to_string(ws.c) + " input channels, got " +
                         std::to_string(xs.c));
    }
    check_bias(bias, ws.n, x);
    const int cin = xs.c;
    const int cout = ws.n;
    const auto hw = static_cast<Eigen::Index>(xs.plane());
    const Shape os{xs.n, cout, xs.h, xs.w};

    // Per image, channels are contiguous columns of an HW x C matrix and the
    // row-major [C_out, C_in] kernel is a column-major C_in x C_out matrix.
    Tensor out(os);
    ConstMat wt(w.value().data().data(), cin, cout);
    for (int n = 0; n < xs.n; ++n) {
        ConstMat xm(x.value().data().data() + n * hw * cin, hw, cin);
        Mat om(out.data().data() + n * hw * cout, hw, cout);
        om.noalias() = xm * wt;
        if (bias) om.rowwise() += bias->value().data().matrix().transpose();
    }

    std::vector<int> inputs{x.id(), w.id()};
    if (bias) inputs.push_back(bias->id());
    const int xid = x.id();
    const int wid = w.id();
    const int bid = bias ? bias->id() : -1;
    return x.graph()->record(OpTag::pointwise_conv2d, std::move(inputs), std::move(out),
                             [=](Graph& g, int self) {
        const Eigen::ArrayXd& gout = g.grad(self);
        ConstMat wt(g.value(wid).data().data(), cin, cout);
        Eigen::ArrayXd* gx = g.grad_sink(xid);
        Eigen::ArrayXd* gw = g.grad_sink(wid);
        for (int n = 0; n < xs.n; ++n) {
            ConstMat gm(gout.data() + n * hw * cout, hw, cout);
            if (gx) {
                Mat gxm(gx->data() + n * hw * cin, hw, cin);
                gxm.noalias() += gm * wt.transpose();
            }
            if (gw) {
                ConstMat xm(g.value(xid).data().data() + n * hw * cin, hw, cin);
                Mat gwm(gw->data(), cin, cout);
                gwm.noalias() += xm.transpose() * gm;
            }
        }
        if (bid >= 0) {
            if (auto* gb = g.grad_sink(bid)) accumulate_bias_grad(gout, os, *gb);
        }
    });
}

}  // namespace maunet
