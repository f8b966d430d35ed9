#include "maunet/errors.hpp"
#include "maunet/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

using namespace maunet;

namespace {

// Reference convolution with explicit bounds checks, independent of the
// tap-range bookkeeping in the library.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad, int dilation,
                  bool depthwise) {
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    const int k = ws.h;
    const int ho = (xs.h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    const int wo = (xs.w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    const int cout = depthwise ? xs.c : ws.n;
    Tensor out({xs.n, cout, ho, wo});
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bias ? bias->data()[co] : 0.0;
                    const int c_lo = depthwise ? co : 0;
                    const int c_hi = depthwise ? co + 1 : xs.c;
                    for (int ci = c_lo; ci < c_hi; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky * dilation;
                                const int ix = ox * stride - pad + kx * dilation;
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                const double wv = depthwise ? w.at(co, 0, ky, kx) : w.at(co, ci, ky, kx);
                                acc += wv * x.at(n, ci, iy, ix);
                            }
                    out.at(n, co, oy, ox) = acc;
                }
    return out;
}

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    return Tensor::uniform(s, lo, hi, rng);
}

Tensor identity_center_kernel(int c_out, int c_in) {
    Tensor w({c_out, c_in, 3, 3});
    for (int c = 0; c < c_out; ++c) w.at(c, c_in == 1 ? 0 : c, 1, 1) = 1.0;
    return w;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    return (a.data() - b.data()).abs().maxCoeff();
}

}  // namespace

TEST(Tensor, RejectsMismatchedDataLength) {
    EXPECT_THROW(Tensor({1, 2, 2, 2}, Eigen::ArrayXd::Zero(7)), ShapeError);
    EXPECT_THROW(Tensor({0, 1, 1, 1}), ShapeError);
}

TEST(Tensor, NonFiniteLeafIsRejected) {
    Graph g;
    Tensor t({1, 1, 2, 2});
    t.data()[2] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(g.leaf(t), NumericError);
}

TEST(Conv2d, AllOnesSamePadding) {
    Graph g;
    auto x = g.leaf(Tensor::ones({1, 1, 3, 3}));
    auto w = g.leaf(Tensor::ones({1, 1, 3, 3}));
    auto b = g.leaf(Tensor::zeros({1, 1, 1, 1}));
    auto y = conv2d(x, w, b, {1, 1, 1});
    EXPECT_DOUBLE_EQ(y.value().at(0, 0, 1, 1), 9.0);
    for (auto [yy, xx] : {std::pair{0, 0}, {0, 2}, {2, 0}, {2, 2}}) EXPECT_DOUBLE_EQ(y.value().at(0, 0, yy, xx), 4.0);
    EXPECT_EQ(max_abs_diff(y.value(), naive_conv(x.value(), w.value(), nullptr, 1, 1, 1, false)), 0.0);
}

TEST(Conv2d, IdentityCenterKernel) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 3, 5, 6}, 1));
    auto w = g.leaf(identity_center_kernel(3, 3));
    auto y = conv2d(x, w, std::nullopt, {1, 1, 1});
    EXPECT_EQ(max_abs_diff(y.value(), x.value()), 0.0);
}

TEST(Conv2d, DilatedCenter) {
    Graph g;
    auto x = g.leaf(Tensor::ones({1, 1, 5, 5}));
    auto w = g.leaf(Tensor::ones({1, 1, 3, 3}));
    auto y = conv2d(x, w, std::nullopt, {1, 2, 2});
    ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
    EXPECT_DOUBLE_EQ(y.value().at(0, 0, 2, 2), 9.0);
    EXPECT_EQ(max_abs_diff(y.value(), naive_conv(x.value(), w.value(), nullptr, 1, 2, 2, false)), 0.0);
}

TEST(Conv2d, MatchesNaiveOracleAcrossGeometries) {
    for (int stride : {1, 2})
        for (int dilation : {1, 2, 3})
            for (int pad : {0, 1, 2, 3})
                for (int k : {1, 3, 5}) {
                    const int span = dilation * (k - 1) + 1;
                    if (7 + 2 * pad < span) continue;
                    Graph g;
                    auto x = g.leaf(random_tensor({2, 3, 7, 8}, 11));
                    auto w = g.leaf(random_tensor({4, 3, k, k}, 12));
                    auto b = g.leaf(random_tensor({1, 4, 1, 1}, 13));
                    auto y = conv2d(x, w, b, {stride, pad, dilation});
                    const Tensor ref = naive_conv(x.value(), w.value(), &b.value(), stride, pad, dilation, false);
                    EXPECT_EQ(y.shape(), ref.shape());
                    EXPECT_LT(max_abs_diff(y.value(), ref), 1e-12) << "s" << stride << " d" << dilation << " p" << pad;
                    EXPECT_EQ(y.shape().h, conv_output_extent(7, k, {stride, pad, dilation}));
                }
}

TEST(Conv2d, ImpulseResponseSupportMatchesDilatedSpan) {
    for (int dilation : {1, 2, 3}) {
        Graph g;
        Tensor impulse({1, 1, 15, 15});
        impulse.at(0, 0, 7, 7) = 1.0;
        auto x = g.leaf(impulse);
        auto w = g.leaf(Tensor::ones({1, 1, 3, 3}));
        auto y = conv2d(x, w, std::nullopt, {1, same_padding(3, dilation), dilation});
        int lo = 15, hi = -1;
        for (int yy = 0; yy < 15; ++yy)
            for (int xx = 0; xx < 15; ++xx)
                if (y.value().at(0, 0, yy, xx) != 0.0) {
                    lo = std::min(lo, xx);
                    hi = std::max(hi, xx);
                }
        EXPECT_EQ(hi - lo + 1, dilation * 2 + 1);
    }
}

TEST(Conv2d, ShapeErrors) {
    Graph g;
    auto x = g.leaf(Tensor::ones({1, 2, 4, 4}));
    EXPECT_THROW(conv2d(x, g.leaf(Tensor::ones({1, 3, 3, 3})), std::nullopt, {1, 1, 1}), ShapeError);
    EXPECT_THROW(conv2d(x, g.leaf(Tensor::ones({1, 2, 2, 2})), std::nullopt, {1, 1, 1}), ShapeError);
    EXPECT_THROW(conv2d(x, g.leaf(Tensor::ones({1, 2, 3, 3})), g.leaf(Tensor::ones({1, 2, 1, 1})), {1, 1, 1}),
                 ShapeError);
}

TEST(Conv2d, OverflowRaisesNumericError) {
    Graph g;
    auto x = g.leaf(Tensor({1, 1, 3, 3}, 1e308));
    auto w = g.leaf(Tensor({1, 1, 3, 3}, 10.0));
    EXPECT_THROW(conv2d(x, w, std::nullopt, {1, 1, 1}), NumericError);
}

TEST(DepthwiseConv2d, ChannelIndependence) {
    Graph g;
    Tensor xt({1, 2, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) xt.at(0, 0, y, x) = 1.0;
    auto x = g.leaf(xt);
    auto w = g.leaf(Tensor::ones({2, 1, 3, 3}));
    auto y = depthwise_conv2d(x, w, {1, 1, 1});
    for (double v : y.value().plane(0, 1)) EXPECT_EQ(v, 0.0);
    EXPECT_DOUBLE_EQ(y.value().at(0, 0, 1, 1), 9.0);
}

TEST(DepthwiseConv2d, SingleChannelAgreesWithConv2d) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 1, 6, 6}, 3));
    auto w = g.leaf(random_tensor({1, 1, 3, 3}, 4));
    for (int dilation : {1, 2}) {
        const ConvOptions opt{1, dilation, dilation};
        EXPECT_EQ(max_abs_diff(depthwise_conv2d(x, w, opt).value(), conv2d(x, w, std::nullopt, opt).value()), 0.0);
    }
    auto xs = g.leaf(random_tensor({2, 3, 7, 7}, 5));
    auto ws = g.leaf(random_tensor({3, 1, 3, 3}, 6));
    EXPECT_LT(max_abs_diff(depthwise_conv2d(xs, ws, {2, 1, 1}).value(),
                           naive_conv(xs.value(), ws.value(), nullptr, 2, 1, 1, true)),
              1e-12);
}

TEST(DepthwiseConv2d, IdentityKernel) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 3, 5, 5}, 8));
    auto y = depthwise_conv2d(x, g.leaf(identity_center_kernel(3, 1)), {1, 1, 1});
    EXPECT_EQ(max_abs_diff(y.value(), x.value()), 0.0);
    EXPECT_THROW(depthwise_conv2d(x, g.leaf(Tensor::ones({2, 1, 3, 3})), {1, 1, 1}), ShapeError);
}

TEST(PointwiseConv2d, IdentityAndChannelSum) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 3, 4, 5}, 9));
    Tensor eye({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0;
    auto y = pointwise_conv2d(x, g.leaf(eye), g.leaf(Tensor::zeros({1, 3, 1, 1})));
    EXPECT_EQ(max_abs_diff(y.value(), x.value()), 0.0);

    auto x2 = g.leaf(random_tensor({1, 2, 3, 3}, 10));
    auto s = pointwise_conv2d(x2, g.leaf(Tensor::ones({1, 2, 1, 1})), std::nullopt);
    for (int yy = 0; yy < 3; ++yy)
        for (int xx = 0; xx < 3; ++xx)
            EXPECT_NEAR(s.value().at(0, 0, yy, xx), x2.value().at(0, 0, yy, xx) + x2.value().at(0, 1, yy, xx), 1e-15);
}

TEST(PointwiseConv2d, AgreesWithConv2dKernelOne) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 4, 5, 3}, 14));
    auto w = g.leaf(random_tensor({3, 4, 1, 1}, 15));
    auto b = g.leaf(random_tensor({1, 3, 1, 1}, 16));
    EXPECT_LT(max_abs_diff(pointwise_conv2d(x, w, b).value(), conv2d(x, w, b, {1, 0, 1}).value()), 1e-14);
}

TEST(Activations, KnownValues) {
    Graph g;
    auto z = g.leaf(Tensor::zeros({1, 1, 1, 1}));
    EXPECT_EQ(sigmoid(z).item(), 0.5);
    EXPECT_EQ(gelu(z).item(), 0.0);
    auto neg = g.leaf(Tensor({1, 1, 1, 1}, -100.0));
    const double s = sigmoid(neg).item();
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1e-20);
    // 1 / (1 + e^100) to 20 digits (mpmath).
    EXPECT_NEAR(s / 3.720075976020835963e-44, 1.0, 1e-14);
    auto big = g.leaf(Tensor({1, 1, 1, 1}, 800.0));
    EXPECT_EQ(sigmoid(big).item(), 1.0);
}

TEST(Elementwise, IdentitiesAndBroadcast) {
    Graph g;
    auto x = g.leaf(random_tensor({1, 2, 2, 2}, 17));
    EXPECT_EQ(max_abs_diff(mul(x, g.leaf(Tensor::ones({1, 2, 2, 2}))).value(), x.value()), 0.0);
    EXPECT_EQ(max_abs_diff(add(x, g.leaf(Tensor::zeros({1, 2, 2, 2}))).value(), x.value()), 0.0);

    Tensor wt({1, 2, 1, 1});
    wt.data() << 2.0, 3.0;
    auto y = mul(x, g.leaf(wt));
    for (int c = 0; c < 2; ++c)
        for (int yy = 0; yy < 2; ++yy)
            for (int xx = 0; xx < 2; ++xx)
                EXPECT_EQ(y.value().at(0, c, yy, xx), x.value().at(0, c, yy, xx) * (c == 0 ? 2.0 : 3.0));
    EXPECT_THROW(add(x, g.leaf(Tensor::ones({1, 3, 1, 1}))), ShapeError);
    EXPECT_EQ(max_abs_diff(scale(x, 2.0).value(), add(x, x).value()), 0.0);
}

TEST(Pooling, MeanAndFullyConnected) {
    Graph g;
    auto c = g.leaf(Tensor({2, 3, 4, 4}, 1.75));
    for (double v : global_avg_pool(c).value().data()) EXPECT_EQ(v, 1.75);
    Tensor t({1, 1, 2, 2});
    t.data() << 1, 2, 3, 4;
    EXPECT_DOUBLE_EQ(global_avg_pool(g.leaf(t)).item(), 2.5);

    auto p = g.leaf(random_tensor({2, 3, 1, 1}, 18));
    Tensor eye({3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) eye.at(i, i, 0, 0) = 1.0;
    EXPECT_EQ(max_abs_diff(fully_connected(p, g.leaf(eye), std::nullopt).value(), p.value()), 0.0);
    EXPECT_THROW(fully_connected(c, g.leaf(eye), std::nullopt), ShapeError);
}

TEST(Softmax, ClosedFormsAndInvariance) {
    Graph g;
    auto eq = softmax_channels(g.leaf(Tensor({1, 4, 2, 2}, 0.3)));
    for (double v : eq.value().data()) EXPECT_NEAR(v, 0.25, 1e-15);

    Tensor l({1, 2, 1, 1});
    l.data() << 0.0, std::log(3.0);
    auto p = softmax_channels(g.leaf(l));
    EXPECT_NEAR(p.value().data()[0], 0.25, 1e-15);
    EXPECT_NEAR(p.value().data()[1], 0.75, 1e-15);

    auto x = random_tensor({2, 3, 4, 4}, 19, -5, 5);
    auto shifted = x;
    shifted.data() += 7.5;
    auto a = softmax_channels(g.leaf(x));
    auto b = softmax_channels(g.leaf(shifted));
    EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-12);
    for (int n = 0; n < 2; ++n)
        for (int yy = 0; yy < 4; ++yy)
            for (int xx = 0; xx < 4; ++xx) {
                double s = 0.0;
                for (int c = 0; c < 3; ++c) s += a.value().at(n, c, yy, xx);
                EXPECT_NEAR(s, 1.0, 1e-9);
            }
    auto ls = log_softmax_channels(g.leaf(x));
    EXPECT_LT((ls.value().data().exp() - a.value().data()).abs().maxCoeff(), 1e-14);

    auto single = g.leaf(Tensor({1, 1, 1, 1}, 0.0));
    EXPECT_EQ(softmax_channels(single).item(), 0.5);
    EXPECT_NEAR(log_softmax_channels(single).item(), std::log(0.5), 1e-15);
}

TEST(Backward, SumAndSquare) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 3, 4, 4}, 20));
    g.backward(sum(x));
    EXPECT_TRUE((x.grad() == 1.0).all());

    Graph g2;
    auto x2 = g2.leaf(random_tensor({2, 3, 4, 4}, 21));
    g2.backward(sum(mul(x2, x2)));
    EXPECT_LT((x2.grad() - 2.0 * x2.value().data()).abs().maxCoeff(), 1e-15);

    const std::vector<GradCheckInput> in{{random_tensor({2, 3, 4, 4}, 22)}};
    EXPECT_LT(grad_check([](Graph&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, in), 1e-6);
}

TEST(Backward, SigmoidSlopeAtZero) {
    Graph g;
    auto x = g.leaf(Tensor::zeros({1, 2, 2, 2}));
    g.backward(sum(sigmoid(x)));
    EXPECT_TRUE((x.grad() == 0.25).all());
}

TEST(Backward, RequiresScalarLoss) {
    Graph g;
    auto x = g.leaf(Tensor::ones({1, 1, 2, 2}));
    EXPECT_THROW(g.backward(sigmoid(x)), GraphError);
    const std::vector<GradCheckInput> in{{Tensor::ones({1, 1, 1, 1})}};
    auto op = [](Graph&, std::span<const Var> v) { return sum(v[0]); };
    GradCheckOptions bad;
    bad.eps = 1e-2;
    EXPECT_THROW(grad_check(op, in, bad), DomainError);
}

TEST(Backward, LeavesForwardValuesUntouchedAndVisitsEachNodeOnce) {
    Graph g;
    auto x = g.leaf(random_tensor({2, 3, 6, 6}, 23));
    auto w = g.leaf(random_tensor({4, 3, 3, 3}, 24));
    auto dw = g.leaf(random_tensor({4, 1, 3, 3}, 25));
    auto h = gelu(conv2d(x, w, std::nullopt, {1, 1, 1}));
    auto a = sigmoid(depthwise_conv2d(h, dw, {1, 2, 2}));
    auto loss = mean(add(mul(a, h), h));

    std::vector<Eigen::ArrayXd> before;
    for (int id = 0; id < g.size(); ++id) before.push_back(g.value(id).data());
    std::vector<int> visits;
    g.set_visit_observer([&](int id) { visits.push_back(id); });
    g.backward(loss);
    for (int id = 0; id < g.size(); ++id) EXPECT_TRUE((g.value(id).data() == before[id]).all());
    ASSERT_EQ(static_cast<int>(visits.size()), loss.id() + 1);
    for (std::size_t i = 0; i < visits.size(); ++i) EXPECT_EQ(visits[i], loss.id() - static_cast<int>(i));
    for (int id = 0; id < g.size(); ++id)
        for (int in : g.inputs(id)) EXPECT_LT(in, id);
}

TEST(Backward, Determinism) {
    auto run = [] {
        Graph g;
        auto x = g.leaf(random_tensor({2, 3, 8, 8}, 42));
        auto w = g.leaf(random_tensor({5, 3, 3, 3}, 43));
        auto loss = mean(gelu(conv2d(x, w, std::nullopt, {2, 1, 1})));
        g.backward(loss);
        return std::pair{loss.item(), Eigen::ArrayXd(w.grad())};
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    EXPECT_EQ(l1, l2);
    EXPECT_TRUE((g1 == g2).all());
}

// Every differentiable primitive against central differences on random
// 2x3x4x4 inputs.
struct OpCase {
    const char* name;
    GradCheckFn fn;
    std::vector<Shape> shapes;
};

class PrimitiveGradients : public ::testing::TestWithParam<int> {};

const std::vector<OpCase>& op_cases() {
    static const std::vector<OpCase> cases = {
        {"conv2d", [](Graph&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], {1, 1, 1}); },
         {{2, 3, 4, 4}, {2, 3, 3, 3}, {1, 2, 1, 1}}},
        {"conv2d_strided_dilated", [](Graph&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], {2, 2, 2}); },
         {{2, 3, 4, 4}, {2, 3, 3, 3}, {1, 2, 1, 1}}},
        {"depthwise_conv2d", [](Graph&, std::span<const Var> v) { return depthwise_conv2d(v[0], v[1], {1, 2, 2}); },
         {{2, 3, 4, 4}, {3, 1, 3, 3}}},
        {"pointwise_conv2d", [](Graph&, std::span<const Var> v) { return pointwise_conv2d(v[0], v[1], v[2]); },
         {{2, 3, 4, 4}, {4, 3, 1, 1}, {1, 4, 1, 1}}},
        {"gelu", [](Graph&, std::span<const Var> v) { return gelu(v[0]); }, {{2, 3, 4, 4}}},
        {"sigmoid", [](Graph&, std::span<const Var> v) { return sigmoid(v[0]); }, {{2, 3, 4, 4}}},
        {"add_broadcast", [](Graph&, std::span<const Var> v) { return add(v[0], v[1]); }, {{2, 3, 4, 4}, {2, 1, 4, 4}}},
        {"sub", [](Graph&, std::span<const Var> v) { return sub(v[0], v[1]); }, {{2, 3, 4, 4}, {2, 3, 4, 4}}},
        {"mul_broadcast", [](Graph&, std::span<const Var> v) { return mul(v[0], v[1]); }, {{2, 3, 4, 4}, {1, 3, 1, 1}}},
        {"scale", [](Graph&, std::span<const Var> v) { return scale(v[0], -1.7); }, {{2, 3, 4, 4}}},
        {"mean", [](Graph&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {{2, 3, 4, 4}}},
        {"global_avg_pool", [](Graph&, std::span<const Var> v) { return global_avg_pool(v[0]); }, {{2, 3, 4, 4}}},
        {"fully_connected",
         [](Graph&, std::span<const Var> v) { return fully_connected(global_avg_pool(v[0]), v[1], v[2]); },
         {{2, 3, 4, 4}, {5, 3, 1, 1}, {1, 5, 1, 1}}},
        {"softmax_channels", [](Graph&, std::span<const Var> v) { return softmax_channels(v[0]); }, {{2, 3, 4, 4}}},
        {"log_softmax_channels", [](Graph&, std::span<const Var> v) { return log_softmax_channels(v[0]); },
         {{2, 3, 4, 4}}},
        {"softmax_single_channel", [](Graph&, std::span<const Var> v) { return log_softmax_channels(v[0]); },
         {{2, 1, 4, 4}}},
        {"upsample_nearest2x", [](Graph&, std::span<const Var> v) { return upsample_nearest2x(v[0]); }, {{2, 3, 4, 4}}},
        {"l2_normalize_channels", [](Graph&, std::span<const Var> v) { return l2_normalize_channels(v[0]); },
         {{2, 3, 4, 4}}},
    };
    return cases;
}

TEST_P(PrimitiveGradients, CentralDifferences) {
    const OpCase& c = op_cases()[static_cast<std::size_t>(GetParam())];
    std::vector<GradCheckInput> inputs;
    std::uint64_t seed = 100;
    for (const Shape& s : c.shapes) inputs.push_back({random_tensor(s, seed++)});
    EXPECT_LT(grad_check(c.fn, inputs, {}), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradients,
                         ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(GradCheck, CatchesCorruptedGradient) {
    const std::vector<GradCheckInput> in{{random_tensor({2, 3, 4, 4}, 31)}};
    auto probe = [](double factor) {
        return [factor](Graph&, std::span<const Var> v) { return gradient_probe(gelu(v[0]), factor); };
    };
    EXPECT_LT(grad_check(probe(1.0), in), 1e-8);
    EXPECT_GT(grad_check(probe(1.01), in), 1e-3);
}
