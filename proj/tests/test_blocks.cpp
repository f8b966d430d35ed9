#include "maunet/blocks.hpp"
#include "maunet/errors.hpp"
#include "maunet/image_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace maunet;

namespace {

Tensor rand_t(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(s, lo, hi, rng);
}

DepthwiseSeparableDilatedBlock make_dsd(Graph& g, int c, int c_out, int k, int dilation, std::mt19937_64& rng) {
    DepthwiseSeparableDilatedBlock b;
    b.dw_weights = g.leaf(rand_t({c, 1, k, k}, rng));
    b.pw_weights = g.leaf(rand_t({c_out, c, 1, 1}, rng));
    b.pw_bias = g.leaf(rand_t({1, c_out, 1, 1}, rng));
    b.dilation = dilation;
    return b;
}

SinglePathSpatialAttention make_spatial(Graph& g, int c, std::mt19937_64& rng) {
    return {g.leaf(rand_t({c, 1, 3, 3}, rng)), g.leaf(rand_t({1, c, 1, 1}, rng)), g.leaf(rand_t({1, 1, 1, 1}, rng))};
}

SharedAttentionBridge make_bridge(Graph& g, const std::vector<int>& widths, int shared, std::mt19937_64& rng) {
    const int hidden = shared / 4;
    SharedAttentionBridge b;
    b.fc1_w = g.leaf(rand_t({hidden, shared, 1, 1}, rng));
    b.fc1_b = g.leaf(rand_t({1, hidden, 1, 1}, rng));
    b.fc2_w = g.leaf(rand_t({shared, hidden, 1, 1}, rng));
    b.fc2_b = g.leaf(rand_t({1, shared, 1, 1}, rng));
    b.alpha = g.leaf(Tensor::scalar(0.5));
    b.beta = g.leaf(Tensor::scalar(0.5));
    for (int c : widths) {
        b.stages.push_back({make_spatial(g, c, rng), g.leaf(rand_t({shared, c, 1, 1}, rng)),
                            g.leaf(rand_t({1, shared, 1, 1}, rng)), g.leaf(rand_t({c, shared, 1, 1}, rng)),
                            g.leaf(rand_t({1, c, 1, 1}, rng))});
    }
    return b;
}

std::size_t leaf_elements(const DepthwiseSeparableDilatedBlock& b) {
    return b.dw_weights.value().size() + b.pw_weights.value().size() + b.pw_bias.value().size();
}

bool strictly_inside_unit(const Tensor& t) { return (t.data() > 0.0).all() && (t.data() < 1.0).all(); }

}  // namespace

TEST(DsdBlock, IdentityWeightsReproduceInput) {
    Graph g;
    std::mt19937_64 rng(1);
    const int c = 4;
    Tensor dw({c, 1, 3, 3});
    Tensor pw({c, c, 1, 1});
    for (int i = 0; i < c; ++i) {
        dw.at(i, 0, 1, 1) = 1.0;
        pw.at(i, i, 0, 0) = 1.0;
    }
    for (int dilation : {1, 2, 3}) {
        DepthwiseSeparableDilatedBlock b{g.leaf(dw), g.leaf(pw), g.leaf(Tensor({1, c, 1, 1})), dilation, 1};
        Var x = g.leaf(rand_t({2, c, 9, 7}, rng));
        Var y = dsd_forward(b, x);
        ASSERT_EQ(y.shape(), x.shape());
        EXPECT_EQ((y.value().data() - x.value().data()).abs().maxCoeff(), 0.0);
    }
}

TEST(DsdBlock, ParameterCountAgainstDense) {
    Graph g;
    std::mt19937_64 rng(2);
    auto b = make_dsd(g, 16, 16, 3, 1, rng);
    EXPECT_EQ(leaf_elements(b), dsd_param_count(3, 16, 16));
    EXPECT_EQ(dsd_param_count(3, 16, 16), 416u);
    // Dense layer built the same way: one [C_out, C, K, K] kernel plus bias.
    Tensor dense_w({16, 16, 3, 3});
    Tensor dense_b({1, 16, 1, 1});
    EXPECT_EQ(dense_w.size() + dense_b.size(), dense_conv_param_count(3, 16, 16));
    EXPECT_EQ(dense_conv_param_count(3, 16, 16), 2320u);
}

TEST(DsdBlock, ReductionRatioClosedForm) {
    Graph g;
    std::mt19937_64 rng(3);
    for (int c : {4, 8, 16, 32}) {
        auto b = make_dsd(g, c, c, 3, 1, rng);
        const double measured = static_cast<double>(b.dw_weights.value().size() + b.pw_weights.value().size());
        const double dense = 9.0 * c * c;
        EXPECT_NEAR(measured / dense, 1.0 / c + 1.0 / 9.0, 1e-15) << "C=" << c;
    }
}

TEST(DsdBlock, DilationTwoImpulseSupportIsFiveByFive) {
    Graph g;
    const int c = 1;
    Tensor dw = Tensor::ones({c, 1, 3, 3});
    Tensor pw = Tensor::ones({c, c, 1, 1});
    DepthwiseSeparableDilatedBlock b{g.leaf(dw), g.leaf(pw), g.leaf(Tensor({1, c, 1, 1})), 2, 1};
    Tensor impulse({1, c, 11, 11});
    impulse.at(0, 0, 5, 5) = 1.0;
    const Tensor& y = dsd_forward(b, g.leaf(impulse)).value();
    int min_y = 99, max_y = -1, min_x = 99, max_x = -1;
    for (int yy = 0; yy < 11; ++yy)
        for (int xx = 0; xx < 11; ++xx)
            if (y.at(0, 0, yy, xx) != 0.0) {
                min_y = std::min(min_y, yy);
                max_y = std::max(max_y, yy);
                min_x = std::min(min_x, xx);
                max_x = std::max(max_x, xx);
            }
    EXPECT_EQ(max_y - min_y + 1, 5);
    EXPECT_EQ(max_x - min_x + 1, 5);
}

TEST(DsdBlock, PreservesExtentsAndRejectsWrongChannels) {
    Graph g;
    std::mt19937_64 rng(4);
    auto b = make_dsd(g, 3, 5, 3, 2, rng);
    Var x = g.leaf(rand_t({1, 3, 8, 6}, rng));
    EXPECT_EQ(dsd_forward(b, x).shape(), (Shape{1, 5, 8, 6}));
    EXPECT_THROW(dsd_forward(b, g.leaf(rand_t({1, 4, 8, 6}, rng))), ShapeError);
}

TEST(SpatialAttention, ForcedGatesGiveResidualIdentities) {
    Graph g;
    std::mt19937_64 rng(5);
    auto block = make_spatial(g, 3, rng);
    Var x = g.leaf(rand_t({2, 3, 6, 6}, rng));
    auto zero = spatial_attention_forward(block, x, 0.0);
    EXPECT_EQ((zero.out.value().data() - x.value().data()).abs().maxCoeff(), 0.0);
    auto one = spatial_attention_forward(block, x, 1.0);
    EXPECT_EQ((one.out.value().data() - 2.0 * x.value().data()).abs().maxCoeff(), 0.0);
}

TEST(SpatialAttention, OutputRecomputedFromReturnedMap) {
    Graph g;
    std::mt19937_64 rng(6);
    auto block = make_spatial(g, 4, rng);
    Var x = g.leaf(rand_t({2, 4, 7, 5}, rng, -3.0, 3.0));
    auto r = spatial_attention_forward(block, x);
    ASSERT_EQ(r.attn.shape(), (Shape{2, 1, 7, 5}));
    EXPECT_TRUE(strictly_inside_unit(r.attn.value()));
    double worst = 0.0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c)
            for (int h = 0; h < 7; ++h)
                for (int w = 0; w < 5; ++w) {
                    const double xv = x.value().at(n, c, h, w);
                    const double a = r.attn.value().at(n, 0, h, w);
                    worst = std::max(worst, std::abs(r.out.value().at(n, c, h, w) - xv - a * xv));
                }
    EXPECT_LT(worst, 1e-12);
    EXPECT_THROW(spatial_attention_forward(block, g.leaf(rand_t({1, 2, 4, 4}, rng))), ShapeError);
}

TEST(Bridge, OverridesGiveResidualIdentities) {
    Graph g;
    std::mt19937_64 rng(7);
    auto bridge = make_bridge(g, {8, 4}, 16, rng);
    Var t = g.leaf(rand_t({2, 8, 5, 5}, rng));
    auto zero = bridge_forward(bridge, 0, t, {0.0, 0.0});
    EXPECT_EQ((zero.out.value().data() - t.value().data()).abs().maxCoeff(), 0.0);

    bridge.alpha = g.leaf(Tensor::scalar(1.0));
    bridge.beta = g.leaf(Tensor::scalar(0.0));
    auto doubled = bridge_forward(bridge, 0, t, {1.0, std::nullopt});
    EXPECT_EQ((doubled.out.value().data() - 2.0 * t.value().data()).abs().maxCoeff(), 0.0);
}

TEST(Bridge, ResidualIdentityFromExposedMaps) {
    Graph g;
    std::mt19937_64 rng(8);
    auto bridge = make_bridge(g, {8, 4}, 16, rng);
    bridge.alpha = g.leaf(Tensor::scalar(0.3));
    bridge.beta = g.leaf(Tensor::scalar(-0.7));
    for (int stage = 0; stage < 2; ++stage) {
        const int c = stage == 0 ? 8 : 4;
        Var t = g.leaf(rand_t({2, c, 4, 6}, rng, -2.0, 2.0));
        auto r = bridge_forward(bridge, stage, t);
        ASSERT_EQ(r.channel_attn.shape(), (Shape{2, c, 1, 1}));
        ASSERT_EQ(r.spatial_attn.shape(), (Shape{2, 1, 4, 6}));
        EXPECT_TRUE(strictly_inside_unit(r.channel_attn.value()));
        EXPECT_TRUE(strictly_inside_unit(r.spatial_attn.value()));
        double worst = 0.0;
        for (int n = 0; n < 2; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (int h = 0; h < 4; ++h)
                    for (int w = 0; w < 6; ++w) {
                        const double tv = t.value().at(n, ch, h, w);
                        const double gate = 0.3 * r.channel_attn.value().at(n, ch, 0, 0) -
                                            0.7 * r.spatial_attn.value().at(n, 0, h, w);
                        worst = std::max(worst, std::abs(r.out.value().at(n, ch, h, w) - tv - gate * tv));
                    }
        EXPECT_LT(worst, 1e-12);
    }
}

TEST(Bridge, StageIndexAndShapeErrors) {
    Graph g;
    std::mt19937_64 rng(9);
    auto bridge = make_bridge(g, {8, 4}, 16, rng);
    Var t = g.leaf(rand_t({1, 8, 4, 4}, rng));
    EXPECT_THROW(bridge_forward(bridge, 2, t), IndexError);
    EXPECT_THROW(bridge_forward(bridge, -1, t), IndexError);
    EXPECT_THROW(bridge_forward(bridge, 1, t), ShapeError);
}

TEST(Bridge, SharedWeightsAffectEveryStage) {
    Graph g;
    std::mt19937_64 rng(10);
    auto bridge = make_bridge(g, {8, 4, 2}, 16, rng);
    std::vector<Var> inputs;
    std::vector<Tensor> before;
    for (int s = 0; s < 3; ++s) {
        inputs.push_back(g.leaf(rand_t({1, bridge.stages[static_cast<std::size_t>(s)].channels(), 4, 4}, rng)));
        before.push_back(bridge_forward(bridge, s, inputs.back()).channel_attn.value());
    }
    // Only the shared handles change; per-stage projections are untouched.
    bridge.fc1_w = g.leaf(Tensor(bridge.fc1_w.shape()));
    bridge.fc2_w = g.leaf(Tensor(bridge.fc2_w.shape()));
    for (int s = 0; s < 3; ++s) {
        const Tensor after = bridge_forward(bridge, s, inputs[static_cast<std::size_t>(s)]).channel_attn.value();
        EXPECT_GT((after.data() - before[static_cast<std::size_t>(s)].data()).abs().maxCoeff(), 1e-6) << "stage " << s;
    }
}

TEST(Bridge, AlphaGradientNonzeroAndMatchesFiniteDifference) {
    std::mt19937_64 rng(11);
    Graph g;
    auto bridge = make_bridge(g, {6}, 8, rng);
    Var t = g.leaf(rand_t({2, 6, 5, 5}, rng));
    auto r = bridge_forward(bridge, 0, t);
    Var loss = mean(mul(r.out, r.out));
    g.backward(loss);
    const double analytic = bridge.alpha.grad()[0];
    EXPECT_GT(std::abs(analytic), 1e-6);

    auto loss_at = [&](double alpha) {
        Graph h;
        SharedAttentionBridge b = bridge;
        auto rebind = [&h](const Var& v) { return h.leaf(v.value()); };
        b.fc1_w = rebind(bridge.fc1_w);
        b.fc1_b = rebind(bridge.fc1_b);
        b.fc2_w = rebind(bridge.fc2_w);
        b.fc2_b = rebind(bridge.fc2_b);
        b.beta = rebind(bridge.beta);
        b.alpha = h.leaf(Tensor::scalar(alpha));
        auto& st = b.stages[0];
        const auto& src = bridge.stages[0];
        st = {{rebind(src.spatial.dw_weights), rebind(src.spatial.w_1x1), rebind(src.spatial.b_1x1)},
              rebind(src.proj_in_w), rebind(src.proj_in_b), rebind(src.proj_out_w), rebind(src.proj_out_b)};
        Var out = bridge_forward(b, 0, h.leaf(t.value())).out;
        return mean(mul(out, out)).item();
    };
    const double eps = 1e-5;
    const double numeric = (loss_at(0.5 + eps) - loss_at(0.5 - eps)) / (2 * eps);
    EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8), 1e-6);
}

TEST(BlockGradients, CentralDifferenceAgreement) {
    std::mt19937_64 rng(12);
    const std::vector<GradCheckInput> dsd_in{{rand_t({1, 3, 6, 6}, rng), true},
                                             {rand_t({3, 1, 3, 3}, rng), true},
                                             {rand_t({4, 3, 1, 1}, rng), true},
                                             {rand_t({1, 4, 1, 1}, rng), true}};
    const double dsd_err = grad_check(
        [](Graph&, std::span<const Var> v) {
            return dsd_forward(DepthwiseSeparableDilatedBlock{v[1], v[2], v[3], 2, 1}, v[0]);
        },
        dsd_in);
    EXPECT_LT(dsd_err, 1e-4);

    const std::vector<GradCheckInput> sa_in{{rand_t({2, 3, 5, 5}, rng), true},
                                            {rand_t({3, 1, 3, 3}, rng), true},
                                            {rand_t({1, 3, 1, 1}, rng), true},
                                            {rand_t({1, 1, 1, 1}, rng), true}};
    const double sa_err = grad_check(
        [](Graph&, std::span<const Var> v) {
            return spatial_attention_forward(SinglePathSpatialAttention{v[1], v[2], v[3]}, v[0]).out;
        },
        sa_in);
    EXPECT_LT(sa_err, 1e-4);

    std::vector<GradCheckInput> br_in{{rand_t({2, 4, 4, 4}, rng), true}};
    for (Shape s : std::vector<Shape>{{2, 8, 1, 1}, {1, 2, 1, 1}, {8, 2, 1, 1}, {1, 8, 1, 1}, {1, 1, 1, 1},
                                      {1, 1, 1, 1}, {4, 1, 3, 3}, {1, 4, 1, 1}, {1, 1, 1, 1}, {8, 4, 1, 1},
                                      {1, 8, 1, 1}, {4, 8, 1, 1}, {1, 4, 1, 1}}) {
        br_in.push_back({rand_t(s, rng), true});
    }
    const double br_err = grad_check(
        [](Graph&, std::span<const Var> v) {
            SharedAttentionBridge b{v[1], v[2], v[3], v[4], v[5], v[6], {}};
            b.stages.push_back({{v[7], v[8], v[9]}, v[10], v[11], v[12], v[13]});
            return bridge_forward(b, 0, v[0]).out;
        },
        br_in);
    EXPECT_LT(br_err, 1e-4);
}

TEST(AttentionExport, PgmRoundTrip) {
    Tensor attn({1, 1, 2, 3});
    attn.data() << 0.0, 0.25, 0.5, 0.75, 1.0, 0.1;
    const auto path = std::filesystem::temp_directory_path() / "maunet_attn_test.pgm";
    save_attention_pgm(attn, 0, path);
    const GrayImage img = read_pgm(path);
    ASSERT_EQ(img.width, 3);
    ASSERT_EQ(img.height, 2);
    const std::vector<std::uint8_t> expected{0, 64, 128, 191, 255, 26};
    EXPECT_EQ(img.pixels, expected);
    std::filesystem::remove(path);
}
