#include "maunet/gradcheck_suite.hpp"

#include "maunet/blocks.hpp"
#include "maunet/losses.hpp"

#include <random>

namespace maunet {

namespace {

struct Case {
    std::string name;
    std::string group;
    GradCheckFn fn;
    std::vector<GradCheckInput> inputs;
};

class Inputs {
public:
    explicit Inputs(std::uint64_t seed) : rng_(seed) {}

    GradCheckInput random(Shape s, double lo = -1.0, double hi = 1.0) {
        return {Tensor::uniform(s, lo, hi, rng_), true};
    }
    GradCheckInput binary(Shape s) {
        Tensor t(s);
        std::bernoulli_distribution coin(0.4);
        for (Eigen::Index i = 0; i < t.data().size(); ++i) t.data()(i) = coin(rng_) ? 1.0 : 0.0;
        return {t, false};
    }
    Tensor tensor(Shape s) { return Tensor::uniform(s, -1.0, 1.0, rng_); }

private:
    std::mt19937_64 rng_;
};

std::vector<Case> op_cases(Inputs& in, double corrupt) {
    const Shape x{2, 3, 4, 4};
    std::vector<Case> c;
    c.push_back({"conv2d", "op",
                 [corrupt](Graph&, std::span<const Var> v) {
                     return gradient_probe(conv2d(v[0], v[1], v[2], {1, 1, 1}), corrupt);
                 },
                 {in.random(x), in.random({2, 3, 3, 3}), in.random({1, 2, 1, 1})}});
    c.push_back({"conv2d_strided_dilated", "op",
                 [](Graph&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], {2, 2, 2}); },
                 {in.random(x), in.random({2, 3, 3, 3}), in.random({1, 2, 1, 1})}});
    c.push_back({"depthwise_conv2d", "op",
                 [](Graph&, std::span<const Var> v) { return depthwise_conv2d(v[0], v[1], {1, 2, 2}); },
                 {in.random(x), in.random({3, 1, 3, 3})}});
    c.push_back({"pointwise_conv2d", "op",
                 [](Graph&, std::span<const Var> v) { return pointwise_conv2d(v[0], v[1], v[2]); },
                 {in.random(x), in.random({4, 3, 1, 1}), in.random({1, 4, 1, 1})}});
    c.push_back({"gelu", "op", [](Graph&, std::span<const Var> v) { return gelu(v[0]); }, {in.random(x, -3, 3)}});
    c.push_back({"sigmoid", "op", [](Graph&, std::span<const Var> v) { return sigmoid(v[0]); }, {in.random(x, -3, 3)}});
    c.push_back({"add", "op", [](Graph&, std::span<const Var> v) { return add(v[0], v[1]); },
                 {in.random(x), in.random({2, 1, 4, 4})}});
    c.push_back({"sub", "op", [](Graph&, std::span<const Var> v) { return sub(v[0], v[1]); },
                 {in.random(x), in.random(x)}});
    c.push_back({"mul", "op", [](Graph&, std::span<const Var> v) { return mul(v[0], v[1]); },
                 {in.random(x), in.random({1, 3, 1, 1})}});
    c.push_back({"scale", "op", [](Graph&, std::span<const Var> v) { return scale(v[0], -1.7); }, {in.random(x)}});
    c.push_back({"sum", "op", [](Graph&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, {in.random(x)}});
    c.push_back({"mean", "op", [](Graph&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {in.random(x)}});
    c.push_back({"global_avg_pool", "op", [](Graph&, std::span<const Var> v) { return global_avg_pool(v[0]); },
                 {in.random(x)}});
    c.push_back({"fully_connected", "op",
                 [](Graph&, std::span<const Var> v) { return fully_connected(v[0], v[1], v[2]); },
                 {in.random({2, 3, 1, 1}), in.random({5, 3, 1, 1}), in.random({1, 5, 1, 1})}});
    c.push_back({"softmax_channels", "op", [](Graph&, std::span<const Var> v) { return softmax_channels(v[0]); },
                 {in.random(x, -2, 2)}});
    c.push_back({"log_softmax_channels", "op",
                 [](Graph&, std::span<const Var> v) { return log_softmax_channels(v[0]); }, {in.random(x, -2, 2)}});
    c.push_back({"upsample_nearest2x", "op", [](Graph&, std::span<const Var> v) { return upsample_nearest2x(v[0]); },
                 {in.random(x)}});
    c.push_back({"l2_normalize_channels", "op",
                 [](Graph&, std::span<const Var> v) { return l2_normalize_channels(v[0]); }, {in.random(x)}});
    c.push_back({"gradient_probe", "op", [](Graph&, std::span<const Var> v) { return gradient_probe(v[0], 1.0); },
                 {in.random(x)}});
    return c;
}

std::vector<Case> block_cases(Inputs& in) {
    std::vector<Case> c;
    c.push_back({"dsd_block", "block",
                 [](Graph&, std::span<const Var> v) {
                     return dsd_forward(DepthwiseSeparableDilatedBlock{v[1], v[2], v[3], 2, 1}, v[0]);
                 },
                 {in.random({2, 3, 5, 5}), in.random({3, 1, 3, 3}), in.random({4, 3, 1, 1}), in.random({1, 4, 1, 1})}});
    c.push_back({"spatial_attention", "block",
                 [](Graph&, std::span<const Var> v) {
                     return spatial_attention_forward(SinglePathSpatialAttention{v[1], v[2], v[3]}, v[0]).out;
                 },
                 {in.random({2, 3, 5, 5}), in.random({3, 1, 3, 3}), in.random({1, 3, 1, 1}), in.random({1, 1, 1, 1})}});
    std::vector<GradCheckInput> bridge{in.random({2, 4, 4, 4})};
    for (Shape s : std::vector<Shape>{{2, 8, 1, 1}, {1, 2, 1, 1}, {8, 2, 1, 1}, {1, 8, 1, 1}, {1, 1, 1, 1},
                                      {1, 1, 1, 1}, {4, 1, 3, 3}, {1, 4, 1, 1}, {1, 1, 1, 1}, {8, 4, 1, 1},
                                      {1, 8, 1, 1}, {4, 8, 1, 1}, {1, 4, 1, 1}}) {
        bridge.push_back(in.random(s));
    }
    c.push_back({"shared_attention_bridge", "block",
                 [](Graph&, std::span<const Var> v) {
                     SharedAttentionBridge b{v[1], v[2], v[3], v[4], v[5], v[6], {}};
                     b.stages.push_back({{v[7], v[8], v[9]}, v[10], v[11], v[12], v[13]});
                     return bridge_forward(b, 0, v[0]).out;
                 },
                 bridge});
    return c;
}

std::vector<Case> loss_cases(Inputs& in) {
    const Shape s{2, 1, 4, 4};
    std::vector<Case> c;
    c.push_back({"bce_with_logits", "loss",
                 [](Graph& g, std::span<const Var> v) { return bce_with_logits(v[0], g.value(v[1].id())); },
                 {in.random(s, -3, 3), in.binary(s)}});
    c.push_back({"soft_dice_loss", "loss",
                 [](Graph& g, std::span<const Var> v) { return soft_dice_loss(v[0], g.value(v[1].id())); },
                 {in.random(s, -3, 3), in.binary(s)}});
    c.push_back({"seg_loss", "loss", [](Graph& g, std::span<const Var> v) { return seg_loss(v[0], g.value(v[1].id())); },
                 {in.random(s, -3, 3), in.binary(s)}});
    const Tensor teacher = in.tensor(s);
    c.push_back({"bernoulli_kl", "loss",
                 [teacher](Graph&, std::span<const Var> v) { return bernoulli_kl(teacher, v[0], 2.0); },
                 {in.random(s, -3, 3)}});
    const std::vector<Tensor> targets{in.tensor({2, 3, 4, 4}), in.tensor({2, 5, 2, 2})};
    c.push_back({"mimic_loss", "loss",
                 [targets](Graph&, std::span<const Var> v) {
                     const std::vector<Var> taps{v[0], v[1]};
                     const std::vector<double> lambda{0.2, 0.7};
                     return mimic_loss(taps, targets, lambda);
                 },
                 {in.random({2, 3, 4, 4}), in.random({2, 5, 2, 2})}});
    c.push_back({"mean_square", "loss",
                 [](Graph&, std::span<const Var> v) {
                     const std::vector<Var> params{v[0], v[1]};
                     return mean_square(params);
                 },
                 {in.random({3, 2, 3, 3}), in.random({1, 4, 1, 1})}});
    Tensor pos(s), neg(s);
    for (int i = 0; i < 32; ++i) {
        if (i % 3 == 0) pos.data()(i) = 1.0;
        if (i % 3 == 1) neg.data()(i) = 1.0;
    }
    c.push_back({"contrastive_loss", "loss",
                 [pos, neg](Graph&, std::span<const Var> v) { return contrastive_loss(v[0], pos, neg, 0.5).loss; },
                 {in.random({2, 3, 4, 4})}});
    return c;
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed, double corrupt_factor) {
    Inputs in(seed);
    std::vector<Case> cases = op_cases(in, corrupt_factor);
    for (auto* more : {&block_cases, &loss_cases}) {
        for (Case& c : (*more)(in)) cases.push_back(std::move(c));
    }

    std::vector<GradCheckRow> rows;
    for (const Case& c : cases) {
        GradCheckOptions opt;
        opt.seed = seed;
        rows.push_back({c.name, c.group, grad_check(c.fn, c.inputs, opt)});
    }
    return rows;
}

}  // namespace maunet
