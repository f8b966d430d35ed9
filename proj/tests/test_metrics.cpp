#include "maunet/errors.hpp"
#include "maunet/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

using namespace maunet;

namespace {

Tensor random_binary(Shape s, std::mt19937_64& rng, double p = 0.3) {
    std::bernoulli_distribution d(p);
    Tensor t(s);
    for (Eigen::Index i = 0; i < t.data().size(); ++i) t.data()[i] = d(rng) ? 1.0 : 0.0;
    return t;
}

}  // namespace

TEST(Confusion, PerfectPrediction) {
    std::mt19937_64 rng(1);
    const Tensor m = random_binary({2, 1, 8, 8}, rng);
    const auto c = confusion(m, m);
    EXPECT_EQ(c.fp, 0u);
    EXPECT_EQ(c.fn, 0u);
    EXPECT_EQ(c.total(), 128u);
}

TEST(Confusion, AllOnesPredictionAgainstPixelCount) {
    Tensor mask({1, 1, 4, 4});
    mask.data()[1] = mask.data()[6] = mask.data()[15] = 1.0;
    const auto c = confusion(Tensor({1, 1, 4, 4}, 1.0), mask);
    EXPECT_EQ(c.tp, 3u);
    EXPECT_EQ(c.fp, 13u);
    EXPECT_EQ(c.fn, 0u);
    EXPECT_EQ(c.tn, 0u);
}

TEST(Confusion, MatchesPixelLoopOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor probs = Tensor::uniform({2, 1, 7, 9}, 0.0, 1.0, rng);
        const Tensor mask = random_binary({2, 1, 7, 9}, rng);
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (int n = 0; n < 2; ++n)
            for (int y = 0; y < 7; ++y)
                for (int x = 0; x < 9; ++x) {
                    const bool p = probs.at(n, 0, y, x) >= 0.5;
                    const bool t = mask.at(n, 0, y, x) == 1.0;
                    tp += p && t;
                    fp += p && !t;
                    fn += !p && t;
                    tn += !p && !t;
                }
        const auto c = confusion(probs, mask);
        EXPECT_EQ(c.tp, tp);
        EXPECT_EQ(c.fp, fp);
        EXPECT_EQ(c.fn, fn);
        EXPECT_EQ(c.tn, tn);
        EXPECT_EQ(c.total(), 126u);
    }
}

TEST(Confusion, RaisingThresholdNeverIncreasesTp) {
    std::mt19937_64 rng(3);
    const Tensor probs = Tensor::uniform({1, 1, 16, 16}, 0.0, 1.0, rng);
    const Tensor mask = random_binary({1, 1, 16, 16}, rng, 0.5);
    std::uint64_t prev = confusion(probs, mask, 0.0).tp;
    for (double t = 0.05; t <= 1.0; t += 0.05) {
        const std::uint64_t tp = confusion(probs, mask, t).tp;
        EXPECT_LE(tp, prev);
        prev = tp;
    }
    EXPECT_THROW(confusion(probs, Tensor({1, 1, 16, 15})), ShapeError);
}

TEST(Metrics, ArithmeticExample) {
    const SegMetrics m = metrics({2, 1, 1, 12});
    EXPECT_NEAR(m.dice, 4.0 / 6.0, 1e-15);
    EXPECT_NEAR(m.iou, 0.5, 1e-15);
    EXPECT_NEAR(m.acc, 0.875, 1e-15);
    EXPECT_NEAR(m.spe, 12.0 / 13.0, 1e-15);
    EXPECT_NEAR(m.sen, 2.0 / 3.0, 1e-15);
}

TEST(Metrics, PerfectAndVacuousCases) {
    std::mt19937_64 rng(4);
    Tensor mask = random_binary({1, 1, 8, 8}, rng);
    mask.data()[0] = 1.0;
    mask.data()[1] = 0.0;
    const SegMetrics p = metrics(confusion(mask, mask));
    for (double v : {p.dice, p.iou, p.acc, p.spe, p.sen}) EXPECT_EQ(v, 1.0);

    const Tensor empty({1, 1, 8, 8});
    const SegMetrics v = metrics(confusion(empty, empty));
    EXPECT_EQ(v.spe, 1.0);
    EXPECT_EQ(v.sen, 1.0);
    EXPECT_EQ(v.dice, 1.0);
    EXPECT_EQ(v.iou, 1.0);
    EXPECT_EQ(v.acc, 1.0);
}

TEST(Metrics, DiceDominatesIou) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor probs = random_binary({1, 1, 4, 4}, rng, 0.4);
        const Tensor mask = random_binary({1, 1, 4, 4}, rng, 0.4);
        const SegMetrics m = metrics(confusion(probs, mask));
        EXPECT_GE(m.dice, m.iou);
        const bool extreme = m.iou == 0.0 || m.iou == 1.0;
        EXPECT_EQ(m.dice == m.iou, extreme);
    }
}

TEST(MeanMetrics, AveragingContract) {
    SegMetrics a{0.8, 0.6, 0.9, 0.95, 0.7};
    SegMetrics b{0.6, 0.4, 0.7, 0.85, 0.5};
    const SegMetrics single = mean_metrics({a});
    EXPECT_EQ(single.dice, a.dice);
    EXPECT_EQ(single.sen, a.sen);
    EXPECT_NEAR(mean_metrics({a, b}).dice, 0.7, 1e-15);
    EXPECT_THROW(mean_metrics({}), EmptyError);

    std::mt19937_64 rng(6);
    std::vector<SegMetrics> list;
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int i = 0; i < 16; ++i) list.push_back({d(rng), d(rng), d(rng), d(rng), d(rng)});
    const SegMetrics ref = mean_metrics(list);
    std::shuffle(list.begin(), list.end(), rng);
    const SegMetrics shuffled = mean_metrics(list);
    EXPECT_NEAR(shuffled.dice, ref.dice, 1e-15);
    EXPECT_NEAR(shuffled.iou, ref.iou, 1e-15);
}

TEST(Complexity, SingleConvHandCount) {
    const LayerSpec conv{LayerKind::plain_conv, 3, 1, 1, 1, 1};
    const ComplexityRow r = analyze_layer(conv, 4, 16, "conv");
    EXPECT_EQ(r.macs, 144u);
    EXPECT_EQ(r.params, 10u);
    EXPECT_EQ(r.flops(), 288u);
}

TEST(Complexity, SeparableVersusDense) {
    const ComplexityRow sep = analyze_layer({LayerKind::dsd_conv, 3, 16, 16, 1, 1}, 8, 16, "sep");
    const ComplexityRow dense = analyze_layer({LayerKind::plain_conv, 3, 16, 16, 1, 1}, 8, 16, "dense");
    EXPECT_EQ(sep.params, 416u);
    EXPECT_EQ(dense.params, 2320u);
}

TEST(Complexity, AgreesWithBuiltModels) {
    for (const NetworkPlan& plan : {student_plan(), teacher_plan()}) {
        const ComplexityReport rep = analyze(plan, plan.resolution);
        const ModelParams params = init_params(plan, 1);
        EXPECT_EQ(rep.total_params, params.scalar_count()) << plan.name;
        std::uint64_t p = 0, m = 0, e = 0;
        for (const auto& r : rep.rows) {
            p += r.params;
            m += r.macs;
            e += r.elementwise;
        }
        EXPECT_EQ(p, rep.total_params);
        EXPECT_EQ(m, rep.total_macs);
        EXPECT_EQ(e, rep.total_elementwise);
        EXPECT_EQ(rep.total_flops(), 2 * m + e);
    }
}

TEST(Complexity, ResolutionScaling) {
    const NetworkPlan plan = student_plan();
    const ComplexityReport a = analyze(plan, 64);
    const ComplexityReport b = analyze(plan, 128);
    EXPECT_EQ(a.total_params, b.total_params);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        if (a.rows[i].kind == "dsd_conv" || a.rows[i].kind == "plain_conv" || a.rows[i].kind == "downsample") {
            EXPECT_EQ(b.rows[i].macs, 4 * a.rows[i].macs) << a.rows[i].name;
        }
    }
    EXPECT_THROW(analyze(plan, 40), ConfigError);
    const ComplexityReport big = analyze(plan, 256);
    RecordProperty("student_gflops_256", std::to_string(big.gflops()));
}

TEST(Complexity, ReportFormats) {
    const ComplexityReport rep = analyze(student_plan(), 64);
    std::ostringstream text, csv;
    write_report_text(text, rep);
    write_report_csv(csv, rep);
    EXPECT_NE(text.str().find("FLOPs = 2 * MACs"), std::string::npos);
    EXPECT_NE(text.str().find("bridge.shared"), std::string::npos);
    const std::string c = csv.str();
    EXPECT_EQ(c.rfind("layer,kind,params,macs,elementwise,flops\n", 0), 0u);
    EXPECT_EQ(static_cast<std::size_t>(std::count(c.begin(), c.end(), '\n')), rep.rows.size() + 2);
}
