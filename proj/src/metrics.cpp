#include "maunet/metrics.hpp"

#include "maunet/errors.hpp"

#include <algorithm>
#include <iomanip>

namespace maunet {

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return 1.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(const Tensor& pred_probs, const Tensor& mask, double threshold) {
    if (!(pred_probs.shape() == mask.shape())) {
        throw ShapeError("confusion: " + to_string(pred_probs.shape()) + " vs " + to_string(mask.shape()));
    }
    ConfusionCounts c;
    const Eigen::ArrayXd& p = pred_probs.data();
    const Eigen::ArrayXd& m = mask.data();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const bool pred = p[i] >= threshold;
        const bool truth = m[i] >= 0.5;
        if (pred && truth) ++c.tp;
        else if (pred) ++c.fp;
        else if (truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

SegMetrics metrics(const ConfusionCounts& c) {
    SegMetrics m;
    m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    m.acc = ratio(c.tp + c.tn, c.total());
    m.spe = ratio(c.tn, c.tn + c.fp);
    m.sen = ratio(c.tp, c.tp + c.fn);
    return m;
}

SegMetrics mean_metrics(const std::vector<SegMetrics>& per_image) {
    if (per_image.empty()) throw EmptyError("mean_metrics of an empty list");
    SegMetrics sum;
    for (const auto& m : per_image) {
        sum.dice += m.dice;
        sum.iou += m.iou;
        sum.acc += m.acc;
        sum.spe += m.spe;
        sum.sen += m.sen;
    }
    const auto n = static_cast<double>(per_image.size());
    return {sum.dice / n, sum.iou / n, sum.acc / n, sum.spe / n, sum.sen / n};
}

std::vector<SegMetrics> per_image_metrics(const Tensor& pred_probs, const Tensor& mask, double threshold) {
    if (!(pred_probs.shape() == mask.shape())) throw ShapeError("per_image_metrics: shape mismatch");
    std::vector<SegMetrics> out;
    for (int n = 0; n < pred_probs.shape().n; ++n) {
        out.push_back(metrics(confusion(pred_probs.slice_batch(n), mask.slice_batch(n), threshold)));
    }
    return out;
}

ComplexityRow analyze_layer(const LayerSpec& s, int extent_in, int bridge_width, const std::string& name) {
    using u64 = std::uint64_t;
    ComplexityRow r{name, std::string(layer_kind_name(s.kind)), 0, 0, 0};
    const u64 k2 = static_cast<u64>(s.k) * s.k;
    const u64 cin = static_cast<u64>(s.c_in);
    const u64 cout = static_cast<u64>(s.c_out);
    const u64 hw_in = static_cast<u64>(extent_in) * extent_in;
    // Spatial gate core on a C x HW map: dw 3x3 + 1x1 to one channel,
    // then GELU (C*HW) and sigmoid (HW).
    auto spatial_gate = [&](ComplexityRow& row) {
        row.params += 9 * cin + cin + 1;
        row.macs += 9 * cin * hw_in + cin * hw_in;
        row.elementwise += cin * hw_in + hw_in;
    };
    switch (s.kind) {
        case LayerKind::dsd_conv: {
            const u64 e = static_cast<u64>(extent_in / s.stride);
            r.params = k2 * cin + cin * cout + cout;
            r.macs = k2 * cin * e * e + cin * cout * e * e;
            break;
        }
        case LayerKind::plain_conv: {
            const u64 e = static_cast<u64>(extent_in / s.stride);
            r.params = k2 * cin * cout + cout;
            r.macs = k2 * cin * cout * e * e;
            break;
        }
        case LayerKind::spatial_attn:
            spatial_gate(r);
            r.elementwise += 2 * cin * hw_in;  // gate product, residual add
            break;
        case LayerKind::bridge_stage: {
            const u64 w = static_cast<u64>(bridge_width);
            const u64 hidden = w / 4;
            spatial_gate(r);
            r.params += w * cin + w + cin * w + cin;
            r.macs += cin * w + w * hidden + hidden * w + w * cin;
            // GAP (C*HW), GELU (hidden), sigmoid (C), alpha*A_c (C), beta*A_s (HW),
            // gate sum (C*HW), gate product (C*HW), residual add (C*HW)
            r.elementwise += cin * hw_in + hidden + cin + cin + hw_in + 3 * cin * hw_in;
            break;
        }
        case LayerKind::downsample: {
            const u64 e = static_cast<u64>(extent_in / 2);
            r.params = k2 * cin;
            r.macs = k2 * cin * e * e;
            break;
        }
        case LayerKind::upsample: {
            const u64 e = static_cast<u64>(extent_in) * 2;
            r.params = cin * cout + cout;
            r.macs = cin * cout * e * e;
            break;
        }
        case LayerKind::output_head:
            r.params = cin * cout + cout;
            r.macs = cin * cout * hw_in;
            break;
    }
    return r;
}

ComplexityReport analyze(const NetworkPlan& plan, int resolution) {
    NetworkPlan at = plan;
    at.resolution = resolution;
    validate(at);

    ComplexityReport rep;
    rep.plan_name = plan.name;
    rep.resolution = resolution;
    int extent = resolution;
    auto walk = [&](const std::vector<std::vector<LayerSpec>>& stages, const char* prefix) {
        for (std::size_t i = 0; i < stages.size(); ++i)
            for (std::size_t j = 0; j < stages[i].size(); ++j) {
                const LayerSpec& s = stages[i][j];
                const std::string name = prefix + std::to_string(i + 1) + "." + std::to_string(j);
                rep.rows.push_back(analyze_layer(s, extent, plan.bridge_width, name));
                if (s.kind == LayerKind::downsample) extent /= 2;
                else if (s.kind == LayerKind::upsample) extent *= 2;
                else if (s.kind == LayerKind::dsd_conv || s.kind == LayerKind::plain_conv) extent /= s.stride;
            }
    };
    walk(at.encoder, "enc");
    walk(at.decoder, "dec");
    rep.rows.push_back(analyze_layer(at.head, extent, at.bridge_width, "head"));
    if (bridge_stage_count(at) > 0) {
        const std::uint64_t w = static_cast<std::uint64_t>(at.bridge_width);
        const std::uint64_t hidden = w / 4;
        rep.rows.push_back({"bridge.shared", "shared_fc", w * hidden + hidden + hidden * w + w + 2, 0, 0});
    }
    for (const auto& r : rep.rows) {
        rep.total_params += r.params;
        rep.total_macs += r.macs;
        rep.total_elementwise += r.elementwise;
    }
    return rep;
}

void write_report_text(std::ostream& out, const ComplexityReport& rep) {
    out << "# plan=" << rep.plan_name << " resolution=" << rep.resolution << "x" << rep.resolution << "\n";
    out << "# FLOPs = 2 * MACs + attention elementwise ops\n";
    std::size_t width = 5;
    for (const auto& r : rep.rows) width = std::max(width, r.name.size());
    out << std::left << std::setw(static_cast<int>(width) + 2) << "layer" << std::setw(14) << "kind" << std::right
        << std::setw(12) << "params" << std::setw(14) << "macs" << std::setw(14) << "elementwise" << std::setw(14)
        << "flops" << "\n";
    for (const auto& r : rep.rows) {
        out << std::left << std::setw(static_cast<int>(width) + 2) << r.name << std::setw(14) << r.kind << std::right
            << std::setw(12) << r.params << std::setw(14) << r.macs << std::setw(14) << r.elementwise << std::setw(14)
            << r.flops() << "\n";
    }
    out << std::left << std::setw(static_cast<int>(width) + 2) << "total" << std::setw(14) << "" << std::right
        << std::setw(12) << rep.total_params << std::setw(14) << rep.total_macs << std::setw(14)
        << rep.total_elementwise << std::setw(14) << rep.total_flops() << "\n";
    out << "params(M)=" << std::fixed << std::setprecision(4) << static_cast<double>(rep.total_params) * 1e-6
        << " flops(G)=" << std::setprecision(4) << rep.gflops() << "\n";
    out.unsetf(std::ios::fixed);
}

void write_report_csv(std::ostream& out, const ComplexityReport& rep) {
    out << "layer,kind,params,macs,elementwise,flops\n";
    for (const auto& r : rep.rows) {
        out << r.name << "," << r.kind << "," << r.params << "," << r.macs << "," << r.elementwise << "," << r.flops()
            << "\n";
    }
    out << "total,," << rep.total_params << "," << rep.total_macs << "," << rep.total_elementwise << ","
        << rep.total_flops() << "\n";
}

}  // namespace maunet
