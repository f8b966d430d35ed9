#pragma once

#include "maunet/model.hpp"

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace maunet {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// A pixel is predicted positive when prob >= threshold.
ConfusionCounts confusion(const Tensor& pred_probs, const Tensor& mask, double threshold = 0.5);

struct SegMetrics {
    double dice = 0.0;
    double iou = 0.0;
    double acc = 0.0;
    double spe = 0.0;
    double sen = 0.0;
};

/// A ratio whose denominator is zero describes a case with nothing to get
/// wrong (e.g. no positives and no predictions) and is reported as 1.0.
SegMetrics metrics(const ConfusionCounts& c);

/// Arithmetic mean of each field. Throws EmptyError on an empty list.
SegMetrics mean_metrics(const std::vector<SegMetrics>& per_image);

/// Per-image metrics for every sample of a [N,1,H,W] batch.
std::vector<SegMetrics> per_image_metrics(const Tensor& pred_probs, const Tensor& mask, double threshold = 0.5);

struct ComplexityRow {
    std::string name;
    std::string kind;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
    std::uint64_t elementwise = 0;  // attention elementwise ops, one FLOP each

    std::uint64_t flops() const { return 2 * macs + elementwise; }
};

struct ComplexityReport {
    std::string plan_name;
    int resolution = 0;
    std::vector<ComplexityRow> rows;
    std::uint64_t total_params = 0;
    std::uint64_t total_macs = 0;
    std::uint64_t total_elementwise = 0;

    std::uint64_t total_flops() const { return 2 * total_macs + total_elementwise; }
    double gflops() const { return static_cast<double>(total_flops()) * 1e-9; }
};

/// Cost of one layer given its input extent (square maps).
ComplexityRow analyze_layer(const LayerSpec& layer, int extent_in, int bridge_width, const std::string& name);

/// Walks the plan at `resolution`. The shared bridge weights are one row.
/// Throws ConfigError if the plan is invalid at that resolution.
ComplexityReport analyze(const NetworkPlan& plan, int resolution);

void write_report_text(std::ostream& out, const ComplexityReport& report);
void write_report_csv(std::ostream& out, const ComplexityReport& report);

}  // namespace maunet
