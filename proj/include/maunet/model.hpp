#pragma once

#include "maunet/blocks.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace maunet {

enum class LayerKind { dsd_conv, plain_conv, spatial_attn, bridge_stage, downsample, upsample, output_head };

std::string_view layer_kind_name(LayerKind kind);
/// Throws ConfigError for unknown names.
LayerKind parse_layer_kind(std::string_view name);

/// dsd_conv and plain_conv are followed by GELU; the other kinds are not.
struct LayerSpec {
    LayerKind kind = LayerKind::dsd_conv;
    int k = 3;
    int c_in = 0;
    int c_out = 0;
    int dilation = 1;
    int stride = 1;
};

struct NetworkPlan {
    std::string name;
    int in_channels = 3;
    int resolution = 64;
    int bridge_width = 16;  // common width of the shared channel-attention fc layers
    std::vector<std::vector<LayerSpec>> encoder;
    std::vector<std::vector<LayerSpec>> decoder;  // deepest first
    std::vector<int> skip_from;                   // per decoder stage: encoder stage added after its first layer, or -1
    std::vector<int> taps;                        // encoder stages whose outputs are distillation taps
    LayerSpec head;
};

/// Checks layer invariants, channel/extent flow, skip pairing and taps.
/// Throws ConfigError.
void validate(const NetworkPlan& plan);

/// Number of bridge_stage layers in the decoder.
int bridge_stage_count(const NetworkPlan& plan);

struct ModelConfig {
    int resolution = 64;
    int base_width = 8;
    int depth = 5;
    int in_channels = 3;
};

NetworkPlan student_plan(const ModelConfig& cfg = {});
NetworkPlan teacher_plan(const ModelConfig& cfg = {});

/// Named parameter tensors. Iteration is in name order.
class ModelParams {
public:
    using Map = std::map<std::string, Tensor>;

    void insert(std::string name, Tensor value);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    std::size_t size() const { return tensors_.size(); }
    std::size_t scalar_count() const;
    std::vector<std::string> names() const;

    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }
    Map::iterator begin() { return tensors_.begin(); }
    Map::iterator end() { return tensors_.end(); }

    bool operator==(const ModelParams& other) const;

private:
    Map tensors_;
};

/// Names and shapes of every parameter a plan needs, without values.
std::map<std::string, Shape> param_shapes(const NetworkPlan& plan);
std::size_t param_count(const NetworkPlan& plan);

/// Kaiming-uniform (bound sqrt(3/fan_in)) weights, zero biases, 0.5 for
/// the bridge mixing scalars.
ModelParams init_params(const NetworkPlan& plan, std::uint64_t seed);

std::pair<NetworkPlan, ModelParams> build_student(const ModelConfig& cfg, std::uint64_t seed);
std::pair<NetworkPlan, ModelParams> build_teacher(const ModelConfig& cfg, std::uint64_t seed);

using ParamVars = std::map<std::string, Var>;
ParamVars bind(Graph& g, const ModelParams& params, bool trainable);

struct ForwardOptions {
    bool want_taps = false;
    bool want_attention = false;
};

struct ForwardResult {
    Var logits;                                       // [N, 1, H, W], pre-sigmoid
    std::vector<Var> taps;                            // one per plan tap, shallow to deep
    Var embedding;                                    // features feeding the output head
    std::vector<std::pair<std::string, Var>> attention;  // spatial gates, keyed by layer path
};

/// Throws ShapeError when x does not match the plan's channels and resolution,
/// FormatError when a parameter is missing.
ForwardResult forward(const NetworkPlan& plan, const ParamVars& params, const Var& x,
                      const ForwardOptions& options = {});

/// Graph-free convenience: logits and taps as tensors.
struct Inference {
    Tensor logits;
    std::vector<Tensor> taps;
};
Inference forward(const NetworkPlan& plan, const ModelParams& params, const Tensor& x, bool want_taps);

/// Averages contiguous groups of teacher channels down to `channels`.
/// Identity when the widths already agree. Throws ShapeError if the teacher
/// width is not a multiple of `channels`.
Tensor project_channels(const Tensor& teacher, int channels);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Also checks that names and shapes match what `plan` expects.
ModelParams load_checkpoint(const std::filesystem::path& path, const NetworkPlan& plan);

std::string plan_to_json(const NetworkPlan& plan);
/// Throws ConfigError on malformed JSON, unknown layer kinds or invalid plans.
NetworkPlan plan_from_json(const std::string& text);

}  // namespace maunet
