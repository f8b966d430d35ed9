#pragma once

#include "maunet/ops.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

namespace maunet {

/// Depthwise (dilated) KxK filtering followed by 1x1 channel fusion.
/// The block holds graph handles; the weights themselves live in ModelParams.
struct DepthwiseSeparableDilatedBlock {
    Var dw_weights;  // [C, 1, K, K]
    Var pw_weights;  // [C_out, C, 1, 1]
    Var pw_bias;     // [1, C_out, 1, 1]
    int dilation = 1;
    int stride = 1;

    int kernel() const { return dw_weights.shape().h; }
    int channels() const { return dw_weights.shape().n; }
    int out_channels() const { return pw_weights.shape().n; }
};

/// Spatial gate A = sigmoid(W_1x1 * GELU(DWConv(X)) + b), applied as A*X + X.
struct SinglePathSpatialAttention {
    Var dw_weights;  // [C, 1, 3, 3]
    Var w_1x1;       // [1, C, 1, 1]
    Var b_1x1;       // [1, 1, 1, 1]
};

/// Per-stage part of the bridge: its own spatial gate plus the projections
/// between the stage width and the shared channel-attention width.
struct BridgeStage {
    SinglePathSpatialAttention spatial;
    Var proj_in_w;   // [W, C, 1, 1]
    Var proj_in_b;   // [1, W, 1, 1]
    Var proj_out_w;  // [C, W, 1, 1]
    Var proj_out_b;  // [1, C, 1, 1]

    int channels() const { return proj_in_w.shape().c; }
};

/// Channel and spatial attention fused as (alpha*A_c + beta*A_s) * T + T.
/// fc1/fc2 are one set of handles reused by every stage.
struct SharedAttentionBridge {
    Var fc1_w, fc1_b;  // [H, W, 1, 1], [1, H, 1, 1]
    Var fc2_w, fc2_b;  // [W, H, 1, 1], [1, W, 1, 1]
    Var alpha;         // [1, 1, 1, 1]
    Var beta;          // [1, 1, 1, 1]
    std::vector<BridgeStage> stages;
};

struct SpatialAttentionResult {
    Var out;
    Var attn;  // [N, 1, H, W]
};

struct BridgeOverrides {
    std::optional<double> channel;  // force A_c to a constant
    std::optional<double> spatial;  // force A_s to a constant
};

struct BridgeResult {
    Var out;
    Var channel_attn;  // [N, C, 1, 1]
    Var spatial_attn;  // [N, 1, H, W]
};

std::size_t dsd_param_count(int k, int c, int c_out);
std::size_t dense_conv_param_count(int k, int c_in, int c_out);

/// Depthwise then pointwise; same padding, so extents only shrink by stride.
Var dsd_forward(const DepthwiseSeparableDilatedBlock& block, const Var& x);

/// `force_attn` replaces the computed gate by a constant map.
SpatialAttentionResult spatial_attention_forward(const SinglePathSpatialAttention& block, const Var& x,
                                                 std::optional<double> force_attn = std::nullopt);

BridgeResult bridge_forward(const SharedAttentionBridge& bridge, int stage_index, const Var& t,
                            const BridgeOverrides& overrides = {});

/// Writes sample `n` of an [N,1,H,W] map in (0,1) as an 8-bit PGM.
void save_attention_pgm(const Tensor& attn, int n, const std::filesystem::path& path);

}  // namespace maunet
