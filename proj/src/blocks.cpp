#include "maunet/blocks.hpp"

#include "maunet/errors.hpp"
#include "maunet/image_io.hpp"

#include <algorithm>
#include <cmath>

namespace maunet {

std::size_t dsd_param_count(int k, int c, int c_out) {
    return static_cast<std::size_t>(k) * k * c + static_cast<std::size_t>(c) * c_out + c_out;
}

std::size_t dense_conv_param_count(int k, int c_in, int c_out) {
    return static_cast<std::size_t>(k) * k * c_in * c_out + c_out;
}

Var dsd_forward(const DepthwiseSeparableDilatedBlock& block, const Var& x) {
    if (x.shape().c != block.channels()) {
        throw ShapeError("dsd block expects " + std::to_string(block.channels()) + " channels, got " +
                         std::to_string(x.shape().c));
    }
    const ConvOptions opt{block.stride, same_padding(block.kernel(), block.dilation), block.dilation};
    return pointwise_conv2d(depthwise_conv2d(x, block.dw_weights, opt), block.pw_weights, block.pw_bias);
}

SpatialAttentionResult spatial_attention_forward(const SinglePathSpatialAttention& block, const Var& x,
                                                 std::optional<double> force_attn) {
    const Shape s = x.shape();
    if (s.c != block.dw_weights.shape().n) {
        throw ShapeError("spatial attention expects " + std::to_string(block.dw_weights.shape().n) +
                         " channels, got " + std::to_string(s.c));
    }
    Var attn;
    if (force_attn) {
        attn = x.graph()->constant(Tensor({s.n, 1, s.h, s.w}, *force_attn));
    } else {
        const int k = block.dw_weights.shape().h;
        Var h = gelu(depthwise_conv2d(x, block.dw_weights, {1, same_padding(k, 1), 1}));
        attn = sigmoid(pointwise_conv2d(h, block.w_1x1, block.b_1x1));
    }
    return {add(mul(attn, x), x), attn};
}

BridgeResult bridge_forward(const SharedAttentionBridge& bridge, int stage_index, const Var& t,
                            const BridgeOverrides& overrides) {
    if (stage_index < 0 || stage_index >= static_cast<int>(bridge.stages.size())) {
        throw IndexError("bridge stage " + std::to_string(stage_index) + " out of range [0, " +
                         std::to_string(bridge.stages.size()) + ")");
    }
    const BridgeStage& stage = bridge.stages[static_cast<std::size_t>(stage_index)];
    const Shape s = t.shape();
    if (s.c != stage.channels()) {
        throw ShapeError("bridge stage " + std::to_string(stage_index) + " expects " +
                         std::to_string(stage.channels()) + " channels, got " + std::to_string(s.c));
    }

    Var a_c;
    if (overrides.channel) {
        a_c = t.graph()->constant(Tensor({s.n, s.c, 1, 1}, *overrides.channel));
    } else {
        Var shared_in = fully_connected(global_avg_pool(t), stage.proj_in_w, stage.proj_in_b);
        Var hidden = gelu(fully_connected(shared_in, bridge.fc1_w, bridge.fc1_b));
        Var shared_out = fully_connected(hidden, bridge.fc2_w, bridge.fc2_b);
        a_c = sigmoid(fully_connected(shared_out, stage.proj_out_w, stage.proj_out_b));
    }
    Var a_s;
    if (overrides.spatial) {
        a_s = t.graph()->constant(Tensor({s.n, 1, s.h, s.w}, *overrides.spatial));
    } else {
        a_s = spatial_attention_forward(stage.spatial, t).attn;
    }
    Var gate = add(mul(bridge.alpha, a_c), mul(bridge.beta, a_s));
    return {add(mul(gate, t), t), a_c, a_s};
}

void save_attention_pgm(const Tensor& attn, int n, const std::filesystem::path& path) {
    const Shape s = attn.shape();
    if (s.c != 1 || n < 0 || n >= s.n) throw ShapeError("attention map must be [N,1,H,W]");
    GrayImage img{s.w, s.h, std::vector<std::uint8_t>(s.plane())};
    const auto plane = attn.plane(n, 0);
    for (std::size_t i = 0; i < plane.size(); ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(plane[i], 0.0, 1.0) * 255.0));
    }
    write_pgm(path, img);
}

}  // namespace maunet
