#include "maunet/model.hpp"

#include "maunet/errors.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <random>

namespace maunet {

namespace {

constexpr std::array<int, 5> kWidthMultipliers{1, 2, 3, 4, 6};
constexpr std::array<int, 5> kTeacherWidening{1, 1, 2, 2, 2};
constexpr std::array<int, 5> kDilations{1, 1, 2, 2, 2};

struct KindName {
    LayerKind kind;
    std::string_view name;
};

constexpr std::array<KindName, 7> kKindNames{{{LayerKind::dsd_conv, "dsd_conv"},
                                              {LayerKind::plain_conv, "plain_conv"},
                                              {LayerKind::spatial_attn, "spatial_attn"},
                                              {LayerKind::bridge_stage, "bridge_stage"},
                                              {LayerKind::downsample, "downsample"},
                                              {LayerKind::upsample, "upsample"},
                                              {LayerKind::output_head, "output_head"}}};

std::string layer_path(const char* part, std::size_t stage, std::size_t layer) {
    return std::string(part) + std::to_string(stage + 1) + "." + std::to_string(layer) + ".";
}

void check_config(const ModelConfig& cfg) {
    if (cfg.depth < 1 || cfg.depth > 5) throw ConfigError("depth must lie in [1, 5]");
    if (cfg.base_width < 1 || cfg.in_channels < 1) throw ConfigError("widths must be positive");
    const int factor = 1 << (cfg.depth - 1);
    if (cfg.resolution < factor || cfg.resolution % factor != 0) {
        throw ConfigError("resolution " + std::to_string(cfg.resolution) + " is not divisible by " +
                          std::to_string(factor));
    }
}

LayerSpec conv_layer(LayerKind kind, int c_in, int c_out, int dilation) {
    return LayerSpec{kind, 3, c_in, c_out, dilation, 1};
}

LayerSpec same_width(LayerKind kind, int c) { return LayerSpec{kind, 3, c, c, 1, 1}; }

// Shared topology: encoder stages of [resample?, conv, extra?, spatial_attn],
// decoder stages of [upsample, conv, bridge_stage] with additive skips.
NetworkPlan make_plan(const ModelConfig& cfg, std::string name, LayerKind conv, const std::vector<int>& widths,
                      const std::vector<int>& extra_conv_stages, int bridge_width) {
    check_config(cfg);
    NetworkPlan plan;
    plan.name = std::move(name);
    plan.in_channels = cfg.in_channels;
    plan.resolution = cfg.resolution;
    plan.bridge_width = bridge_width;
    const int depth = cfg.depth;
    for (int l = 0; l < depth; ++l) {
        std::vector<LayerSpec> stage;
        const int c_prev = l == 0 ? cfg.in_channels : widths[static_cast<std::size_t>(l - 1)];
        const int c = widths[static_cast<std::size_t>(l)];
        if (l > 0) stage.push_back(LayerSpec{LayerKind::downsample, 3, c_prev, c_prev, 1, 2});
        stage.push_back(conv_layer(conv, c_prev, c, kDilations[static_cast<std::size_t>(l)]));
        for (int extra : extra_conv_stages) {
            if (extra == l) stage.push_back(conv_layer(conv, c, c, kDilations[static_cast<std::size_t>(l)]));
        }
        stage.push_back(same_width(LayerKind::spatial_attn, c));
        plan.encoder.push_back(std::move(stage));
        plan.taps.push_back(l);
    }
    for (int l = depth - 2; l >= 0; --l) {
        const int c = widths[static_cast<std::size_t>(l)];
        const int c_deeper = widths[static_cast<std::size_t>(l + 1)];
        plan.decoder.push_back({LayerSpec{LayerKind::upsample, 1, c_deeper, c, 1, 1}, conv_layer(conv, c, c, 1),
                                same_width(LayerKind::bridge_stage, c)});
        plan.skip_from.push_back(l);
    }
    plan.head = LayerSpec{LayerKind::output_head, 1, widths[0], 1, 1, 1};
    validate(plan);
    return plan;
}

[[noreturn]] void fail(const std::string& where, const std::string& what) { throw ConfigError(where + ": " + what); }

// Shape bookkeeping for one layer; returns the output (channels, extent).
std::pair<int, int> flow(const LayerSpec& s, int c, int extent, const std::string& where) {
    if (s.k < 1 || s.k % 2 == 0) fail(where, "kernel must be odd and positive");
    if (s.dilation < 1) fail(where, "dilation must be >= 1");
    if (s.stride < 1) fail(where, "stride must be >= 1");
    if (s.c_in < 1 || s.c_out < 1) fail(where, "channel counts must be positive");
    if (s.c_in != c) fail(where, "expects " + std::to_string(s.c_in) + " input channels, receives " + std::to_string(c));
    switch (s.kind) {
        case LayerKind::dsd_conv:
        case LayerKind::plain_conv:
            if (s.stride != 1 && extent % s.stride != 0) fail(where, "extent not divisible by stride");
            return {s.c_out, extent / s.stride};
        case LayerKind::spatial_attn:
        case LayerKind::bridge_stage:
            if (s.c_out != s.c_in) fail(where, "attention layers keep the channel count");
            return {c, extent};
        case LayerKind::downsample:
            if (s.c_out != s.c_in || s.stride != 2 || s.k != 3) fail(where, "downsample is a 3x3 stride-2 depthwise layer");
            if (extent % 2 != 0) fail(where, "cannot halve odd extent " + std::to_string(extent));
            return {c, extent / 2};
        case LayerKind::upsample:
            if (s.k != 1 || s.stride != 1) fail(where, "upsample is nearest x2 followed by a 1x1 conv");
            return {s.c_out, extent * 2};
        case LayerKind::output_head:
            fail(where, "output_head may only appear as the plan head");
    }
    fail(where, "unknown layer kind");
}

void uniform_fill(Tensor& t, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < t.data().size(); ++i) t.data()[i] = dist(rng);
}

const Var& param(const ParamVars& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("missing parameter '" + name + "'");
    return it->second;
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
    for (const auto& kn : kKindNames)
        if (kn.kind == kind) return kn.name;
    return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
    for (const auto& kn : kKindNames)
        if (kn.name == name) return kn.kind;
    throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

void validate(const NetworkPlan& plan) {
    if (plan.in_channels < 1) fail(plan.name, "in_channels must be positive");
    if (plan.resolution < 1) fail(plan.name, "resolution must be positive");
    if (plan.encoder.empty()) fail(plan.name, "plan needs at least one encoder stage");
    if (plan.skip_from.size() != plan.decoder.size()) fail(plan.name, "skip_from needs one entry per decoder stage");

    int c = plan.in_channels;
    int extent = plan.resolution;
    std::vector<std::pair<int, int>> enc_out;
    for (std::size_t i = 0; i < plan.encoder.size(); ++i) {
        if (plan.encoder[i].empty()) fail(plan.name, "empty encoder stage " + std::to_string(i + 1));
        for (std::size_t j = 0; j < plan.encoder[i].size(); ++j) {
            const LayerSpec& s = plan.encoder[i][j];
            if (s.kind == LayerKind::bridge_stage) fail(layer_path("enc", i, j), "bridge stages belong to the decoder");
            std::tie(c, extent) = flow(s, c, extent, layer_path("enc", i, j));
        }
        enc_out.emplace_back(c, extent);
    }
    int bridges = 0;
    for (std::size_t i = 0; i < plan.decoder.size(); ++i) {
        if (plan.decoder[i].empty()) fail(plan.name, "empty decoder stage " + std::to_string(i + 1));
        for (std::size_t j = 0; j < plan.decoder[i].size(); ++j) {
            const std::string where = layer_path("dec", i, j);
            std::tie(c, extent) = flow(plan.decoder[i][j], c, extent, where);
            if (plan.decoder[i][j].kind == LayerKind::bridge_stage) ++bridges;
            if (j == 0 && plan.skip_from[i] >= 0) {
                const auto skip = static_cast<std::size_t>(plan.skip_from[i]);
                if (skip >= enc_out.size()) fail(where, "skip source out of range");
                if (enc_out[skip] != std::make_pair(c, extent)) {
                    fail(where, "skip from encoder stage " + std::to_string(skip + 1) +
                                    " has mismatched channels or extent");
                }
            }
        }
    }
    if (bridges > 0 && (plan.bridge_width < 4 || plan.bridge_width % 4 != 0)) {
        fail(plan.name, "bridge_width must be a positive multiple of 4");
    }
    const LayerSpec& h = plan.head;
    if (h.kind != LayerKind::output_head || h.k != 1 || h.c_out != 1 || h.c_in != c) {
        fail(plan.name + ".head", "head must be a 1x1 conv from " + std::to_string(c) + " channels to 1");
    }
    if (extent != plan.resolution) fail(plan.name, "decoder does not restore the input resolution");
    for (int t : plan.taps) {
        if (t < 0 || t >= static_cast<int>(plan.encoder.size())) fail(plan.name, "tap index out of range");
    }
}

int bridge_stage_count(const NetworkPlan& plan) {
    int n = 0;
    for (const auto& stage : plan.decoder)
        for (const auto& s : stage) n += s.kind == LayerKind::bridge_stage;
    return n;
}

NetworkPlan student_plan(const ModelConfig& cfg) {
    check_config(cfg);
    std::vector<int> widths;
    for (int l = 0; l < cfg.depth; ++l) widths.push_back(cfg.base_width * kWidthMultipliers[static_cast<std::size_t>(l)]);
    return make_plan(cfg, "student", LayerKind::dsd_conv, widths, {}, 2 * cfg.base_width);
}

NetworkPlan teacher_plan(const ModelConfig& cfg) {
    check_config(cfg);
    std::vector<int> widths;
    for (int l = 0; l < cfg.depth; ++l) {
        const auto i = static_cast<std::size_t>(l);
        widths.push_back(cfg.base_width * kWidthMultipliers[i] * kTeacherWidening[i]);
    }
    return make_plan(cfg, "teacher", LayerKind::plain_conv, widths, {2, 3}, 4 * cfg.base_width);
}

void ModelParams::insert(std::string name, Tensor value) {
    if (!tensors_.emplace(std::move(name), std::move(value)).second) throw ConfigError("duplicate parameter name");
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError("missing parameter '" + name + "'");
    return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError("missing parameter '" + name + "'");
    return it->second;
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
}

std::vector<std::string> ModelParams::names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors_) out.push_back(name);
    return out;
}

bool ModelParams::operator==(const ModelParams& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
        if (a->first != b->first || !(a->second.shape() == b->second.shape())) return false;
        if (!(a->second.data() == b->second.data()).all()) return false;
    }
    return true;
}

std::map<std::string, Shape> param_shapes(const NetworkPlan& plan) {
    std::map<std::string, Shape> shapes;
    auto add_layer = [&shapes, &plan](const LayerSpec& s, const std::string& p) {
        const int k = s.k;
        switch (s.kind) {
            case LayerKind::dsd_conv:
                shapes[p + "dw"] = {s.c_in, 1, k, k};
                shapes[p + "pw"] = {s.c_out, s.c_in, 1, 1};
                shapes[p + "pb"] = {1, s.c_out, 1, 1};
                break;
            case LayerKind::plain_conv:
                shapes[p + "w"] = {s.c_out, s.c_in, k, k};
                shapes[p + "b"] = {1, s.c_out, 1, 1};
                break;
            case LayerKind::spatial_attn:
                shapes[p + "dw"] = {s.c_in, 1, 3, 3};
                shapes[p + "w1x1"] = {1, s.c_in, 1, 1};
                shapes[p + "b1x1"] = {1, 1, 1, 1};
                break;
            case LayerKind::bridge_stage:
                shapes[p + "sa.dw"] = {s.c_in, 1, 3, 3};
                shapes[p + "sa.w1x1"] = {1, s.c_in, 1, 1};
                shapes[p + "sa.b1x1"] = {1, 1, 1, 1};
                shapes[p + "proj_in.w"] = {plan.bridge_width, s.c_in, 1, 1};
                shapes[p + "proj_in.b"] = {1, plan.bridge_width, 1, 1};
                shapes[p + "proj_out.w"] = {s.c_in, plan.bridge_width, 1, 1};
                shapes[p + "proj_out.b"] = {1, s.c_in, 1, 1};
                break;
            case LayerKind::downsample:
                shapes[p + "dw"] = {s.c_in, 1, k, k};
                break;
            case LayerKind::upsample:
            case LayerKind::output_head:
                shapes[p + "w"] = {s.c_out, s.c_in, 1, 1};
                shapes[p + "b"] = {1, s.c_out, 1, 1};
                break;
        }
    };
    for (std::size_t i = 0; i < plan.encoder.size(); ++i)
        for (std::size_t j = 0; j < plan.encoder[i].size(); ++j) add_layer(plan.encoder[i][j], layer_path("enc", i, j));
    for (std::size_t i = 0; i < plan.decoder.size(); ++i)
        for (std::size_t j = 0; j < plan.decoder[i].size(); ++j) add_layer(plan.decoder[i][j], layer_path("dec", i, j));
    add_layer(plan.head, "head.");
    if (bridge_stage_count(plan) > 0) {
        const int w = plan.bridge_width;
        const int hidden = w / 4;
        shapes["bridge.fc1.w"] = {hidden, w, 1, 1};
        shapes["bridge.fc1.b"] = {1, hidden, 1, 1};
        shapes["bridge.fc2.w"] = {w, hidden, 1, 1};
        shapes["bridge.fc2.b"] = {1, w, 1, 1};
        shapes["bridge.alpha"] = {1, 1, 1, 1};
        shapes["bridge.beta"] = {1, 1, 1, 1};
    }
    return shapes;
}

std::size_t param_count(const NetworkPlan& plan) {
    std::size_t n = 0;
    for (const auto& [name, s] : param_shapes(plan)) n += s.size();
    return n;
}

ModelParams init_params(const NetworkPlan& plan, std::uint64_t seed) {
    validate(plan);
    std::mt19937_64 rng(seed);
    ModelParams params;
    for (const auto& [name, shape] : param_shapes(plan)) {
        Tensor t(shape);
        const bool is_bias = name.ends_with(".b") || name.ends_with(".pb") || name.ends_with(".b1x1");
        if (name == "bridge.alpha" || name == "bridge.beta") {
            t.data().setConstant(0.5);
        } else if (!is_bias) {
            // Kaiming-uniform on fan-in with unit gain: variance 1 / fan_in.
            // Larger gains blow up through the unnormalised residual stack.
            const int fan_in = shape.c * shape.h * shape.w;
            uniform_fill(t, std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
        }
        params.insert(name, std::move(t));
    }
    return params;
}

std::pair<NetworkPlan, ModelParams> build_student(const ModelConfig& cfg, std::uint64_t seed) {
    NetworkPlan plan = student_plan(cfg);
    ModelParams params = init_params(plan, seed);
    return {std::move(plan), std::move(params)};
}

std::pair<NetworkPlan, ModelParams> build_teacher(const ModelConfig& cfg, std::uint64_t seed) {
    NetworkPlan plan = teacher_plan(cfg);
    ModelParams params = init_params(plan, seed);
    return {std::move(plan), std::move(params)};
}

ParamVars bind(Graph& g, const ModelParams& params, bool trainable) {
    ParamVars vars;
    for (const auto& [name, t] : params) vars.emplace(name, g.leaf(t, trainable));
    return vars;
}

ForwardResult forward(const NetworkPlan& plan, const ParamVars& params, const Var& x, const ForwardOptions& options) {
    const Shape xs = x.shape();
    if (xs.c != plan.in_channels || xs.h != plan.resolution || xs.w != plan.resolution) {
        throw ShapeError("network '" + plan.name + "' expects [N," + std::to_string(plan.in_channels) + "," +
                         std::to_string(plan.resolution) + "," + std::to_string(plan.resolution) + "], got " +
                         to_string(xs));
    }
    auto p = [&params](const std::string& name) { return param(params, name); };

    SharedAttentionBridge bridge;
    if (bridge_stage_count(plan) > 0) {
        bridge.fc1_w = p("bridge.fc1.w");
        bridge.fc1_b = p("bridge.fc1.b");
        bridge.fc2_w = p("bridge.fc2.w");
        bridge.fc2_b = p("bridge.fc2.b");
        bridge.alpha = p("bridge.alpha");
        bridge.beta = p("bridge.beta");
        for (std::size_t i = 0; i < plan.decoder.size(); ++i)
            for (std::size_t j = 0; j < plan.decoder[i].size(); ++j) {
                if (plan.decoder[i][j].kind != LayerKind::bridge_stage) continue;
                const std::string pre = layer_path("dec", i, j);
                bridge.stages.push_back({{p(pre + "sa.dw"), p(pre + "sa.w1x1"), p(pre + "sa.b1x1")},
                                         p(pre + "proj_in.w"), p(pre + "proj_in.b"), p(pre + "proj_out.w"),
                                         p(pre + "proj_out.b")});
            }
    }

    ForwardResult result;
    int bridge_index = 0;
    auto apply = [&](const LayerSpec& s, const std::string& pre, const Var& h) -> Var {
        switch (s.kind) {
            case LayerKind::dsd_conv: {
                DepthwiseSeparableDilatedBlock b{p(pre + "dw"), p(pre + "pw"), p(pre + "pb"), s.dilation, s.stride};
                return gelu(dsd_forward(b, h));
            }
            case LayerKind::plain_conv:
                return gelu(conv2d(h, p(pre + "w"), p(pre + "b"), {s.stride, same_padding(s.k, s.dilation), s.dilation}));
            case LayerKind::spatial_attn: {
                auto r = spatial_attention_forward({p(pre + "dw"), p(pre + "w1x1"), p(pre + "b1x1")}, h);
                if (options.want_attention) result.attention.emplace_back(pre + "attn", r.attn);
                return r.out;
            }
            case LayerKind::bridge_stage: {
                auto r = bridge_forward(bridge, bridge_index++, h);
                if (options.want_attention) result.attention.emplace_back(pre + "spatial", r.spatial_attn);
                return r.out;
            }
            case LayerKind::downsample:
                return depthwise_conv2d(h, p(pre + "dw"), {2, same_padding(s.k, 1), 1});
            case LayerKind::upsample:
                return pointwise_conv2d(upsample_nearest2x(h), p(pre + "w"), p(pre + "b"));
            case LayerKind::output_head:
                return pointwise_conv2d(h, p(pre + "w"), p(pre + "b"));
        }
        throw ConfigError("unknown layer kind");
    };

    Var h = x;
    std::vector<Var> enc_out;
    for (std::size_t i = 0; i < plan.encoder.size(); ++i) {
        for (std::size_t j = 0; j < plan.encoder[i].size(); ++j) h = apply(plan.encoder[i][j], layer_path("enc", i, j), h);
        enc_out.push_back(h);
    }
    for (std::size_t i = 0; i < plan.decoder.size(); ++i) {
        for (std::size_t j = 0; j < plan.decoder[i].size(); ++j) {
            h = apply(plan.decoder[i][j], layer_path("dec", i, j), h);
            if (j == 0 && plan.skip_from[i] >= 0) h = add(h, enc_out[static_cast<std::size_t>(plan.skip_from[i])]);
        }
    }
    result.embedding = h;
    result.logits = apply(plan.head, "head.", h);
    if (options.want_taps) {
        for (int t : plan.taps) result.taps.push_back(enc_out[static_cast<std::size_t>(t)]);
    }
    return result;
}

Inference forward(const NetworkPlan& plan, const ModelParams& params, const Tensor& x, bool want_taps) {
    Graph g;
    const ParamVars vars = bind(g, params, false);
    ForwardResult r = forward(plan, vars, g.leaf(x, false), {want_taps, false});
    Inference out{r.logits.value(), {}};
    for (const Var& t : r.taps) out.taps.push_back(t.value());
    return out;
}

Tensor project_channels(const Tensor& teacher, int channels) {
    const Shape s = teacher.shape();
    if (channels < 1 || s.c % channels != 0) {
        throw ShapeError("cannot group " + std::to_string(s.c) + " teacher channels into " + std::to_string(channels));
    }
    if (s.c == channels) return teacher;
    const int group = s.c / channels;
    Tensor out({s.n, channels, s.h, s.w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < channels; ++c) {
            auto dst = out.plane(n, c);
            for (int gi = 0; gi < group; ++gi) {
                const auto src = teacher.plane(n, c * group + gi);
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
            }
            for (double& v : dst) v /= group;
        }
    return out;
}

std::string plan_to_json(const NetworkPlan& plan) {
    using nlohmann::json;
    auto layer = [](const LayerSpec& s) {
        return json{{"kind", layer_kind_name(s.kind)}, {"k", s.k},           {"c_in", s.c_in},
                    {"c_out", s.c_out},                {"dilation", s.dilation}, {"stride", s.stride}};
    };
    auto stages = [&layer](const std::vector<std::vector<LayerSpec>>& in) {
        json arr = json::array();
        for (const auto& stage : in) {
            json st = json::array();
            for (const auto& s : stage) st.push_back(layer(s));
            arr.push_back(st);
        }
        return arr;
    };
    json j{{"name", plan.name},
           {"in_channels", plan.in_channels},
           {"resolution", plan.resolution},
           {"bridge_width", plan.bridge_width},
           {"encoder", stages(plan.encoder)},
           {"decoder", stages(plan.decoder)},
           {"skip_from", plan.skip_from},
           {"taps", plan.taps},
           {"head", layer(plan.head)}};
    return j.dump(2);
}

NetworkPlan plan_from_json(const std::string& text) {
    using nlohmann::json;
    NetworkPlan plan;
    try {
        const json j = json::parse(text);
        auto layer = [](const json& l) {
            LayerSpec s;
            s.kind = parse_layer_kind(l.at("kind").get<std::string>());
            s.k = l.value("k", s.kind == LayerKind::upsample || s.kind == LayerKind::output_head ? 1 : 3);
            s.c_in = l.at("c_in").get<int>();
            s.c_out = l.value("c_out", s.c_in);
            s.dilation = l.value("dilation", 1);
            s.stride = l.value("stride", s.kind == LayerKind::downsample ? 2 : 1);
            return s;
        };
        auto stages = [&layer](const json& arr) {
            std::vector<std::vector<LayerSpec>> out;
            for (const auto& st : arr) {
                std::vector<LayerSpec> stage;
                for (const auto& l : st) stage.push_back(layer(l));
                out.push_back(std::move(stage));
            }
            return out;
        };
        plan.name = j.value("name", std::string("custom"));
        plan.in_channels = j.value("in_channels", 3);
        plan.resolution = j.value("resolution", 64);
        plan.bridge_width = j.value("bridge_width", 16);
        plan.encoder = stages(j.at("encoder"));
        plan.decoder = stages(j.value("decoder", json::array()));
        if (j.contains("skip_from")) {
            plan.skip_from = j.at("skip_from").get<std::vector<int>>();
        } else {
            for (std::size_t i = 0; i < plan.decoder.size(); ++i) {
                plan.skip_from.push_back(static_cast<int>(plan.encoder.size()) - 2 - static_cast<int>(i));
            }
        }
        if (j.contains("taps")) {
            plan.taps = j.at("taps").get<std::vector<int>>();
        } else {
            for (std::size_t i = 0; i < plan.encoder.size(); ++i) plan.taps.push_back(static_cast<int>(i));
        }
        plan.head = layer(j.at("head"));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed plan JSON: ") + e.what());
    }
    validate(plan);
    return plan;
}

}  // namespace maunet
