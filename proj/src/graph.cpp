#include "maunet/graph.hpp"

#include "maunet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace maunet {

std::string_view op_name(OpTag tag) {
    switch (tag) {
        case OpTag::leaf: return "leaf";
        case OpTag::conv2d: return "conv2d";
        case OpTag::depthwise_conv2d: return "depthwise_conv2d";
        case OpTag::pointwise_conv2d: return "pointwise_conv2d";
        case OpTag::gelu: return "gelu";
        case OpTag::sigmoid: return "sigmoid";
        case OpTag::add: return "add";
        case OpTag::sub: return "sub";
        case OpTag::mul: return "mul";
        case OpTag::scale: return "scale";
        case OpTag::sum: return "sum";
        case OpTag::mean: return "mean";
        case OpTag::global_avg_pool: return "global_avg_pool";
        case OpTag::fully_connected: return "fully_connected";
        case OpTag::softmax_channels: return "softmax_channels";
        case OpTag::log_softmax_channels: return "log_softmax_channels";
        case OpTag::upsample_nearest2x: return "upsample_nearest2x";
        case OpTag::l2_normalize_channels: return "l2_normalize_channels";
        case OpTag::bce_with_logits: return "bce_with_logits";
        case OpTag::soft_dice_loss: return "soft_dice_loss";
        case OpTag::bernoulli_kl: return "bernoulli_kl";
        case OpTag::squared_error_mean: return "squared_error_mean";
        case OpTag::mean_square: return "mean_square";
        case OpTag::info_nce: return "info_nce";
        case OpTag::gradient_probe: return "gradient_probe";
    }
    return "unknown";
}

const Tensor& Var::value() const {
    if (!graph_) throw GraphError("use of an unbound Var");
    return graph_->value(id_);
}

const Eigen::ArrayXd& Var::grad() const {
    if (!graph_) throw GraphError("use of an unbound Var");
    return graph_->grad(id_);
}

const Graph::Node& Graph::node(int id) const {
    if (id < 0 || id >= size()) throw GraphError("node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
}

Graph::Node& Graph::node(int id) {
    if (id < 0 || id >= size()) throw GraphError("node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    value.check_finite("leaf");
    value.drop_grad();
    nodes_.push_back(Node{OpTag::leaf, {}, std::move(value), nullptr, requires_grad});
    return Var(this, size() - 1);
}

Var Graph::record(OpTag tag, std::vector<int> inputs, Tensor value, BackwardFn backward) {
    const int self = size();
    bool needs_grad = false;
    for (int in : inputs) {
        if (in < 0 || in >= self) throw GraphError("op input must precede its output");
        needs_grad = needs_grad || node(in).requires_grad;
    }
    value.check_finite(op_name(tag));
    value.drop_grad();
    if (!needs_grad) backward = nullptr;
    nodes_.push_back(Node{tag, std::move(inputs), std::move(value), std::move(backward), needs_grad});
    return Var(this, self);
}

Eigen::ArrayXd* Graph::grad_sink(int id) {
    Node& n = node(id);
    if (!n.requires_grad) return nullptr;
    return &n.value.grad();
}

const Eigen::ArrayXd& Graph::grad(int id) const { return node(id).value.grad(); }

void Graph::backward(const Var& loss) {
    if (loss.graph() != this) throw GraphError("loss belongs to another graph");
    if (value(loss.id()).size() != 1) {
        throw GraphError("backward requires a scalar loss, got " + to_string(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) n.value.drop_grad();
    if (!node(loss.id()).requires_grad) throw GraphError("loss does not depend on any differentiable leaf");

    node(loss.id()).value.grad()[0] = 1.0;
    for (int id = loss.id(); id >= 0; --id) {
        Node& n = node(id);
        if (observer_) observer_(id);
        if (!n.requires_grad || !n.value.has_grad() || !n.backward) continue;
        n.backward(*this, id);
    }
    for (auto& n : nodes_) {
        if (n.tag != OpTag::leaf || !n.requires_grad) continue;
        if (!n.value.has_grad()) n.value.zero_grad();
        if (!n.value.grad().isFinite().all()) throw NumericError("non-finite gradient at a leaf");
    }
}

namespace {

// Scalarizes an op output with a fixed positive random projection so every
// output element contributes to the checked gradient.
Eigen::ArrayXd projection_weights(std::size_t size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    Eigen::ArrayXd r(static_cast<Eigen::Index>(size));
    for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = dist(rng);
    return r;
}

double evaluate(const GradCheckFn& op, const std::vector<Tensor>& values, std::uint64_t seed) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) vars.push_back(g.leaf(values[i], false));
    const Tensor& out = op(g, vars).value();
    if (out.size() == 1) return out.item();
    return (out.data() * projection_weights(out.size(), seed)).sum();
}

}  // namespace

double grad_check(const GradCheckFn& op, std::span<const GradCheckInput> inputs,
                  const GradCheckOptions& options) {
    if (!(options.eps >= 1e-6 && options.eps <= 1e-3)) throw DomainError("grad_check eps must lie in [1e-6, 1e-3]");

    Graph g;
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(g.leaf(in.value, in.differentiable));
    Var out = op(g, vars);
    Var loss = out;
    if (out.value().size() != 1) {
        Tensor w(out.shape(), projection_weights(out.value().size(), options.seed));
        const int out_id = out.id();
        const int w_id = g.constant(std::move(w)).id();
        Tensor s = Tensor::scalar((out.value().data() * g.value(w_id).data()).sum());
        loss = g.record(OpTag::sum, {out_id, w_id}, std::move(s), [out_id, w_id](Graph& gr, int self) {
            if (auto* sink = gr.grad_sink(out_id)) *sink += gr.grad(self)[0] * gr.value(w_id).data();
        });
    }
    g.backward(loss);

    std::vector<Tensor> values;
    for (const auto& in : inputs) values.push_back(in.value);

    double worst = 0.0;
    std::mt19937_64 pick(options.seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].differentiable) continue;
        const Eigen::ArrayXd analytic = vars[i].grad();
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(analytic.size()));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        if (options.max_elements > 0 && idx.size() > options.max_elements) {
            std::shuffle(idx.begin(), idx.end(), pick);
            idx.resize(options.max_elements);
            std::sort(idx.begin(), idx.end());
        }
        for (Eigen::Index k : idx) {
            const double orig = values[i].data()[k];
            values[i].data()[k] = orig + options.eps;
            const double fp = evaluate(op, values, options.seed);
            values[i].data()[k] = orig - options.eps;
            const double fm = evaluate(op, values, options.seed);
            values[i].data()[k] = orig;
            const double numeric = (fp - fm) / (2.0 * options.eps);
            const double a = analytic[k];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace maunet
