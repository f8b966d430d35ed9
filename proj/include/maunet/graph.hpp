#pragma once

#include "maunet/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace maunet {

enum class OpTag {
    leaf,
    conv2d,
    depthwise_conv2d,
    pointwise_conv2d,
    gelu,
    sigmoid,
    add,
    sub,
    mul,
    scale,
    sum,
    mean,
    global_avg_pool,
    fully_connected,
    softmax_channels,
    log_softmax_channels,
    upsample_nearest2x,
    l2_normalize_channels,
    bce_with_logits,
    soft_dice_loss,
    bernoulli_kl,
    squared_error_mean,
    mean_square,
    info_nce,
    gradient_probe,
};

std::string_view op_name(OpTag tag);

class Graph;

/// Handle to one node of a Graph. Cheap to copy; valid as long as the graph.
class Var {
public:
    Var() = default;

    Graph* graph() const { return graph_; }
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
    /// Gradient accumulated by the last backward pass.
    const Eigen::ArrayXd& grad() const;

private:
    friend class Graph;
    Var(Graph* g, int id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    int id_ = -1;
};

/// Append-only tape. Node ids grow monotonically, so every input id is
/// smaller than its consumer and the append order is a topological order.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Appends an op output. `backward` is dropped when no input needs a
    /// gradient. Throws NumericError if `value` holds NaN/Inf.
    Var record(OpTag tag, std::vector<int> inputs, Tensor value, BackwardFn backward);

    /// Reverse sweep from a 1x1x1x1 node. Clears previous gradients first.
    void backward(const Var& loss);

    int size() const { return static_cast<int>(nodes_.size()); }
    OpTag tag(int id) const { return node(id).tag; }
    const std::vector<int>& inputs(int id) const { return node(id).inputs; }
    const Tensor& value(int id) const { return node(id).value; }
    bool requires_grad(int id) const { return node(id).requires_grad; }

    /// Gradient buffer of `id` (allocated on demand), or nullptr when the
    /// node does not take part in differentiation.
    Eigen::ArrayXd* grad_sink(int id);
    const Eigen::ArrayXd& grad(int id) const;

    /// Called with each node id as the backward sweep reaches it.
    void set_visit_observer(std::function<void(int)> observer) { observer_ = std::move(observer); }

private:
    struct Node {
        OpTag tag;
        std::vector<int> inputs;
        Tensor value;
        BackwardFn backward;
        bool requires_grad;
    };

    const Node& node(int id) const;
    Node& node(int id);

    // deque keeps value references stable while the tape grows.
    std::deque<Node> nodes_;
    std::function<void(int)> observer_;
};

/// One input of a gradient check. Non-differentiable inputs (masks, labels)
/// are fed as constants and never perturbed.
struct GradCheckInput {
    Tensor value;
    bool differentiable = true;
};

struct GradCheckOptions {
    double eps = 1e-5;
    /// Seed of the fixed random projection that reduces non-scalar outputs.
    std::uint64_t seed = 7;
    /// Check at most this many elements per input (0 = all), chosen by seed.
    std::size_t max_elements = 0;
};

using GradCheckFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Max relative error between analytic and central-difference gradients,
/// with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const GradCheckFn& op, std::span<const GradCheckInput> inputs,
                  const GradCheckOptions& options = {});

}  // namespace maunet
