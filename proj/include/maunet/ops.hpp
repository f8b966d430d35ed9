#pragma once

#include "maunet/graph.hpp"

#include <optional>

namespace maunet {

struct ConvOptions {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

/// floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1
int conv_output_extent(int in, int k, const ConvOptions& opt);

/// Padding that keeps the spatial extent at stride 1 for an odd kernel.
inline int same_padding(int k, int dilation) { return dilation * (k - 1) / 2; }

// Convolutions. Weights are [C_out, C_in, K, K] (depthwise: [C, 1, K, K]),
// biases are [1, C_out, 1, 1]. Zero padding.
Var conv2d(const Var& x, const Var& w, const std::optional<Var>& bias, const ConvOptions& opt);
Var depthwise_conv2d(const Var& x, const Var& w, const ConvOptions& opt);
Var pointwise_conv2d(const Var& x, const Var& w, const std::optional<Var>& bias);

// Elementwise. GELU uses the tanh approximation.
Var gelu(const Var& x);
Var sigmoid(const Var& x);

// Binary ops broadcast any extent-1 axis against the other operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }

Var sum(const Var& x);
Var mean(const Var& x);

/// [N,C,H,W] -> [N,C,1,1] arithmetic mean over H*W.
Var global_avg_pool(const Var& x);
/// x: [N,in,1,1], w: [out,in,1,1], bias: [1,out,1,1].
Var fully_connected(const Var& x, const Var& w, const std::optional<Var>& bias);

/// Per-pixel distribution over channels. A single channel is read as a
/// Bernoulli logit, so these reduce to sigmoid / log-sigmoid.
Var softmax_channels(const Var& x);
Var log_softmax_channels(const Var& x);

Var upsample_nearest2x(const Var& x);
/// x / sqrt(sum_c x^2 + eps) at every pixel.
Var l2_normalize_channels(const Var& x, double eps = 1e-12);

/// Identity on the forward pass; multiplies the incoming gradient by
/// `factor` on the way back. factor != 1 is a deliberately wrong gradient
/// used to prove the gradient checker catches corruption.
Var gradient_probe(const Var& x, double factor);

// Scalar forms of the activations, shared with the loss code.
double gelu_value(double x);
double gelu_derivative(double x);
double sigmoid_value(double x);
/// log(1 + exp(x)) without overflow.
double softplus_value(double x);

}  // namespace maunet
