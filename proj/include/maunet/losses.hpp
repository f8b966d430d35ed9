#pragma once

#include "maunet/ops.hpp"

#include <random>
#include <span>
#include <vector>

namespace maunet {

// Losses are fused graph ops: targets are plain tensors, gradients flow to
// the Var arguments only. All of them return scalars.

/// Mean binary cross-entropy on logits against a {0,1} mask of the same shape.
Var bce_with_logits(const Var& logits, const Tensor& mask);

/// 1 - (2*sum(p*m) + smooth) / (sum(p) + sum(m) + smooth) per image,
/// averaged over the batch; p = sigmoid(logits).
Var soft_dice_loss(const Var& logits, const Tensor& mask, double smooth = 1.0);

/// 0.5 * BCE + 0.5 * soft Dice.
Var seg_loss(const Var& logits, const Tensor& mask);

/// Per-pixel Bernoulli KL(teacher || student) of temperature-softened
/// probabilities, averaged over all pixels and scaled by temperature^2.
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
Var bernoulli_kl(const Tensor& teacher_logits, const Var& student_logits, double temperature = 1.0);

/// mean((a - target)^2)
Var squared_error_mean(const Var& a, const Tensor& target);

/// sum_l lambda[l] * mean((student[l] - teacher[l])^2). Teacher taps must
/// already be projected to the student widths.
Var mimic_loss(std::span<const Var> student_taps, std::span<const Tensor> teacher_taps,
               std::span<const double> lambda);

/// Mean of squared entries over every tensor in `params`.
Var mean_square(std::span<const Var> params);

struct PreferenceMasks {
    Tensor positive;
    Tensor negative;
    Tensor ignored;
};

/// positive where p >= tau_h, negative where p <= tau_l, ignored otherwise.
/// Throws DomainError unless tau_l < tau_h.
PreferenceMasks preference_partition(const Tensor& teacher_probs, double tau_h = 0.8, double tau_l = 0.2);

/// Keeps at most `per_class` randomly chosen pixels of each mask.
void subsample_masks(PreferenceMasks& masks, std::size_t per_class, std::mt19937_64& rng);

struct ContrastiveResult {
    Var loss;
    bool degenerate = false;  // fewer than 2 positives or no negatives
};

/// Pixel InfoNCE on L2-normalised embeddings [N,C,H,W]. Every positive
/// pixel is an anchor; its positives are the other positive pixels, its
/// negatives the negative pixels (pooled over the batch):
///   L_i = -log( sum_{j in P\i} e^{s_ij} / (sum_{j in P\i} e^{s_ij} + sum_{k in Neg} e^{s_ik}) )
/// with s = cosine / temperature, averaged over anchors.
ContrastiveResult contrastive_loss(const Var& embeddings, const Tensor& positive, const Tensor& negative,
                                   double temperature = 0.1);

/// l_seg + (1 - omega) * l_mimic + omega * l_kl; DomainError unless omega in [0, 1].
double stage1_loss(double l_seg, double l_mimic, double l_kl, double omega);
Var stage1_loss(const Var& l_seg, const Var& l_mimic, const Var& l_kl, double omega);

/// l_seg + l_cont + rho * l_reg; DomainError if rho < 0.
double stage2_loss(double l_seg, double l_cont, double l_reg, double rho);
Var stage2_loss(const Var& l_seg, const Var& l_cont, const Var& l_reg, double rho);

}  // namespace maunet
