// SPDX-License-Identifier: Apache-2.0
#pragma once

// Contrastive objective over expert representations: activated experts
// attract each other, inactivated experts are pushed away. One activated
// expert acts as the anchor (drawn uniformly per sample), the remaining
// activated ones are positives, the inactivated ones negatives.

#include <cstddef>
#include <random>
#include <vector>

#include "comoe/tensor.hpp"

namespace comoe {

// Inputs to one InfoNCE evaluation. All vectors must be unit norm; the
// builders below normalize for you.
struct ContrastiveBatch {
    Tensor anchor;
    std::vector<Tensor> positives;  // k-1 activated peers
    std::vector<Tensor> negatives;  // n-k inactivated experts
    double temperature = 0.07;
    double epsilon = 1e-3;
};

// Scalar logging record. total == ce + lambda * con exactly, by the same
// double expression the tensor path evaluates.
struct LossBreakdown {
    double ce = 0.0;
    double con = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

// exp((q . e) / tau). Kept in linear space; the losses work in log space.
Tensor score(const Tensor& q, const Tensor& e, double tau);

// -log( sum exp(s_pos) / (sum exp(s_all) + epsilon) ) with s = sim / tau,
// evaluated via logsumexp. Strictly positive whenever epsilon > 0.
// Requires at least one positive and one negative, unit-norm inputs,
// tau > 0, epsilon >= 0.
Tensor contrastive_loss_single(const ContrastiveBatch& batch);

// Normalizes the chosen representations and assembles a batch with a
// uniformly random anchor among the activated experts (one rng draw per
// call). stop_grad_negatives detaches negatives so only activated experts
// feel the push. Representations with norm below 1e-12 are scaled by a
// constant 1e12 instead of exactly normalized: fresh zero-output experts
// then contribute zero similarity instead of failing, and the loss stays
// finite with zero gradient at that point.
ContrastiveBatch make_contrastive_batch(const std::vector<Tensor>& expert_reprs,
                                        const std::vector<std::size_t>& topk_indices,
                                        double tau, double epsilon, std::mt19937_64& anchor_rng,
                                        bool stop_grad_negatives = false);

// Ablation variant: every activated expert takes a turn as the query and
// the k per-query terms are summed (no anchor sampling).
Tensor contrastive_loss_sumk(const std::vector<Tensor>& expert_reprs,
                             const std::vector<std::size_t>& topk_indices, double tau,
                             double epsilon, bool stop_grad_negatives = false);

// total = ce + lambda * con. Rejects lambda < 0. With lambda == 0 the
// result is bitwise equal to ce.
LossBreakdown total_loss(double ce, double con, double lambda);
Tensor total_loss(const Tensor& ce, const Tensor& con, double lambda);

}  // namespace comoe
