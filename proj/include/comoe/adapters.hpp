// SPDX-License-Identifier: Apache-2.0
#pragma once

// Low-rank adapter experts, the gated router with top-k selection and
// renormalization, and the layer that composes them over a frozen weight.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "comoe/tensor.hpp"

namespace comoe {

// One low-rank expert: contributes (alpha/rank) * B * A * x on top of the
// frozen path. B starts at zero so a fresh expert is an exact no-op.
struct LoraExpert {
    Tensor A;  // {rank, d_in}, N(0, 0.02^2) at init
    Tensor B;  // {d_out, rank}, zero at init
    std::size_t rank = 0;
    double alpha = 0.0;

    LoraExpert() = default;  // empty shell, fill via from_matrices
    // Random initialization. Enforces 2*rank <= min(d_in, d_out): the update
    // must stay genuinely low-rank.
    LoraExpert(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha,
               std::mt19937_64& rng);

    // Wraps explicit matrices (hand-built cases, checkpoint restore paths).
    // Validates shape consistency only; rank is taken from A's row count.
    static LoraExpert from_matrices(Tensor A, Tensor B, double alpha);

    std::size_t d_in() const { return A.dim(1); }
    std::size_t d_out() const { return B.dim(0); }
    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct Router {
    Tensor G;  // {n, d_in}

    Router() = default;  // empty shell, fill via from_matrix
    Router(std::size_t n, std::size_t d_in, std::mt19937_64& rng);
    static Router from_matrix(Tensor G);

    std::size_t num_experts() const { return G.dim(0); }
    std::size_t d_in() const { return G.dim(1); }
};

// Which experts fire for one input and with what weight.
// Invariants: topk_indices are distinct, ordered by descending gate
// probability (ties broken toward the lower index); renorm_weights[j] pairs
// with topk_indices[j], each in (0, 1], summing to 1; gate_probs sums to 1.
struct RoutingDecision {
    std::vector<std::size_t> topk_indices;
    Tensor renorm_weights;  // {k}, differentiable back to the gate
    Tensor gate_probs;      // {n}
};

// Frozen dense weight plus n experts and a router, k of which activate per
// input. W0 never requires grad; the constructor enforces 1 <= k < n
// (fields stay public so tests can probe the k == n soft-routing identity).
struct MoeLoraLayer {
    Tensor W0;  // {d_out, d_in}, frozen, N(0, 1/d_in) at init
    std::vector<LoraExpert> experts;
    Router router;
    std::size_t k = 0;
    double dropout_rate = 0.0;

    // Draw order from rng: W0 row-major, then each expert's A in index
    // order, then G. Reproducing a layer bit for bit requires this order.
    MoeLoraLayer(std::size_t d_in, std::size_t d_out, std::size_t num_experts, std::size_t k,
                 std::size_t rank, double alpha, double dropout_rate, std::mt19937_64& rng);

    std::size_t d_in() const { return W0.dim(1); }
    std::size_t d_out() const { return W0.dim(0); }
    std::size_t num_experts() const { return experts.size(); }
};

// e_i = (alpha/rank) * B * A * x. This is the representation the
// contrastive objective compares across experts.
Tensor expert_forward(const LoraExpert& expert, const Tensor& x);

// y' = W0 x + expert_forward(expert, x).
Tensor lora_forward(const Tensor& W0, const LoraExpert& expert, const Tensor& x);

// Softmax over the gate logits G x, then the k largest probabilities
// renormalized to sum to 1. Unselected experts carry implicit weight zero.
// The weights stay in-graph: gradients reach G through both the softmax and
// the renormalization. Requires 1 <= k <= n; k == n degenerates to soft
// routing and exists for tests only.
RoutingDecision route(const Router& router, const Tensor& x, std::size_t k);

struct MoeOutput {
    Tensor y;  // {d_out}
    RoutingDecision decision;
    // Expert representations: indexed by expert id when all experts were
    // computed, otherwise in topk order.
    std::vector<Tensor> expert_reprs;
};

// y' = W0 x + sum over activated experts of renorm_weight * e_i.
// need_all_experts additionally evaluates the inactivated experts so they
// can serve as contrastive negatives; cost grows linearly with n.
// A non-null dropout_rng puts the call in training mode: the expert branch
// sees dropout(x), the frozen path and the router see x unchanged.
MoeOutput moe_forward(const MoeLoraLayer& layer, const Tensor& x, bool need_all_experts,
                      std::mt19937_64* dropout_rng = nullptr);

// Named views of every parameter in the layer, frozen W0 included, under
// "<prefix>.W0", "<prefix>.expert<i>.A"/".B", "<prefix>.router.G".
struct NamedParam {
    std::string name;
    Tensor tensor;
};
std::vector<NamedParam> layer_parameters(const MoeLoraLayer& layer, const std::string& prefix);

// Plain-text parameter file, round-trips doubles exactly:
//   comoe-params v1
//   param <name> <rank> <d0> <d1> ...
//   <numel values, one line, %.17g>
void save_params(const std::string& path, const std::vector<NamedParam>& params);
// Restores into the given views in place. Every named parameter must be
// present in the file with a matching shape; extra file entries are an error.
void load_params(const std::string& path, const std::vector<NamedParam>& params);

}  // namespace comoe
