// SPDX-License-Identifier: Apache-2.0
#include "comoe/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace comoe {

namespace {

constexpr double kAdapterInitStd = 0.02;

}  // namespace

LoraExpert::LoraExpert(std::size_t d_in, std::size_t d_out, std::size_t rank_, double alpha_,
                       std::mt19937_64& rng) {
    if (rank_ == 0) throw ValidationError("expert rank must be positive");
    if (2 * rank_ > std::min(d_in, d_out))
        throw ValidationError("expert rank " + std::to_string(rank_) +
                              " too large for dims " + std::to_string(d_in) + "x" +
                              std::to_string(d_out) + "; need 2*rank <= min");
    if (!(alpha_ > 0)) throw ValidationError("expert alpha must be positive");
    A = Tensor::randn({rank_, d_in}, rng, kAdapterInitStd, true);
    B = Tensor::zeros({d_out, rank_}, true);
    rank = rank_;
    alpha = alpha_;
}

LoraExpert LoraExpert::from_matrices(Tensor A, Tensor B, double alpha) {
    if (A.rank() != 2 || B.rank() != 2)
        throw ShapeError("expert matrices must be rank 2, got " + shape_to_string(A.shape()) +
                         " and " + shape_to_string(B.shape()));
    if (A.dim(0) != B.dim(1))
        throw ShapeError("expert inner dims disagree: A " + shape_to_string(A.shape()) +
                         " vs B " + shape_to_string(B.shape()));
    if (!(alpha > 0)) throw ValidationError("expert alpha must be positive");
    LoraExpert e;
    e.rank = A.dim(0);
    e.alpha = alpha;
    e.A = std::move(A);
    e.B = std::move(B);
    return e;
}

Router::Router(std::size_t n, std::size_t d_in, std::mt19937_64& rng) {
    if (n < 2) throw ValidationError("router needs at least 2 experts");
    G = Tensor::randn({n, d_in}, rng, kAdapterInitStd, true);
}

Router Router::from_matrix(Tensor G_) {
    if (G_.rank() != 2)
        throw ShapeError("gate matrix must be rank 2, got " + shape_to_string(G_.shape()));
    Router r;
    r.G = std::move(G_);
    return r;
}

MoeLoraLayer::MoeLoraLayer(std::size_t d_in, std::size_t d_out, std::size_t num_experts_,
                           std::size_t k_, std::size_t rank_, double alpha_,
                           double dropout_rate_, std::mt19937_64& rng) {
    if (num_experts_ < 2) throw ValidationError("layer needs at least 2 experts");
    if (k_ < 1 || k_ >= num_experts_)
        throw ValidationError("activated count k=" + std::to_string(k_) +
                              " must satisfy 1 <= k < n=" + std::to_string(num_experts_));
    if (dropout_rate_ < 0 || dropout_rate_ >= 1)
        throw ValidationError("dropout rate must lie in [0, 1)");
    W0 = Tensor::randn({d_out, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)), false);
    experts.reserve(num_experts_);
    for (std::size_t i = 0; i < num_experts_; ++i)
        experts.emplace_back(d_in, d_out, rank_, alpha_, rng);
    router = Router(num_experts_, d_in, rng);
    k = k_;
    dropout_rate = dropout_rate_;
}

Tensor expert_forward(const LoraExpert& expert, const Tensor& x) {
    return scale(matmul(expert.B, matmul(expert.A, x)), expert.scaling());
}

Tensor lora_forward(const Tensor& W0, const LoraExpert& expert, const Tensor& x) {
    return add(matmul(W0, x), expert_forward(expert, x));
}

RoutingDecision route(const Router& router, const Tensor& x, std::size_t k) {
    const std::size_t n = router.num_experts();
    if (k < 1 || k > n)
        throw ContractError("route: k=" + std::to_string(k) + " out of range for n=" +
                            std::to_string(n));
    Tensor probs = softmax(matmul(router.G, x));
    // Descending by probability; stable sort keeps the lower index first on
    // exact ties, which is the documented tie rule.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&probs](std::size_t a, std::size_t b) {
        return probs.data()[a] > probs.data()[b];
    });
    order.resize(k);
    Tensor selected = gather(probs, order);
    RoutingDecision d;
    d.topk_indices = std::move(order);
    d.renorm_weights = div_by(selected, sum(selected));
    d.gate_probs = std::move(probs);
    return d;
}

MoeOutput moe_forward(const MoeLoraLayer& layer, const Tensor& x, bool need_all_experts,
                      std::mt19937_64* dropout_rng) {
    MoeOutput out;
    out.decision = route(layer.router, x, layer.k);
    Tensor xe = x;
    if (dropout_rng != nullptr && layer.dropout_rate > 0)
        xe = dropout(x, layer.dropout_rate, *dropout_rng, true);
    out.expert_reprs.reserve(need_all_experts ? layer.num_experts() : layer.k);
    if (need_all_experts) {
        for (const auto& e : layer.experts) out.expert_reprs.push_back(expert_forward(e, xe));
    } else {
        for (std::size_t idx : out.decision.topk_indices)
            out.expert_reprs.push_back(expert_forward(layer.experts[idx], xe));
    }
    Tensor y = matmul(layer.W0, x);
    for (std::size_t j = 0; j < out.decision.topk_indices.size(); ++j) {
        const Tensor& e = need_all_experts ? out.expert_reprs[out.decision.topk_indices[j]]
                                           : out.expert_reprs[j];
        y = add(y, scale_by(e, pick(out.decision.renorm_weights, j)));
    }
    out.y = std::move(y);
    return out;
}

std::vector<NamedParam> layer_parameters(const MoeLoraLayer& layer, const std::string& prefix) {
    std::vector<NamedParam> out;
    out.push_back({prefix + ".W0", layer.W0});
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        out.push_back({prefix + ".expert" + std::to_string(i) + ".A", layer.experts[i].A});
        out.push_back({prefix + ".expert" + std::to_string(i) + ".B", layer.experts[i].B});
    }
    out.push_back({prefix + ".router.G", layer.router.G});
    return out;
}

}  // namespace comoe
