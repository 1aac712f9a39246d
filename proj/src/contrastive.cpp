// SPDX-License-Identifier: Apache-2.0
#include "comoe/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace comoe {

namespace {

constexpr double kNormFloor = 1e-12;

double vec_norm(const Tensor& v) {
    double acc = 0.0;
    for (double x : v.data()) acc += x * x;
    return std::sqrt(acc);
}

// x / max(||x||, kNormFloor). Below the floor the denominator is constant,
// so the gradient is a plain 1/kNormFloor scale there.
Tensor normalize_clamped(const Tensor& v) {
    if (vec_norm(v) >= kNormFloor) return l2_normalize(v);
    return scale(v, 1.0 / kNormFloor);
}

void require_unit(const Tensor& v, const char* role) {
    const double n = vec_norm(v);
    if (std::fabs(n - 1.0) > 1e-6)
        throw ContractError(std::string("contrastive ") + role + " must be unit norm, got " +
                            std::to_string(n));
}

void validate_selection(std::size_t n, const std::vector<std::size_t>& topk) {
    if (topk.size() < 2)
        throw ContractError("contrastive loss needs at least 2 activated experts, got " +
                            std::to_string(topk.size()));
    if (topk.size() >= n)
        throw ContractError("contrastive loss needs at least one inactivated expert (n=" +
                            std::to_string(n) + ", k=" + std::to_string(topk.size()) + ")");
    for (std::size_t i : topk) {
        if (i >= n) throw ContractError("activated index " + std::to_string(i) + " out of range");
        if (std::count(topk.begin(), topk.end(), i) != 1)
            throw ContractError("activated indices must be distinct");
    }
}

// Shared core: the positives/negatives split is already decided.
Tensor infonce_term(const Tensor& q, const std::vector<Tensor>& positives,
                    const std::vector<Tensor>& negatives, double tau, double epsilon) {
    std::vector<Tensor> pos_scores, all_scores;
    pos_scores.reserve(positives.size());
    all_scores.reserve(positives.size() + negatives.size());
    for (const auto& p : positives) {
        auto s = scale(dot(q, p), 1.0 / tau);
        pos_scores.push_back(s);
        all_scores.push_back(s);
    }
    for (const auto& m : negatives) all_scores.push_back(scale(dot(q, m), 1.0 / tau));
    auto lse_pos = logsumexp(stack(pos_scores));
    auto lse_all = logsumexp(stack(all_scores));
    return sub(log_add_const(lse_all, epsilon), lse_pos);
}

}  // namespace

Tensor score(const Tensor& q, const Tensor& e, double tau) {
    if (!(tau > 0)) throw ContractError("temperature must be positive");
    return exp(scale(dot(q, e), 1.0 / tau));
}

Tensor contrastive_loss_single(const ContrastiveBatch& batch) {
    if (!(batch.temperature > 0)) throw ContractError("temperature must be positive");
    if (!(batch.epsilon >= 0)) throw ContractError("epsilon must be non-negative");
    if (batch.positives.empty()) throw ContractError("contrastive batch has no positives");
    if (batch.negatives.empty()) throw ContractError("contrastive batch has no negatives");
    require_unit(batch.anchor, "anchor");
    for (const auto& p : batch.positives) require_unit(p, "positive");
    for (const auto& m : batch.negatives) require_unit(m, "negative");
    return infonce_term(batch.anchor, batch.positives, batch.negatives, batch.temperature,
                        batch.epsilon);
}

ContrastiveBatch make_contrastive_batch(const std::vector<Tensor>& expert_reprs,
                                        const std::vector<std::size_t>& topk_indices,
                                        double tau, double epsilon, std::mt19937_64& anchor_rng,
                                        bool stop_grad_negatives) {
    validate_selection(expert_reprs.size(), topk_indices);
    const std::size_t k = topk_indices.size();
    std::uniform_int_distribution<std::size_t> pick_anchor(0, k - 1);
    const std::size_t a = pick_anchor(anchor_rng);

    ContrastiveBatch batch;
    batch.temperature = tau;
    batch.epsilon = epsilon;
    batch.anchor = normalize_clamped(expert_reprs[topk_indices[a]]);
    for (std::size_t j = 0; j < k; ++j)
        if (j != a) batch.positives.push_back(normalize_clamped(expert_reprs[topk_indices[j]]));
    for (std::size_t i = 0; i < expert_reprs.size(); ++i) {
        if (std::find(topk_indices.begin(), topk_indices.end(), i) != topk_indices.end())
            continue;
        const Tensor& raw = expert_reprs[i];
        batch.negatives.push_back(normalize_clamped(stop_grad_negatives ? detach(raw) : raw));
    }
    return batch;
}

Tensor contrastive_loss_sumk(const std::vector<Tensor>& expert_reprs,
                             const std::vector<std::size_t>& topk_indices, double tau,
                             double epsilon, bool stop_grad_negatives) {
    validate_selection(expert_reprs.size(), topk_indices);
    if (!(tau > 0)) throw ContractError("temperature must be positive");
    if (!(epsilon >= 0)) throw ContractError("epsilon must be non-negative");
    const std::size_t k = topk_indices.size();
    std::vector<Tensor> activated(k);
    for (std::size_t j = 0; j < k; ++j)
        activated[j] = normalize_clamped(expert_reprs[topk_indices[j]]);
    std::vector<Tensor> negatives;
    for (std::size_t i = 0; i < expert_reprs.size(); ++i) {
        if (std::find(topk_indices.begin(), topk_indices.end(), i) != topk_indices.end())
            continue;
        const Tensor& raw = expert_reprs[i];
        negatives.push_back(normalize_clamped(stop_grad_negatives ? detach(raw) : raw));
    }
    Tensor acc;
    for (std::size_t a = 0; a < k; ++a) {
        std::vector<Tensor> positives;
        positives.reserve(k - 1);
        for (std::size_t j = 0; j < k; ++j)
            if (j != a) positives.push_back(activated[j]);
        auto term = infonce_term(activated[a], positives, negatives, tau, epsilon);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

LossBreakdown total_loss(double ce, double con, double lambda) {
    if (lambda < 0) throw ContractError("lambda must be non-negative");
    LossBreakdown b;
    b.ce = ce;
    b.con = con;
    b.lambda = lambda;
    b.total = ce + lambda * con;
    return b;
}

Tensor total_loss(const Tensor& ce, const Tensor& con, double lambda) {
    if (lambda < 0) throw ContractError("lambda must be non-negative");
    return add(ce, scale(con, lambda));
}

}  // namespace comoe
