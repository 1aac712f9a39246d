// SPDX-License-Identifier: Apache-2.0
#pragma once

// Post-hoc analysis of a finished run: which experts each task activated,
// how similar the expert representations are, and how strongly per-task
// routing distributions differ. Everything here is a pure function of the
// logged records.

#include <array>
#include <cstddef>
#include <vector>

#include "comoe/error.hpp"

namespace comoe {

// One activated expert for one token at one adapted layer.
struct RoutingRecord {
    std::size_t layer = 0;
    std::size_t token = 0;
    std::size_t task = 0;
    std::size_t slot = 0;    // position within the top-k selection
    std::size_t expert = 0;
    double weight = 0.0;     // renormalized gate weight
};

// One expert's representation vector for one token at one adapted layer.
struct ReprRecord {
    std::size_t layer = 0;
    std::size_t token = 0;
    std::size_t expert = 0;
    std::vector<double> value;
};

// Per-task expert activation counts plus row-normalized frequencies.
// Rows whose task never appears are flagged invalid instead of divided.
struct WorkloadMatrix {
    std::size_t num_tasks = 0;
    std::size_t num_experts = 0;
    std::vector<std::size_t> counts;  // row-major tasks x experts
    std::vector<double> freqs;
    std::vector<bool> row_valid;

    std::size_t count(std::size_t t, std::size_t e) const { return counts[t * num_experts + e]; }
    double freq(std::size_t t, std::size_t e) const { return freqs[t * num_experts + e]; }
};

WorkloadMatrix expert_workload(const std::vector<RoutingRecord>& log, std::size_t num_tasks,
                               std::size_t num_experts);

// Mean pairwise cosine similarity between expert representations over the
// evaluation tokens, a 2-D principal-component projection of the expert
// mean representations, and the scalar summary used by the specialization
// comparisons. Cosines are averaged per (layer, token) group, so layers of
// different widths pool into one matrix; the projection concatenates the
// per-layer mean representations into one profile vector per expert.
struct SimilarityReport {
    std::size_t num_experts = 0;
    std::vector<double> cosine;  // row-major n x n, diagonal 1
    std::vector<std::array<double, 2>> projection;
    double off_diag_mean = 0.0;  // mean |cosine[i][j]|, i != j
    std::size_t excluded = 0;    // zero-norm (token, expert) pairs skipped
};

SimilarityReport representation_similarity(const std::vector<ReprRecord>& reprs);

// Jensen-Shannon divergence between two valid task rows, in nats.
double row_divergence(const WorkloadMatrix& w, std::size_t a, std::size_t b);

// Mean pairwise Jensen-Shannon divergence between valid task rows, in
// nats; lies in [0, ln 2]. Requires at least two valid rows.
double workload_divergence(const WorkloadMatrix& w);

}  // namespace comoe
