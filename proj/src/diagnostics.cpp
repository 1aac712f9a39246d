// SPDX-License-Identifier: Apache-2.0
#include "comoe/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>

namespace comoe {

WorkloadMatrix expert_workload(const std::vector<RoutingRecord>& log, std::size_t num_tasks,
                               std::size_t num_experts) {
    if (num_tasks == 0 || num_experts == 0) {
        throw ContractError("expert_workload: need at least one task and one expert");
    }
    WorkloadMatrix w;
    w.num_tasks = num_tasks;
    w.num_experts = num_experts;
    w.counts.assign(num_tasks * num_experts, 0);
    w.freqs.assign(num_tasks * num_experts, 0.0);
    w.row_valid.assign(num_tasks, false);
    for (const RoutingRecord& r : log) {
        if (r.task >= num_tasks) {
            throw ValidationError("expert_workload: corrupt log, task index " +
                                  std::to_string(r.task) + " out of range");
        }
        if (r.expert >= num_experts) {
            throw ValidationError("expert_workload: corrupt log, expert index " +
                                  std::to_string(r.expert) + " out of range");
        }
        ++w.counts[r.task * num_experts + r.expert];
    }
    for (std::size_t t = 0; t < num_tasks; ++t) {
        std::size_t row = 0;
        for (std::size_t e = 0; e < num_experts; ++e) row += w.count(t, e);
        if (row == 0) continue;
        w.row_valid[t] = true;
        for (std::size_t e = 0; e < num_experts; ++e) {
            w.freqs[t * num_experts + e] =
                static_cast<double>(w.count(t, e)) / static_cast<double>(row);
        }
    }
    return w;
}

namespace {

// Jacobi eigensolver for a small symmetric matrix; returns eigenvalues
// (descending) paired with column eigenvectors. Plenty for the <=64-dim
// covariance matrices the projection needs.
void jacobi_eigen(std::vector<double>& a, std::size_t n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p];
                    const double aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i];
                    const double aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = eigvecs[i * n + p];
                    const double viq = eigvecs[i * n + q];
                    eigvecs[i * n + p] = c * vip - s * viq;
                    eigvecs[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
    // Sort descending, permuting eigenvector columns alongside.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&eigvals](std::size_t x, std::size_t y) { return eigvals[x] > eigvals[y]; });
    std::vector<double> vals(n);
    std::vector<double> vecs(n * n);
    for (std::size_t j = 0; j < n; ++j) {
        vals[j] = eigvals[order[j]];
        for (std::size_t i = 0; i < n; ++i) vecs[i * n + j] = eigvecs[i * n + order[j]];
    }
    eigvals = std::move(vals);
    eigvecs = std::move(vecs);
}

double norm_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

SimilarityReport representation_similarity(const std::vector<ReprRecord>& reprs) {
    if (reprs.empty()) throw ContractError("representation_similarity: empty representation log");
    std::size_t num_experts = 0;
    std::map<std::size_t, std::size_t> layer_dim;  // widths may differ across layers
    for (const ReprRecord& r : reprs) {
        if (r.value.empty()) {
            throw ValidationError("representation_similarity: corrupt log, empty representation");
        }
        auto [it, fresh] = layer_dim.emplace(r.layer, r.value.size());
        if (!fresh && it->second != r.value.size()) {
            throw ValidationError("representation_similarity: corrupt log, layer " +
                                  std::to_string(r.layer) + " mixes dimensions " +
                                  std::to_string(it->second) + " and " +
                                  std::to_string(r.value.size()));
        }
        num_experts = std::max(num_experts, r.expert + 1);
    }

    // Group by (layer, token); cosine statistics are per token, pooled
    // across layers and tokens (cosine is scale-free, so mixed layer widths
    // pool cleanly).
    std::map<std::pair<std::size_t, std::size_t>, std::vector<const ReprRecord*>> groups;
    for (const ReprRecord& r : reprs) groups[{r.layer, r.token}].push_back(&r);

    SimilarityReport rep;
    rep.num_experts = num_experts;
    rep.cosine.assign(num_experts * num_experts, 0.0);
    std::vector<std::size_t> pair_n(num_experts * num_experts, 0);
    // Per-layer running mean representation per expert, for the projection.
    std::map<std::size_t, std::vector<double>> layer_mean;
    std::map<std::size_t, std::vector<std::size_t>> layer_mean_n;
    for (const auto& [layer, dim] : layer_dim) {
        layer_mean[layer].assign(num_experts * dim, 0.0);
        layer_mean_n[layer].assign(num_experts, 0);
    }

    for (const auto& [key, rows] : groups) {
        const std::size_t dim = layer_dim.at(key.first);
        std::vector<double>& mean = layer_mean.at(key.first);
        std::vector<std::size_t>& mean_n = layer_mean_n.at(key.first);
        std::vector<const ReprRecord*> by_expert(num_experts, nullptr);
        for (const ReprRecord* r : rows) {
            if (by_expert[r->expert] != nullptr) {
                throw ValidationError(
                    "representation_similarity: corrupt log, duplicate expert entry for a token");
            }
            by_expert[r->expert] = r;
        }
        std::vector<double> norms(num_experts, 0.0);
        for (std::size_t e = 0; e < num_experts; ++e) {
            if (by_expert[e] == nullptr) continue;
            norms[e] = norm_of(by_expert[e]->value);
            if (norms[e] == 0.0) {
                ++rep.excluded;
                by_expert[e] = nullptr;  // zero-norm: no direction to compare
                continue;
            }
            ++mean_n[e];
            for (std::size_t d = 0; d < dim; ++d) mean[e * dim + d] += by_expert[e]->value[d];
        }
        for (std::size_t i = 0; i < num_experts; ++i) {
            if (by_expert[i] == nullptr) continue;
            for (std::size_t j = i; j < num_experts; ++j) {
                if (by_expert[j] == nullptr) continue;
                double dot = 0.0;
                for (std::size_t d = 0; d < dim; ++d) {
                    dot += by_expert[i]->value[d] * by_expert[j]->value[d];
                }
                const double c = dot / (norms[i] * norms[j]);
                rep.cosine[i * num_experts + j] += c;
                ++pair_n[i * num_experts + j];
            }
        }
    }

    double off_sum = 0.0;
    std::size_t off_n = 0;
    for (std::size_t i = 0; i < num_experts; ++i) {
        for (std::size_t j = i; j < num_experts; ++j) {
            const std::size_t n_ij = pair_n[i * num_experts + j];
            double c = n_ij > 0 ? rep.cosine[i * num_experts + j] / static_cast<double>(n_ij)
                                : (i == j ? 1.0 : 0.0);
            rep.cosine[i * num_experts + j] = c;
            rep.cosine[j * num_experts + i] = c;
            if (i != j && n_ij > 0) {
                off_sum += std::abs(c);
                ++off_n;
            }
        }
    }
    rep.off_diag_mean = off_n > 0 ? off_sum / static_cast<double>(off_n) : 0.0;

    // 2-D projection: per-layer mean representations concatenated into one
    // profile vector per expert (layers in ascending order), then principal
    // components of the centered profiles.
    std::size_t dim = 0;
    for (const auto& [layer, d] : layer_dim) dim += d;
    std::vector<double> mean(num_experts * dim, 0.0);
    std::size_t off = 0;
    for (const auto& [layer, d] : layer_dim) {
        const std::vector<double>& lm = layer_mean.at(layer);
        const std::vector<std::size_t>& ln = layer_mean_n.at(layer);
        for (std::size_t e = 0; e < num_experts; ++e) {
            if (ln[e] == 0) continue;
            for (std::size_t i = 0; i < d; ++i) {
                mean[e * dim + off + i] = lm[e * d + i] / static_cast<double>(ln[e]);
            }
        }
        off += d;
    }
    std::vector<double> centroid(dim, 0.0);
    for (std::size_t e = 0; e < num_experts; ++e)
        for (std::size_t d = 0; d < dim; ++d) centroid[d] += mean[e * dim + d];
    for (std::size_t d = 0; d < dim; ++d) centroid[d] /= static_cast<double>(num_experts);
    std::vector<double> cov(dim * dim, 0.0);
    for (std::size_t e = 0; e < num_experts; ++e) {
        for (std::size_t a = 0; a < dim; ++a) {
            const double da = mean[e * dim + a] - centroid[a];
            for (std::size_t b = 0; b < dim; ++b) {
                cov[a * dim + b] += da * (mean[e * dim + b] - centroid[b]);
            }
        }
    }
    std::vector<double> eigvals;
    std::vector<double> eigvecs;
    jacobi_eigen(cov, dim, eigvals, eigvecs);
    rep.projection.assign(num_experts, {0.0, 0.0});
    for (std::size_t axis = 0; axis < 2 && axis < dim; ++axis) {
        // Fix the sign so re-runs of identical data reproduce bytes: the
        // largest-magnitude loading is made positive.
        std::size_t arg = 0;
        for (std::size_t d = 1; d < dim; ++d) {
            if (std::abs(eigvecs[d * dim + axis]) > std::abs(eigvecs[arg * dim + axis])) arg = d;
        }
        const double sign = eigvecs[arg * dim + axis] < 0.0 ? -1.0 : 1.0;
        for (std::size_t e = 0; e < num_experts; ++e) {
            double proj = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                proj += (mean[e * dim + d] - centroid[d]) * eigvecs[d * dim + axis];
            }
            rep.projection[e][axis] = sign * proj;
        }
    }
    return rep;
}

double row_divergence(const WorkloadMatrix& w, std::size_t a, std::size_t b) {
    if (a >= w.num_tasks || b >= w.num_tasks || !w.row_valid[a] || !w.row_valid[b]) {
        throw ContractError("row_divergence: both rows must be valid task rows");
    }
    auto mid_kl = [&w, a, b](std::size_t t) {
        // KL(row_t || (row_a + row_b)/2), with 0 log 0 = 0.
        double kl = 0.0;
        for (std::size_t e = 0; e < w.num_experts; ++e) {
            const double p = w.freq(t, e);
            if (p == 0.0) continue;
            const double m = 0.5 * (w.freq(a, e) + w.freq(b, e));
            kl += p * std::log(p / m);
        }
        return kl;
    };
    return 0.5 * mid_kl(a) + 0.5 * mid_kl(b);
}

double workload_divergence(const WorkloadMatrix& w) {
    std::vector<std::size_t> valid;
    for (std::size_t t = 0; t < w.num_tasks; ++t) {
        if (w.row_valid[t]) valid.push_back(t);
    }
    if (valid.size() < 2) {
        throw ContractError("workload_divergence: need at least two tasks with routed tokens");
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        for (std::size_t j = i + 1; j < valid.size(); ++j) {
            sum += row_divergence(w, valid[i], valid[j]);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

}  // namespace comoe
