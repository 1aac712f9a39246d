// SPDX-License-Identifier: Apache-2.0
#include "comoe/synthetic.hpp"

#include <cmath>
#include <random>
#include <string>
#include <utility>

namespace comoe {

void validate_spec(const SyntheticTaskSpec& spec) {
    if (spec.num_tasks == 0) throw ValidationError("task spec: num_tasks must be positive");
    if (spec.classes_per_task < 2) {
        throw ValidationError("task spec: classes_per_task must be at least 2");
    }
    if (spec.input_dim < spec.num_tasks || spec.input_dim % spec.num_tasks != 0) {
        throw ValidationError("task spec: input_dim (" + std::to_string(spec.input_dim) +
                              ") must be a positive multiple of num_tasks (" +
                              std::to_string(spec.num_tasks) + ")");
    }
    if (!(spec.cluster_separation > 0.0)) {
        throw ValidationError("task spec: cluster_separation must be positive");
    }
    if (spec.samples_per_task < 5) {
        throw ValidationError("task spec: samples_per_task must be at least 5 for an 80/20 split");
    }
    if (!(spec.label_noise >= 0.0 && spec.label_noise < 0.5)) {
        throw ValidationError("task spec: label_noise must lie in [0, 0.5)");
    }
}

Dataset generate_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    validate_spec(spec);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const std::size_t d_sub = spec.input_dim / spec.num_tasks;
    const std::size_t classes = spec.classes_per_task;

    std::vector<std::vector<double>> centers(spec.num_tasks * classes);
    for (auto& center : centers) {
        double norm = 0.0;
        do {
            center.assign(d_sub, 0.0);
            norm = 0.0;
            for (double& v : center) {
                v = unit(rng);
                norm += v * v;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-9);
        for (double& v : center) v *= spec.cluster_separation / norm;
    }

    Dataset ds;
    ds.spec = spec;
    const std::size_t n_train = spec.samples_per_task * 4 / 5;
    ds.train.reserve(spec.num_tasks * n_train);
    ds.test.reserve(spec.num_tasks * (spec.samples_per_task - n_train));
    for (std::size_t t = 0; t < spec.num_tasks; ++t) {
        for (std::size_t i = 0; i < spec.samples_per_task; ++i) {
            const std::size_t c = i % classes;
            Sample s;
            s.task = t;
            s.x.assign(spec.input_dim, 0.0);
            const std::vector<double>& center = centers[t * classes + c];
            for (std::size_t d = 0; d < d_sub; ++d) {
                s.x[t * d_sub + d] = center[d] + unit(rng);
            }
            s.label = c;
            if (spec.label_noise > 0.0 && u01(rng) < spec.label_noise) {
                std::uniform_int_distribution<std::size_t> other(0, classes - 2);
                s.label = (c + 1 + other(rng)) % classes;
            }
            (i < n_train ? ds.train : ds.test).push_back(std::move(s));
        }
    }
    return ds;
}

}  // namespace comoe
