// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multi-task classification data. Each task owns a disjoint
// block of input coordinates and a set of Gaussian clusters inside that
// block, so per-task expert specialization is both learnable and
// measurable by construction.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "comoe/error.hpp"

namespace comoe {

struct SyntheticTaskSpec {
    std::size_t num_tasks = 4;
    std::size_t input_dim = 32;       // must be a multiple of num_tasks
    std::size_t classes_per_task = 4;
    double cluster_separation = 3.0;  // class-center norm, in units of the noise std
    std::size_t samples_per_task = 8000;
    double label_noise = 0.05;        // flip probability, in [0, 0.5)
};

void validate_spec(const SyntheticTaskSpec& spec);

struct Sample {
    std::vector<double> x;
    std::size_t task = 0;
    std::size_t label = 0;  // class within the task, 0 .. classes_per_task-1
};

struct Dataset {
    SyntheticTaskSpec spec;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

// Deterministic generation: a single mt19937_64(seed) stream drives, in
// order, (1) per-task class centers (num_tasks x classes_per_task blocks of
// input_dim/num_tasks N(0,1) draws, rescaled to norm cluster_separation;
// a block with norm < 1e-9 is redrawn), then (2) samples per task in task
// order, classes cycling 0,1,...,C-1: the owned block is center + N(0,1)
// noise, all other coordinates exactly zero. When label_noise > 0 each
// sample draws one uniform; draws below label_noise draw one more uniform
// integer to pick a different class uniformly. The first
// floor(0.8 * samples_per_task) samples of each task are the train split,
// the remainder the test split, both in generation order.
Dataset generate_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed);

}  // namespace comoe
