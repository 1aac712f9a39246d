// SPDX-License-Identifier: Apache-2.0
#pragma once

// The training harness: a two-layer dense stack with frozen weights whose
// layers are adapted by mixture-of-LoRA-experts layers, trained with
// cross-entropy plus the weighted contrastive term,
//
//   total = ce + lambda * con,
//
// under AdamW with gradient accumulation.
//
// Every run is a deterministic function of (config, dataset). The loop
// contract below is normative; an independent reimplementation that follows
// it reproduces parameter trajectories bit for bit.
//
//   Streams   four generators seeded from config.seed:
//               init    = mt19937_64(seed)      model construction
//               shuffle = mt19937_64(seed + 1)  epoch permutations
//               dropout = mt19937_64(seed + 2)  expert-branch dropout masks
//               anchor  = mt19937_64(seed + 3)  contrastive anchor draws
//             The anchor stream is consumed only when lambda > 0 and
//             loss_variant == algorithm1; a lambda = 0 run draws nothing
//             from it and computes no contrastive term at all.
//   Model     build_stack consumes init only: layer 1's constructor, then
//             layer 2's (each: W0 row-major, expert A matrices in index
//             order, router G). Both layers are always fully constructed
//             regardless of placement, so frozen weights do not depend on
//             which layers are adapted.
//   Params    trainable_parameters lists, for each adapted layer in layer
//             order: expert0.A, expert0.B, expert1.A, ..., router G.
//             Frozen W0s are excluded.
//   Epochs    indices 0..train_size-1 are permuted by std::shuffle with the
//             shuffle stream, then cut into consecutive micro-batches of
//             batch_size (a trailing partial micro-batch is dropped).
//             Every accumulation_steps consecutive micro-batches form one
//             optimizer step; a trailing partial group still steps with its
//             actual micro-batch count g.
//   Loss      per micro-batch, samples in order: forward through the stack
//             (adapted layers via moe_forward with need_all_experts =
//             lambda > 0 and the dropout stream; frozen layers via W0 x),
//             tanh between the layers; ce_i = cross_entropy(logits, label).
//             When lambda > 0, each adapted layer contributes a contrastive
//             term in layer order (algorithm1: make_contrastive_batch with
//             the anchor stream, then contrastive_loss_single; eq12:
//             contrastive_loss_sumk), summed per sample by sequential add.
//             ce_sum and con_sum accumulate by sequential add over samples;
//             mean = scale(sum, 1/batch_size). The micro objective is
//             add(mean_ce, scale(mean_con, lambda)) when lambda > 0 and
//             exactly mean_ce when lambda == 0.
//   Backward  backward(scale(objective, 1/g)) per micro-batch, then one
//             AdamW::step over the trainable parameters and zero_grad on
//             each. AdamW treats a missing gradient accumulator as zero
//             gradient: every trainable parameter is decayed and moment-
//             updated every step.
//   Logging   one StepRecord per optimizer step: ce and con are the means
//             of the g micro-batch means, total = ce + lambda * con in
//             doubles. Evaluation runs after each epoch and consumes no
//             training randomness.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "comoe/adapters.hpp"
#include "comoe/diagnostics.hpp"
#include "comoe/synthetic.hpp"
#include "comoe/tensor.hpp"

namespace comoe {

enum class Placement { kBoth, kFirst, kSecond };
enum class LossVariant { kAlgorithm1, kEq12 };

struct TrainConfig {
    // model
    std::size_t n_experts = 4;
    std::size_t k = 2;
    std::size_t rank = 16;
    double alpha = 32.0;
    std::size_t hidden_dim = 32;
    Placement placement = Placement::kBoth;
    // optimization
    double lr = 2e-4;
    std::size_t batch_size = 16;
    std::size_t accumulation_steps = 8;
    std::size_t epochs = 2;
    std::size_t max_steps = 0;  // optimizer-step cap; 0 = epochs decide
    double dropout = 0.05;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // objective
    double lambda = 0.01;
    double tau = 0.07;
    double epsilon = 1e-3;
    LossVariant loss_variant = LossVariant::kAlgorithm1;
    bool stop_grad_negatives = false;
    // run
    std::uint64_t seed = 1;
    SyntheticTaskSpec data;
};

void validate_config(const TrainConfig& config);

// Strict JSON round-trip: every field above under its own key, data nested
// under "data", enums as strings. Unknown keys and wrong types are
// ValidationErrors; missing keys keep their defaults.
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& config);
TrainConfig load_config(const std::string& path);

// Decoupled-weight-decay Adam. One step(), given parameters in a fixed
// order, applies for each parameter (g = grad or zeros if none allocated):
//   m = beta1 m + (1-beta1) g;   mhat = m / (1 - beta1^t)
//   v = beta2 v + (1-beta2) g^2; vhat = v / (1 - beta2^t)
//   p = p * (1 - lr * weight_decay) - lr * mhat / (sqrt(vhat) + eps)
// with t incremented once per step() call.
struct AdamW {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void step(std::vector<Tensor>& params);
};

// The toy backbone: two dense stages with tanh between them. Both stages
// always carry a frozen W0 plus experts and a router; placement only
// selects which stages route through their experts in the forward pass and
// expose parameters to the optimizer.
struct ToyStack {
    MoeLoraLayer l1;  // input_dim -> hidden_dim
    MoeLoraLayer l2;  // hidden_dim -> classes_per_task
    Placement placement = Placement::kBoth;

    ToyStack(const TrainConfig& config, std::mt19937_64& init_rng);
    bool adapt1() const { return placement != Placement::kSecond; }
    bool adapt2() const { return placement != Placement::kFirst; }
};

// A stage narrower than 2*rank clamps the expert rank to
// min(rank, d_in/2, d_out/2), keeping the alpha/rank scale of the
// configured pair (alpha_eff = alpha * rank_eff / rank).
std::size_t effective_rank(const TrainConfig& config, std::size_t d_in, std::size_t d_out);

std::vector<Tensor> trainable_parameters(const ToyStack& stack);
std::vector<NamedParam> all_parameters(const ToyStack& stack);  // checkpoint view

struct ForwardTrace {
    Tensor logits;
    std::vector<MoeOutput> moe;           // one per adapted stage, stage order
    std::vector<std::size_t> moe_layers;  // 0-based stage index per entry
};

// need_all_experts and dropout_rng are forwarded to moe_forward of each
// adapted stage; a null dropout_rng is evaluation mode.
ForwardTrace stack_forward(const ToyStack& stack, const Tensor& x, bool need_all_experts,
                           std::mt19937_64* dropout_rng);

struct StepRecord {
    std::size_t step = 0;  // 1-based optimizer step
    double ce = 0.0;
    double con = 0.0;
    double total = 0.0;
};

struct EvalRecord {
    std::size_t step = 0;
    int task = -1;  // task index, or -1 for the whole test set
    double accuracy = 0.0;
};

struct TrainState {
    TrainConfig config;
    std::shared_ptr<ToyStack> model;
    std::vector<Tensor> trainable;
    AdamW opt;
    std::size_t step = 0;
    std::vector<StepRecord> step_log;
    std::vector<EvalRecord> eval_log;
    std::vector<RoutingRecord> routing_log;  // final test-set pass, adapted stages
    std::vector<ReprRecord> repr_log;        // final pass, subsampled tokens, all experts
    double final_accuracy = 0.0;
};

// One micro-batch objective assembled per the loop contract above, left
// un-backwarded so gradient checks can differentiate through it. ce and con
// are the batch means as doubles; step only labels non-finite diagnostics.
struct MicroLoss {
    Tensor objective;
    double ce = 0.0;
    double con = 0.0;
};
MicroLoss micro_batch_objective(const ToyStack& stack, const TrainConfig& config,
                                const std::vector<Sample>& batch, std::mt19937_64* dropout_rng,
                                std::mt19937_64& anchor_rng, std::size_t step);

// Accuracy of argmax(logits) over the given samples, no dropout, top-k
// routing. Returns one entry per task plus the overall fraction.
struct EvalResult {
    std::vector<double> per_task;
    double overall = 0.0;
};
EvalResult evaluate(const ToyStack& stack, const std::vector<Sample>& samples,
                    std::size_t num_tasks);

// Runs the documented loop. Aborts with DomainError naming the optimizer
// step and stage if any loss term turns non-finite.
TrainState train(const TrainConfig& config, const Dataset& dataset);

// One train run per (lambda, seed) over seeds config.seed .. config.seed +
// num_seeds - 1. Each cell reports final test accuracy plus the two
// specialization summaries: mean absolute off-diagonal representation
// cosine and mean pairwise task workload divergence. Runs are independent;
// threads > 1 distributes them across that many workers.
struct SweepCell {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double off_diag_mean = 0.0;
    double task_jsd = 0.0;
};
std::vector<SweepCell> sweep_lambda(const TrainConfig& base, const Dataset& dataset,
                                    const std::vector<double>& lambdas = {0.0, 0.001, 0.01, 0.1,
                                                                          1.0},
                                    std::size_t num_seeds = 5, std::size_t threads = 1);

// Median over seeds within each lambda, in the order lambdas first appear.
struct SweepSummary {
    double lambda = 0.0;
    double median_accuracy = 0.0;
    double median_off_diag = 0.0;
    double median_jsd = 0.0;
};
std::vector<SweepSummary> summarize_sweep(const std::vector<SweepCell>& cells);

double median(std::vector<double> values);  // empty input is a ContractError

}  // namespace comoe
