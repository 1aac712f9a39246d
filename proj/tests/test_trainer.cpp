// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "comoe/contrastive.hpp"
#include "comoe/trainer.hpp"

using namespace comoe;

namespace {

TrainConfig small_config() {
    TrainConfig c;
    c.n_experts = 4;
    c.k = 2;
    c.rank = 4;
    c.alpha = 8.0;
    c.hidden_dim = 8;
    c.lr = 1e-3;
    c.batch_size = 4;
    c.accumulation_steps = 2;
    c.epochs = 1;
    c.dropout = 0.0;
    c.lambda = 0.01;
    c.seed = 42;
    c.data.num_tasks = 2;
    c.data.input_dim = 8;
    c.data.classes_per_task = 2;
    c.data.cluster_separation = 4.0;
    c.data.samples_per_task = 20;
    c.data.label_noise = 0.0;
    return c;
}

// Plain-double dense forward, the frozen path the adapted stack must match
// exactly while every B is zero.
std::vector<double> dense_oracle(const std::vector<std::vector<double>>& W1,
                                 const std::vector<std::vector<double>>& W2,
                                 const std::vector<double>& x) {
    std::vector<double> h(W1.size(), 0.0);
    for (std::size_t i = 0; i < W1.size(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) acc += W1[i][j] * x[j];
        h[i] = std::tanh(acc);
    }
    std::vector<double> out(W2.size(), 0.0);
    for (std::size_t i = 0; i < W2.size(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < h.size(); ++j) acc += W2[i][j] * h[j];
        out[i] = acc;
    }
    return out;
}

std::vector<std::vector<double>> rows_of(const Tensor& m) {
    std::vector<std::vector<double>> rows(m.dim(0), std::vector<double>(m.dim(1)));
    for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < m.dim(1); ++j) rows[i][j] = m.at(i, j);
    return rows;
}

}  // namespace

TEST_CASE("config validation enforces ranges and the k >= 2 contrastive rule") {
    TrainConfig c = small_config();
    CHECK_NOTHROW(validate_config(c));
    c.k = 4;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.k = 1;  // fine without the contrastive term, rejected with it
    c.lambda = 0.0;
    CHECK_NOTHROW(validate_config(c));
    c.lambda = 0.01;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.lr = 0.0;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.tau = 0.0;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.lambda = -0.1;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.dropout = 1.0;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.batch_size = 0;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
    c = small_config();
    c.data.cluster_separation = -1.0;
    CHECK_THROWS_AS(validate_config(c), ValidationError);
}

TEST_CASE("config json round-trips every field") {
    TrainConfig c;
    c.n_experts = 6;
    c.k = 3;
    c.rank = 8;
    c.alpha = 16.0;
    c.hidden_dim = 24;
    c.placement = Placement::kFirst;
    c.lr = 3e-4;
    c.batch_size = 8;
    c.accumulation_steps = 4;
    c.epochs = 3;
    c.max_steps = 50;
    c.dropout = 0.1;
    c.weight_decay = 0.02;
    c.beta1 = 0.8;
    c.beta2 = 0.99;
    c.adam_eps = 1e-9;
    c.lambda = 0.1;
    c.tau = 0.05;
    c.epsilon = 1e-4;
    c.loss_variant = LossVariant::kEq12;
    c.stop_grad_negatives = true;
    c.seed = 777;
    c.data.num_tasks = 3;
    c.data.input_dim = 12;
    c.data.classes_per_task = 3;
    c.data.cluster_separation = 5.5;
    c.data.samples_per_task = 60;
    c.data.label_noise = 0.25;
    TrainConfig r = config_from_json(config_to_json(c));
    CHECK(r.n_experts == c.n_experts);
    CHECK(r.k == c.k);
    CHECK(r.rank == c.rank);
    CHECK(r.alpha == c.alpha);
    CHECK(r.hidden_dim == c.hidden_dim);
    CHECK(r.placement == c.placement);
    CHECK(r.lr == c.lr);
    CHECK(r.batch_size == c.batch_size);
    CHECK(r.accumulation_steps == c.accumulation_steps);
    CHECK(r.epochs == c.epochs);
    CHECK(r.max_steps == c.max_steps);
    CHECK(r.dropout == c.dropout);
    CHECK(r.weight_decay == c.weight_decay);
    CHECK(r.beta1 == c.beta1);
    CHECK(r.beta2 == c.beta2);
    CHECK(r.adam_eps == c.adam_eps);
    CHECK(r.lambda == c.lambda);
    CHECK(r.tau == c.tau);
    CHECK(r.epsilon == c.epsilon);
    CHECK(r.loss_variant == c.loss_variant);
    CHECK(r.stop_grad_negatives == c.stop_grad_negatives);
    CHECK(r.seed == c.seed);
    CHECK(r.data.num_tasks == c.data.num_tasks);
    CHECK(r.data.input_dim == c.data.input_dim);
    CHECK(r.data.classes_per_task == c.data.classes_per_task);
    CHECK(r.data.cluster_separation == c.data.cluster_separation);
    CHECK(r.data.samples_per_task == c.data.samples_per_task);
    CHECK(r.data.label_noise == c.data.label_noise);
}

TEST_CASE("config json rejects unknown keys, bad types, and bad enums") {
    CHECK_THROWS_AS(config_from_json("not json"), ValidationError);
    CHECK_THROWS_AS(config_from_json("[1,2]"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"n_expertz\": 4}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"lr\": \"fast\"}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"k\": -1}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"placement\": \"everywhere\"}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"loss_variant\": \"eq13\"}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"data\": {\"num_taskz\": 2}}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"data\": 3}"), ValidationError);
    CHECK_THROWS_AS(config_from_json("{\"stop_grad_negatives\": 1}"), ValidationError);
    // Valid but out of range once assembled.
    CHECK_THROWS_AS(config_from_json("{\"k\": 9}"), ValidationError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("adamw leaves parameters unchanged on zero gradient and zero decay") {
    Tensor p = Tensor::from({1.5, -2.25, 0.75}, {3}, true);
    std::vector<Tensor> params{p};
    AdamW opt;
    opt.weight_decay = 0.0;
    opt.step(params);  // no gradient accumulator allocated at all
    CHECK(p.at(0) == 1.5);
    CHECK(p.at(1) == -2.25);
    CHECK(p.at(2) == 0.75);
    backward(scale(sum(p), 0.0));  // allocates a zero gradient
    opt.step(params);
    CHECK(p.at(0) == 1.5);
    CHECK(p.at(1) == -2.25);
    CHECK(p.at(2) == 0.75);
}

TEST_CASE("adamw single-step update matches scalar arithmetic") {
    Tensor p = Tensor::scalar(1.0, true);
    backward(scale(p, 0.5));  // gradient 0.5
    std::vector<Tensor> params{p};
    AdamW opt;
    opt.lr = 0.1;
    opt.weight_decay = 0.01;
    opt.step(params);
    const double g = 0.5;
    const double m = 0.9 * 0.0 + (1.0 - 0.9) * g;
    const double v = 0.999 * 0.0 + (1.0 - 0.999) * g * g;
    const double mhat = m / (1.0 - 0.9);
    const double vhat = v / (1.0 - 0.999);
    const double expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.value() == expected);
    CHECK(opt.t == 1);
}

TEST_CASE("adamw trajectories are deterministic and shapes are checked") {
    auto run = [](int steps) {
        Tensor p = Tensor::from({0.3, -0.7}, {2}, true);
        std::vector<Tensor> params{p};
        AdamW opt;
        for (int s = 0; s < steps; ++s) {
            backward(scale(sum(mul(p, p)), 0.5));
            opt.step(params);
            p.zero_grad();
        }
        return p.data();
    };
    const std::vector<double> a = run(5);
    const std::vector<double> b = run(5);
    CHECK(a == b);

    Tensor q = Tensor::from({1.0, 2.0}, {2}, true);
    std::vector<Tensor> one{q};
    AdamW opt;
    opt.step(one);
    std::vector<Tensor> two{q, Tensor::scalar(1.0, true)};
    CHECK_THROWS_AS(opt.step(two), ShapeError);
}

TEST_CASE("effective rank clamps to narrow stages and keeps the alpha/rank scale") {
    TrainConfig c = small_config();
    c.rank = 16;
    c.alpha = 32.0;
    c.hidden_dim = 8;
    CHECK(effective_rank(c, 32, 8) == 4);
    CHECK(effective_rank(c, 8, 2) == 1);
    CHECK(effective_rank(c, 64, 64) == 16);
    std::mt19937_64 rng(1);
    ToyStack stack(c, rng);
    CHECK(stack.l1.experts[0].rank == 4);         // min(16, 8/2, 8/2)
    CHECK(stack.l1.experts[0].scaling() == 2.0);  // alpha/rank preserved
    CHECK(stack.l2.experts[0].rank == 1);         // classes_per_task = 2
    CHECK(stack.l2.experts[0].scaling() == 2.0);
}

TEST_CASE("trainable parameters follow the documented order and placement") {
    TrainConfig c = small_config();
    std::mt19937_64 rng(3);
    ToyStack stack(c, rng);
    std::vector<Tensor> params = trainable_parameters(stack);
    REQUIRE(params.size() == 2 * (2 * 4 + 1));
    CHECK(params[0].node() == stack.l1.experts[0].A.node());
    CHECK(params[1].node() == stack.l1.experts[0].B.node());
    CHECK(params[7].node() == stack.l1.experts[3].B.node());
    CHECK(params[8].node() == stack.l1.router.G.node());
    CHECK(params[9].node() == stack.l2.experts[0].A.node());
    CHECK(params[17].node() == stack.l2.router.G.node());

    c.placement = Placement::kFirst;
    std::mt19937_64 rng2(3);
    ToyStack first(c, rng2);
    CHECK(trainable_parameters(first).size() == 9);
    ForwardTrace tr = stack_forward(first, Tensor::zeros({8}), false, nullptr);
    REQUIRE(tr.moe_layers.size() == 1);
    CHECK(tr.moe_layers[0] == 0);

    c.placement = Placement::kSecond;
    std::mt19937_64 rng3(3);
    ToyStack second(c, rng3);
    CHECK(trainable_parameters(second).size() == 9);
    ForwardTrace tr2 = stack_forward(second, Tensor::zeros({8}), false, nullptr);
    REQUIRE(tr2.moe_layers.size() == 1);
    CHECK(tr2.moe_layers[0] == 1);

    // Frozen weights do not depend on placement: same init stream, same W0s.
    CHECK(first.l1.W0.data() == second.l1.W0.data());
    CHECK(first.l2.W0.data() == second.l2.W0.data());
}

TEST_CASE("fresh stack with zero B equals the dense frozen oracle exactly") {
    TrainConfig c = small_config();
    std::mt19937_64 rng(9);
    ToyStack stack(c, rng);
    const auto W1 = rows_of(stack.l1.W0);
    const auto W2 = rows_of(stack.l2.W0);
    Dataset ds = generate_dataset(c.data, 4);
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        const Sample& s = ds.test[i];
        ForwardTrace tr = stack_forward(stack, Tensor::from(s.x, {8}), false, nullptr);
        const std::vector<double> expect = dense_oracle(W1, W2, s.x);
        REQUIRE(tr.logits.size() == expect.size());
        for (std::size_t j = 0; j < expect.size(); ++j) CHECK(tr.logits.at(j) == expect[j]);
    }
}

TEST_CASE("train logs steps, evals, routing, and representations") {
    TrainConfig c = small_config();
    Dataset ds = generate_dataset(c.data, 4);
    TrainState st = train(c, ds);
    // 32 train samples / batch 4 = 8 micro-batches, accumulation 2 -> 4 steps.
    REQUIRE(st.step_log.size() == 4);
    CHECK(st.step == 4);
    for (std::size_t i = 0; i < st.step_log.size(); ++i) {
        CHECK(st.step_log[i].step == i + 1);
        CHECK(std::isfinite(st.step_log[i].total));
    }
    // One eval block after the single epoch: 2 task rows + 1 overall row.
    REQUIRE(st.eval_log.size() == 3);
    CHECK(st.eval_log[2].task == -1);
    CHECK(st.eval_log[2].accuracy == st.final_accuracy);
    const double weighted =
        0.5 * (st.eval_log[0].accuracy + st.eval_log[1].accuracy);  // equal task counts
    CHECK(st.eval_log[2].accuracy == doctest::Approx(weighted).epsilon(1e-12));
    // 8 test tokens x 2 stages x k=2 routing rows; all experts dumped.
    CHECK(st.routing_log.size() == 8 * 2 * 2);
    CHECK(st.repr_log.size() == 8 * 2 * 4);
    for (const ReprRecord& r : st.repr_log) {
        CHECK(r.value.size() == (r.layer == 0 ? 8 : 2));
    }
}

TEST_CASE("every logged total equals ce + lambda * con by the same expression") {
    TrainConfig c = small_config();
    c.lambda = 0.05;
    Dataset ds = generate_dataset(c.data, 8);
    TrainState st = train(c, ds);
    for (const StepRecord& r : st.step_log) {
        CHECK(r.total == r.ce + c.lambda * r.con);
        CHECK(r.con > 0.0);
    }
}

TEST_CASE("lambda zero runs log exactly zero contrastive loss") {
    TrainConfig c = small_config();
    c.lambda = 0.0;
    Dataset ds = generate_dataset(c.data, 8);
    TrainState st = train(c, ds);
    for (const StepRecord& r : st.step_log) {
        CHECK(r.con == 0.0);
        CHECK(r.total == r.ce);
    }
}

TEST_CASE("identical config and dataset reproduce the run bitwise") {
    TrainConfig c = small_config();
    c.dropout = 0.1;  // exercise the dropout stream too
    c.epochs = 2;
    Dataset ds = generate_dataset(c.data, 21);
    TrainState a = train(c, ds);
    TrainState b = train(c, ds);
    REQUIRE(a.step_log.size() == b.step_log.size());
    for (std::size_t i = 0; i < a.step_log.size(); ++i) {
        CHECK(a.step_log[i].ce == b.step_log[i].ce);
        CHECK(a.step_log[i].con == b.step_log[i].con);
        CHECK(a.step_log[i].total == b.step_log[i].total);
    }
    const std::vector<Tensor> pa = trainable_parameters(*a.model);
    const std::vector<Tensor> pb = trainable_parameters(*b.model);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data() == pb[i].data());
    REQUIRE(a.routing_log.size() == b.routing_log.size());
    for (std::size_t i = 0; i < a.routing_log.size(); ++i) {
        CHECK(a.routing_log[i].expert == b.routing_log[i].expert);
        CHECK(a.routing_log[i].weight == b.routing_log[i].weight);
    }
    // A different seed must actually change the trajectory.
    TrainConfig c2 = c;
    c2.seed = c.seed + 1;
    TrainState d = train(c2, ds);
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size() && !any_diff; ++i) {
        any_diff = pa[i].data() != trainable_parameters(*d.model)[i].data();
    }
    CHECK(any_diff);
}

TEST_CASE("both loss variants and stop-grad run and differ") {
    TrainConfig c = small_config();
    Dataset ds = generate_dataset(c.data, 13);
    TrainState alg1 = train(c, ds);
    TrainConfig c12 = c;
    c12.loss_variant = LossVariant::kEq12;
    TrainState eq12 = train(c12, ds);
    CHECK(alg1.step_log[0].con != eq12.step_log[0].con);
    // The summed variant evaluates k query terms, so it starts near k times
    // the single-anchor value on a fresh stack (all representations zero).
    CHECK(eq12.step_log[0].con ==
          doctest::Approx(2.0 * alg1.step_log[0].con).epsilon(1e-6));
    TrainConfig csg = c;
    csg.stop_grad_negatives = true;
    TrainState sg = train(csg, ds);
    CHECK(sg.step_log.back().total != alg1.step_log.back().total);
}

TEST_CASE("max_steps caps the run mid-epoch") {
    TrainConfig c = small_config();
    c.epochs = 50;
    c.max_steps = 3;
    Dataset ds = generate_dataset(c.data, 4);
    TrainState st = train(c, ds);
    CHECK(st.step == 3);
    CHECK(st.step_log.size() == 3);
    CHECK(st.eval_log.size() == 3);  // one eval block at the stop point
}

TEST_CASE("a trailing partial accumulation group still steps") {
    TrainConfig c = small_config();
    c.accumulation_steps = 3;  // 8 micro-batches -> groups of 3, 3, 2
    Dataset ds = generate_dataset(c.data, 4);
    TrainState st = train(c, ds);
    CHECK(st.step_log.size() == 3);
    // A trailing partial micro-batch is dropped instead.
    TrainConfig c5 = small_config();
    c5.batch_size = 5;  // 32 train samples -> 6 micro-batches, 2 left over
    c5.accumulation_steps = 2;
    TrainState st5 = train(c5, ds);
    CHECK(st5.step_log.size() == 3);
}

TEST_CASE("train rejects mismatched datasets and empty splits") {
    TrainConfig c = small_config();
    Dataset ds = generate_dataset(c.data, 4);
    TrainConfig wrong = c;
    wrong.data.input_dim = 16;
    wrong.data.num_tasks = 2;
    CHECK_THROWS_AS(train(wrong, ds), ContractError);
    Dataset empty = ds;
    empty.test.clear();
    CHECK_THROWS_AS(train(c, empty), ContractError);
}

TEST_CASE("non-finite losses abort naming the step and stage") {
    TrainConfig c = small_config();
    Dataset ds = generate_dataset(c.data, 4);
    std::vector<Sample> batch(ds.train.begin(), ds.train.begin() + 4);
    std::mt19937_64 anchor(1);
    const double nan = std::numeric_limits<double>::quiet_NaN();

    // Poisoning an always-activated expert surfaces in the cross-entropy.
    // Copies of a stack share parameter nodes, so each case builds its own.
    std::mt19937_64 rng_a(17);
    ToyStack ce_stack(c, rng_a);
    ce_stack.l1.router.G.update_data(std::vector<double>(4 * 8, 0.0));  // ties pick experts 0,1
    ce_stack.l1.experts[0].B.update_data(std::vector<double>(8 * 4, nan));
    CHECK_THROWS_WITH_AS(micro_batch_objective(ce_stack, c, batch, nullptr, anchor, 7),
                         doctest::Contains("non-finite cross-entropy at step 7"),
                         DomainError);

    // Poisoning a never-activated expert only reaches the contrastive term.
    std::mt19937_64 rng_b(17);
    ToyStack con_stack(c, rng_b);
    con_stack.l1.router.G.update_data(std::vector<double>(4 * 8, 0.0));
    con_stack.l1.experts[3].A.update_data(std::vector<double>(4 * 8, nan));
    CHECK_THROWS_WITH_AS(micro_batch_objective(con_stack, c, batch, nullptr, anchor, 3),
                         doctest::Contains("non-finite contrastive loss at step 3, stage 1"),
                         DomainError);
}

TEST_CASE("sweep produces one row per lambda per seed with baseline parity") {
    TrainConfig c = small_config();
    Dataset ds = generate_dataset(c.data, 4);
    std::vector<SweepCell> cells = sweep_lambda(c, ds, {0.0, 0.01}, 2);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].lambda == 0.0);
    CHECK(cells[0].seed == 42);
    CHECK(cells[1].seed == 43);
    CHECK(cells[2].lambda == 0.01);
    for (const SweepCell& cell : cells) {
        CHECK(cell.accuracy >= 0.0);
        CHECK(cell.accuracy <= 1.0);
        CHECK(cell.off_diag_mean >= 0.0);
        CHECK(cell.off_diag_mean <= 1.0);
        CHECK(cell.task_jsd >= 0.0);
        CHECK(cell.task_jsd <= std::log(2.0) + 1e-12);
    }
    // A single lambda = 0 entry is exactly one baseline run.
    std::vector<SweepCell> baseline = sweep_lambda(c, ds, {0.0}, 1);
    REQUIRE(baseline.size() == 1);
    TrainConfig b = c;
    b.lambda = 0.0;
    TrainState ref = train(b, ds);
    CHECK(baseline[0].accuracy == ref.final_accuracy);

    // Threaded execution returns identical cells in identical order.
    std::vector<SweepCell> threaded = sweep_lambda(c, ds, {0.0, 0.01}, 2, 3);
    REQUIRE(threaded.size() == cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        CHECK(threaded[i].lambda == cells[i].lambda);
        CHECK(threaded[i].seed == cells[i].seed);
        CHECK(threaded[i].accuracy == cells[i].accuracy);
        CHECK(threaded[i].off_diag_mean == cells[i].off_diag_mean);
        CHECK(threaded[i].task_jsd == cells[i].task_jsd);
    }
}

TEST_CASE("median and sweep summaries") {
    CHECK_THROWS_AS(median({}), ContractError);
    CHECK(median({3.0}) == 3.0);
    CHECK(median({3.0, 1.0}) == 2.0);
    CHECK(median({5.0, 1.0, 3.0}) == 3.0);
    CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
    std::vector<SweepCell> cells = {
        {0.0, 1, 0.50, 0.9, 0.1}, {0.0, 2, 0.60, 0.8, 0.2}, {0.0, 3, 0.55, 0.7, 0.3},
        {0.1, 1, 0.70, 0.4, 0.5}, {0.1, 2, 0.80, 0.2, 0.6}, {0.1, 3, 0.65, 0.3, 0.4},
    };
    std::vector<SweepSummary> sums = summarize_sweep(cells);
    REQUIRE(sums.size() == 2);
    CHECK(sums[0].lambda == 0.0);
    CHECK(sums[0].median_accuracy == 0.55);
    CHECK(sums[0].median_off_diag == 0.8);
    CHECK(sums[0].median_jsd == 0.2);
    CHECK(sums[1].lambda == 0.1);
    CHECK(sums[1].median_accuracy == 0.70);
    CHECK(sums[1].median_off_diag == 0.3);
    CHECK(sums[1].median_jsd == 0.5);
}
