// SPDX-License-Identifier: Apache-2.0
#include "comoe/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>
#include <utility>

#include <json.hpp>

#include "comoe/contrastive.hpp"

namespace comoe {

void validate_config(const TrainConfig& c) {
    if (c.n_experts < 2) throw ValidationError("config: n_experts must be at least 2");
    if (c.k < 1 || c.k >= c.n_experts) {
        throw ValidationError("config: k must satisfy 1 <= k < n_experts, got k=" +
                              std::to_string(c.k) + " n_experts=" + std::to_string(c.n_experts));
    }
    if (c.lambda > 0.0 && c.k < 2) {
        throw ValidationError("config: the contrastive term needs k >= 2 so the anchor has a "
                              "positive set; set lambda to 0 or raise k");
    }
    if (c.rank == 0) throw ValidationError("config: rank must be positive");
    if (!(c.alpha > 0.0)) throw ValidationError("config: alpha must be positive");
    if (c.hidden_dim < 2) throw ValidationError("config: hidden_dim must be at least 2");
    if (!(c.lr > 0.0)) throw ValidationError("config: lr must be positive");
    if (c.batch_size == 0) throw ValidationError("config: batch_size must be positive");
    if (c.accumulation_steps == 0) {
        throw ValidationError("config: accumulation_steps must be positive");
    }
    if (c.epochs == 0) throw ValidationError("config: epochs must be positive");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) {
        throw ValidationError("config: dropout must lie in [0, 1)");
    }
    if (!(c.weight_decay >= 0.0)) throw ValidationError("config: weight_decay must be >= 0");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
        throw ValidationError("config: betas must lie in [0, 1)");
    }
    if (!(c.adam_eps > 0.0)) throw ValidationError("config: adam_eps must be positive");
    if (!(c.lambda >= 0.0)) throw ValidationError("config: lambda must be >= 0");
    if (!(c.tau > 0.0)) throw ValidationError("config: tau must be positive");
    if (!(c.epsilon >= 0.0)) throw ValidationError("config: epsilon must be >= 0");
    validate_spec(c.data);
}

namespace {

std::string placement_name(Placement p) {
    switch (p) {
        case Placement::kBoth: return "both";
        case Placement::kFirst: return "first";
        case Placement::kSecond: return "second";
    }
    return "both";
}

Placement placement_from(const std::string& s) {
    if (s == "both") return Placement::kBoth;
    if (s == "first") return Placement::kFirst;
    if (s == "second") return Placement::kSecond;
    throw ValidationError("config: placement must be one of both|first|second, got \"" + s + "\"");
}

std::string variant_name(LossVariant v) {
    return v == LossVariant::kAlgorithm1 ? "algorithm1" : "eq12";
}

LossVariant variant_from(const std::string& s) {
    if (s == "algorithm1") return LossVariant::kAlgorithm1;
    if (s == "eq12") return LossVariant::kEq12;
    throw ValidationError("config: loss_variant must be algorithm1|eq12, got \"" + s + "\"");
}

std::size_t as_size(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw ValidationError("config: \"" + key + "\" must be a nonnegative integer");
    }
    const auto i = v.get<long long>();
    if (i < 0) throw ValidationError("config: \"" + key + "\" must be nonnegative");
    return static_cast<std::size_t>(i);
}

double as_double(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number()) throw ValidationError("config: \"" + key + "\" must be a number");
    return v.get<double>();
}

bool as_bool(const nlohmann::json& v, const std::string& key) {
    if (!v.is_boolean()) throw ValidationError("config: \"" + key + "\" must be a boolean");
    return v.get<bool>();
}

std::string as_string(const nlohmann::json& v, const std::string& key) {
    if (!v.is_string()) throw ValidationError("config: \"" + key + "\" must be a string");
    return v.get<std::string>();
}

void apply_data_key(SyntheticTaskSpec& d, const std::string& key, const nlohmann::json& v) {
    if (key == "num_tasks") d.num_tasks = as_size(v, key);
    else if (key == "input_dim") d.input_dim = as_size(v, key);
    else if (key == "classes_per_task") d.classes_per_task = as_size(v, key);
    else if (key == "cluster_separation") d.cluster_separation = as_double(v, key);
    else if (key == "samples_per_task") d.samples_per_task = as_size(v, key);
    else if (key == "label_noise") d.label_noise = as_double(v, key);
    else throw ValidationError("config: unknown key \"data." + key + "\"");
}

}  // namespace

TrainConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config: expected a JSON object");
    TrainConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_experts") c.n_experts = as_size(v, key);
        else if (key == "k") c.k = as_size(v, key);
        else if (key == "rank") c.rank = as_size(v, key);
        else if (key == "alpha") c.alpha = as_double(v, key);
        else if (key == "hidden_dim") c.hidden_dim = as_size(v, key);
        else if (key == "placement") c.placement = placement_from(as_string(v, key));
        else if (key == "lr") c.lr = as_double(v, key);
        else if (key == "batch_size") c.batch_size = as_size(v, key);
        else if (key == "accumulation_steps") c.accumulation_steps = as_size(v, key);
        else if (key == "epochs") c.epochs = as_size(v, key);
        else if (key == "max_steps") c.max_steps = as_size(v, key);
        else if (key == "dropout") c.dropout = as_double(v, key);
        else if (key == "weight_decay") c.weight_decay = as_double(v, key);
        else if (key == "beta1") c.beta1 = as_double(v, key);
        else if (key == "beta2") c.beta2 = as_double(v, key);
        else if (key == "adam_eps") c.adam_eps = as_double(v, key);
        else if (key == "lambda") c.lambda = as_double(v, key);
        else if (key == "tau") c.tau = as_double(v, key);
        else if (key == "epsilon") c.epsilon = as_double(v, key);
        else if (key == "loss_variant") c.loss_variant = variant_from(as_string(v, key));
        else if (key == "stop_grad_negatives") c.stop_grad_negatives = as_bool(v, key);
        else if (key == "seed") {
            if (!v.is_number_integer() && !v.is_number_unsigned()) {
                throw ValidationError("config: \"seed\" must be an integer");
            }
            c.seed = v.get<std::uint64_t>();
        } else if (key == "data") {
            if (!v.is_object()) throw ValidationError("config: \"data\" must be an object");
            for (const auto& [dk, dv] : v.items()) apply_data_key(c.data, dk, dv);
        } else {
            throw ValidationError("config: unknown key \"" + key + "\"");
        }
    }
    validate_config(c);
    return c;
}

std::string config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["n_experts"] = c.n_experts;
    j["k"] = c.k;
    j["rank"] = c.rank;
    j["alpha"] = c.alpha;
    j["hidden_dim"] = c.hidden_dim;
    j["placement"] = placement_name(c.placement);
    j["lr"] = c.lr;
    j["batch_size"] = c.batch_size;
    j["accumulation_steps"] = c.accumulation_steps;
    j["epochs"] = c.epochs;
    j["max_steps"] = c.max_steps;
    j["dropout"] = c.dropout;
    j["weight_decay"] = c.weight_decay;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["lambda"] = c.lambda;
    j["tau"] = c.tau;
    j["epsilon"] = c.epsilon;
    j["loss_variant"] = variant_name(c.loss_variant);
    j["stop_grad_negatives"] = c.stop_grad_negatives;
    j["seed"] = c.seed;
    j["data"] = nlohmann::ordered_json{{"num_tasks", c.data.num_tasks},
                                       {"input_dim", c.data.input_dim},
                                       {"classes_per_task", c.data.classes_per_task},
                                       {"cluster_separation", c.data.cluster_separation},
                                       {"samples_per_task", c.data.samples_per_task},
                                       {"label_noise", c.data.label_noise}};
    return j.dump(2) + "\n";
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_from_json(buf.str());
}

void AdamW::step(std::vector<Tensor>& params) {
    if (m.empty() && !params.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].size(), 0.0);
            v[i].assign(params[i].size(), 0.0);
        }
    }
    if (m.size() != params.size()) {
        throw ShapeError("adamw: parameter count changed between steps: " +
                         std::to_string(m.size()) + " vs " + std::to_string(params.size()));
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (m[i].size() != p.size()) {
            throw ShapeError("adamw: parameter " + std::to_string(i) + " changed size: " +
                             std::to_string(m[i].size()) + " vs " + std::to_string(p.size()));
        }
        const std::vector<double>* g = p.has_grad() ? &p.grad() : nullptr;
        std::vector<double> next = p.data();
        for (std::size_t e = 0; e < next.size(); ++e) {
            const double ge = g != nullptr ? (*g)[e] : 0.0;
            m[i][e] = beta1 * m[i][e] + (1.0 - beta1) * ge;
            v[i][e] = beta2 * v[i][e] + (1.0 - beta2) * ge * ge;
            const double mhat = m[i][e] / bc1;
            const double vhat = v[i][e] / bc2;
            next[e] = next[e] * (1.0 - lr * weight_decay) - lr * mhat / (std::sqrt(vhat) + eps);
        }
        p.update_data(next);
    }
}

std::size_t effective_rank(const TrainConfig& config, std::size_t d_in, std::size_t d_out) {
    const std::size_t cap = std::min(d_in, d_out) / 2;
    if (cap == 0) {
        throw ValidationError("stack: a stage of size " + std::to_string(d_in) + "x" +
                              std::to_string(d_out) + " is too narrow for a low-rank expert");
    }
    return std::min(config.rank, cap);
}

namespace {

double stage_alpha(const TrainConfig& config, std::size_t r_eff) {
    // Clamping the rank keeps the configured alpha/rank scale.
    return config.alpha * static_cast<double>(r_eff) / static_cast<double>(config.rank);
}

MoeLoraLayer make_stage(const TrainConfig& config, std::size_t d_in, std::size_t d_out,
                        std::mt19937_64& rng) {
    const std::size_t r = effective_rank(config, d_in, d_out);
    return MoeLoraLayer(d_in, d_out, config.n_experts, config.k, r, stage_alpha(config, r),
                        config.dropout, rng);
}

}  // namespace

ToyStack::ToyStack(const TrainConfig& config, std::mt19937_64& init_rng)
    : l1(make_stage(config, config.data.input_dim, config.hidden_dim, init_rng)),
      l2(make_stage(config, config.hidden_dim, config.data.classes_per_task, init_rng)),
      placement(config.placement) {}

std::vector<Tensor> trainable_parameters(const ToyStack& stack) {
    std::vector<Tensor> out;
    auto take = [&out](const MoeLoraLayer& layer) {
        for (const LoraExpert& e : layer.experts) {
            out.push_back(e.A);
            out.push_back(e.B);
        }
        out.push_back(layer.router.G);
    };
    if (stack.adapt1()) take(stack.l1);
    if (stack.adapt2()) take(stack.l2);
    return out;
}

std::vector<NamedParam> all_parameters(const ToyStack& stack) {
    std::vector<NamedParam> out = layer_parameters(stack.l1, "l1");
    std::vector<NamedParam> l2 = layer_parameters(stack.l2, "l2");
    out.insert(out.end(), l2.begin(), l2.end());
    return out;
}

ForwardTrace stack_forward(const ToyStack& stack, const Tensor& x, bool need_all_experts,
                           std::mt19937_64* dropout_rng) {
    ForwardTrace tr;
    Tensor h_pre;
    if (stack.adapt1()) {
        MoeOutput o = moe_forward(stack.l1, x, need_all_experts, dropout_rng);
        h_pre = o.y;
        tr.moe.push_back(std::move(o));
        tr.moe_layers.push_back(0);
    } else {
        h_pre = matmul(stack.l1.W0, x);
    }
    Tensor h = tanh(h_pre);
    if (stack.adapt2()) {
        MoeOutput o = moe_forward(stack.l2, h, need_all_experts, dropout_rng);
        tr.logits = o.y;
        tr.moe.push_back(std::move(o));
        tr.moe_layers.push_back(1);
    } else {
        tr.logits = matmul(stack.l2.W0, h);
    }
    return tr;
}

MicroLoss micro_batch_objective(const ToyStack& stack, const TrainConfig& config,
                                const std::vector<Sample>& batch, std::mt19937_64* dropout_rng,
                                std::mt19937_64& anchor_rng, std::size_t step) {
    if (batch.empty()) throw ContractError("micro_batch_objective: empty batch");
    const bool need_all = config.lambda > 0.0;
    Tensor ce_sum;
    Tensor con_sum;
    for (const Sample& s : batch) {
        Tensor x = Tensor::from(s.x, {stack.l1.d_in()});
        ForwardTrace tr = stack_forward(stack, x, need_all, dropout_rng);
        Tensor ce_i = cross_entropy(tr.logits, s.label);
        if (!std::isfinite(ce_i.value())) {
            throw DomainError("non-finite cross-entropy at step " + std::to_string(step));
        }
        ce_sum = ce_sum.defined() ? add(ce_sum, ce_i) : ce_i;
        if (!need_all) continue;
        for (std::size_t i = 0; i < tr.moe.size(); ++i) {
            const MoeOutput& mo = tr.moe[i];
            Tensor c;
            if (config.loss_variant == LossVariant::kAlgorithm1) {
                c = contrastive_loss_single(make_contrastive_batch(
                    mo.expert_reprs, mo.decision.topk_indices, config.tau, config.epsilon,
                    anchor_rng, config.stop_grad_negatives));
            } else {
                c = contrastive_loss_sumk(mo.expert_reprs, mo.decision.topk_indices, config.tau,
                                          config.epsilon, config.stop_grad_negatives);
            }
            if (!std::isfinite(c.value())) {
                throw DomainError("non-finite contrastive loss at step " + std::to_string(step) +
                                  ", stage " + std::to_string(tr.moe_layers[i] + 1));
            }
            con_sum = con_sum.defined() ? add(con_sum, c) : c;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    MicroLoss out;
    Tensor mean_ce = scale(ce_sum, inv);
    out.ce = mean_ce.value();
    if (need_all) {
        Tensor mean_con = scale(con_sum, inv);
        out.con = mean_con.value();
        out.objective = add(mean_ce, scale(mean_con, config.lambda));
    } else {
        out.objective = mean_ce;
    }
    return out;
}

EvalResult evaluate(const ToyStack& stack, const std::vector<Sample>& samples,
                    std::size_t num_tasks) {
    if (samples.empty()) throw ContractError("evaluate: empty sample set");
    std::vector<std::size_t> correct(num_tasks, 0);
    std::vector<std::size_t> total(num_tasks, 0);
    for (const Sample& s : samples) {
        if (s.task >= num_tasks) {
            throw ValidationError("evaluate: task index " + std::to_string(s.task) +
                                  " out of range");
        }
        ForwardTrace tr =
            stack_forward(stack, Tensor::from(s.x, {stack.l1.d_in()}), false, nullptr);
        const std::vector<double>& logits = tr.logits.data();
        const std::size_t arg = static_cast<std::size_t>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        ++total[s.task];
        if (arg == s.label) ++correct[s.task];
    }
    EvalResult r;
    r.per_task.resize(num_tasks, 0.0);
    std::size_t c_all = 0;
    std::size_t t_all = 0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
        if (total[t] > 0) {
            r.per_task[t] = static_cast<double>(correct[t]) / static_cast<double>(total[t]);
        }
        c_all += correct[t];
        t_all += total[t];
    }
    r.overall = static_cast<double>(c_all) / static_cast<double>(t_all);
    return r;
}

TrainState train(const TrainConfig& config, const Dataset& dataset) {
    validate_config(config);
    if (dataset.spec.input_dim != config.data.input_dim ||
        dataset.spec.classes_per_task != config.data.classes_per_task ||
        dataset.spec.num_tasks != config.data.num_tasks) {
        throw ContractError("train: dataset shape does not match config.data");
    }
    if (dataset.train.empty() || dataset.test.empty()) {
        throw ContractError("train: both dataset splits must be non-empty");
    }
    if (dataset.train.size() < config.batch_size) {
        throw ContractError("train: training split smaller than one micro-batch");
    }

    TrainState st;
    st.config = config;
    std::mt19937_64 init_rng(config.seed);
    std::mt19937_64 shuffle_rng(config.seed + 1);
    std::mt19937_64 dropout_rng(config.seed + 2);
    std::mt19937_64 anchor_rng(config.seed + 3);
    st.model = std::make_shared<ToyStack>(config, init_rng);
    st.trainable = trainable_parameters(*st.model);
    st.opt = AdamW{config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay};

    auto record_eval = [&st, &dataset, &config]() {
        EvalResult r = evaluate(*st.model, dataset.test, config.data.num_tasks);
        for (std::size_t t = 0; t < config.data.num_tasks; ++t) {
            st.eval_log.push_back({st.step, static_cast<int>(t), r.per_task[t]});
        }
        st.eval_log.push_back({st.step, -1, r.overall});
        st.final_accuracy = r.overall;
    };

    std::vector<std::size_t> order(dataset.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<Sample> micro(config.batch_size);
    bool stopped = false;
    for (std::size_t epoch = 0; epoch < config.epochs && !stopped; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const std::size_t micro_count = order.size() / config.batch_size;
        std::size_t next = 0;
        while (next < micro_count && !stopped) {
            const std::size_t group = std::min(config.accumulation_steps, micro_count - next);
            double ce_acc = 0.0;
            double con_acc = 0.0;
            for (std::size_t gi = 0; gi < group; ++gi, ++next) {
                for (std::size_t b = 0; b < config.batch_size; ++b) {
                    micro[b] = dataset.train[order[next * config.batch_size + b]];
                }
                MicroLoss ml =
                    micro_batch_objective(*st.model, config, micro, &dropout_rng, anchor_rng,
                                          st.step + 1);
                backward(scale(ml.objective, 1.0 / static_cast<double>(group)));
                ce_acc += ml.ce;
                con_acc += ml.con;
            }
            st.opt.step(st.trainable);
            for (Tensor& p : st.trainable) p.zero_grad();
            ++st.step;
            const double ce = ce_acc / static_cast<double>(group);
            const double con = con_acc / static_cast<double>(group);
            st.step_log.push_back({st.step, ce, con, ce + config.lambda * con});
            if (config.max_steps > 0 && st.step >= config.max_steps) stopped = true;
        }
        record_eval();
    }

    // Final diagnostics pass over the test split: every expert evaluated so
    // the representation log covers negatives too; tokens subsampled by a
    // deterministic stride for the representation dump.
    const std::size_t max_tokens = 512;
    const std::size_t stride = std::max<std::size_t>(1, dataset.test.size() / max_tokens);
    for (std::size_t i = 0; i < dataset.test.size(); ++i) {
        const Sample& s = dataset.test[i];
        ForwardTrace tr =
            stack_forward(*st.model, Tensor::from(s.x, {st.model->l1.d_in()}), true, nullptr);
        const bool dump_reprs = i % stride == 0 && i / stride < max_tokens;
        for (std::size_t e = 0; e < tr.moe.size(); ++e) {
            const MoeOutput& mo = tr.moe[e];
            for (std::size_t slot = 0; slot < mo.decision.topk_indices.size(); ++slot) {
                st.routing_log.push_back({tr.moe_layers[e], i, s.task, slot,
                                          mo.decision.topk_indices[slot],
                                          mo.decision.renorm_weights.at(slot)});
            }
            if (dump_reprs) {
                for (std::size_t ex = 0; ex < mo.expert_reprs.size(); ++ex) {
                    st.repr_log.push_back({tr.moe_layers[e], i, ex, mo.expert_reprs[ex].data()});
                }
            }
        }
    }
    return st;
}

std::vector<SweepCell> sweep_lambda(const TrainConfig& base, const Dataset& dataset,
                                    const std::vector<double>& lambdas, std::size_t num_seeds,
                                    std::size_t threads) {
    if (lambdas.empty()) throw ContractError("sweep_lambda: empty lambda grid");
    if (num_seeds == 0) throw ContractError("sweep_lambda: need at least one seed");
    for (double l : lambdas) {
        if (!(l >= 0.0)) throw ValidationError("sweep_lambda: lambdas must be >= 0");
    }
    std::vector<SweepCell> cells;
    cells.reserve(lambdas.size() * num_seeds);
    for (double l : lambdas) {
        for (std::size_t s = 0; s < num_seeds; ++s) {
            SweepCell cell;
            cell.lambda = l;
            cell.seed = base.seed + s;
            cells.push_back(cell);
        }
    }
    auto run_cell = [&base, &dataset](SweepCell& cell) {
        TrainConfig c = base;
        c.lambda = cell.lambda;
        c.seed = cell.seed;
        TrainState ts = train(c, dataset);
        cell.accuracy = ts.final_accuracy;
        cell.off_diag_mean = representation_similarity(ts.repr_log).off_diag_mean;
        cell.task_jsd =
            c.data.num_tasks >= 2
                ? workload_divergence(
                      expert_workload(ts.routing_log, c.data.num_tasks, c.n_experts))
                : 0.0;
    };
    if (threads <= 1) {
        for (SweepCell& cell : cells) run_cell(cell);
        return cells;
    }
    std::atomic<std::size_t> cursor{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&cells, &cursor, &run_cell, &errors, w]() {
            try {
                for (std::size_t i = cursor.fetch_add(1); i < cells.size();
                     i = cursor.fetch_add(1)) {
                    run_cell(cells[i]);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return cells;
}

double median(std::vector<double> values) {
    if (values.empty()) throw ContractError("median: empty input");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<SweepSummary> summarize_sweep(const std::vector<SweepCell>& cells) {
    std::vector<SweepSummary> out;
    std::vector<double> seen;
    for (const SweepCell& c : cells) {
        if (std::find(seen.begin(), seen.end(), c.lambda) != seen.end()) continue;
        seen.push_back(c.lambda);
        std::vector<double> acc;
        std::vector<double> off;
        std::vector<double> jsd;
        for (const SweepCell& d : cells) {
            if (d.lambda != c.lambda) continue;
            acc.push_back(d.accuracy);
            off.push_back(d.off_diag_mean);
            jsd.push_back(d.task_jsd);
        }
        out.push_back({c.lambda, median(acc), median(off), median(jsd)});
    }
    return out;
}

}  // namespace comoe
