// SPDX-License-Identifier: Apache-2.0
#include "comoe/runio.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace comoe {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path + " (missing run artifact?)");
    return in;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

// Reads "# name vN" + header, then hands data lines to the row callback.
template <typename Fn>
void read_csv(const std::string& path, const std::string& version_tag,
              std::size_t columns, Fn&& row) {
    std::ifstream in = open_in(path);
    std::string line;
    if (!std::getline(in, line) || line != "# " + version_tag) {
        throw IoError(path + ": expected version line \"# " + version_tag + "\"");
    }
    if (!std::getline(in, line)) throw IoError(path + ": missing header line");
    std::size_t lineno = 2;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells = split_csv(line);
        if (cells.size() != columns) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(columns) + " columns, got " +
                          std::to_string(cells.size()));
        }
        try {
            row(cells);
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); }

}  // namespace

void write_run_dir(const std::string& dir, const TrainState& state) {
    if (!state.model) throw ContractError("write_run_dir: state has no trained model");
    std::filesystem::create_directories(dir);

    open_out(dir + "/config.json") << config_to_json(state.config);

    {
        std::ofstream out = open_out(dir + "/steps.csv");
        out << "# comoe-steps v1\nstep,ce,con,total\n";
        for (const StepRecord& r : state.step_log) {
            out << r.step << ',' << fmt17(r.ce) << ',' << fmt17(r.con) << ',' << fmt17(r.total)
                << '\n';
        }
    }
    {
        std::ofstream out = open_out(dir + "/eval.csv");
        out << "# comoe-eval v1\nstep,task,accuracy\n";
        for (const EvalRecord& r : state.eval_log) {
            out << r.step << ',' << r.task << ',' << fmt17(r.accuracy) << '\n';
        }
    }
    {
        std::ofstream out = open_out(dir + "/routing.csv");
        out << "# comoe-routing v1\nstage,token,task,slot,expert,weight\n";
        for (const RoutingRecord& r : state.routing_log) {
            out << r.layer << ',' << r.token << ',' << r.task << ',' << r.slot << ',' << r.expert
                << ',' << fmt17(r.weight) << '\n';
        }
    }
    {
        std::ofstream out = open_out(dir + "/reprs.csv");
        out << "# comoe-reprs v1\nstage,token,expert,dim,value\n";
        for (const ReprRecord& r : state.repr_log) {
            for (std::size_t d = 0; d < r.value.size(); ++d) {
                out << r.layer << ',' << r.token << ',' << r.expert << ',' << d << ','
                    << fmt17(r.value[d]) << '\n';
            }
        }
    }
    save_params(dir + "/params.ckpt", all_parameters(*state.model));
    {
        nlohmann::ordered_json j;
        j["final_accuracy"] = state.final_accuracy;
        j["steps"] = state.step;
        j["lambda"] = state.config.lambda;
        j["seed"] = state.config.seed;
        open_out(dir + "/summary.json") << j.dump(2) << "\n";
    }
}

std::vector<StepRecord> read_steps_csv(const std::string& path) {
    std::vector<StepRecord> out;
    read_csv(path, "comoe-steps v1", 4, [&out](const std::vector<std::string>& c) {
        out.push_back({to_size(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3])});
    });
    return out;
}

std::vector<EvalRecord> read_eval_csv(const std::string& path) {
    std::vector<EvalRecord> out;
    read_csv(path, "comoe-eval v1", 3, [&out](const std::vector<std::string>& c) {
        out.push_back({to_size(c[0]), std::stoi(c[1]), std::stod(c[2])});
    });
    return out;
}

std::vector<RoutingRecord> read_routing_csv(const std::string& path) {
    std::vector<RoutingRecord> out;
    read_csv(path, "comoe-routing v1", 6, [&out](const std::vector<std::string>& c) {
        out.push_back({to_size(c[0]), to_size(c[1]), to_size(c[2]), to_size(c[3]), to_size(c[4]),
                       std::stod(c[5])});
    });
    return out;
}

std::vector<ReprRecord> read_reprs_csv(const std::string& path) {
    // Rows may arrive in any order; rebuild vectors by (stage, token,
    // expert) and require dims to form a complete 0..D-1 range.
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>,
             std::vector<std::pair<std::size_t, double>>>
        cells;
    read_csv(path, "comoe-reprs v1", 5, [&cells](const std::vector<std::string>& c) {
        cells[{to_size(c[0]), to_size(c[1]), to_size(c[2])}].emplace_back(to_size(c[3]),
                                                                          std::stod(c[4]));
    });
    std::vector<ReprRecord> out;
    out.reserve(cells.size());
    for (auto& [key, dims] : cells) {
        std::sort(dims.begin(), dims.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        ReprRecord r;
        r.layer = std::get<0>(key);
        r.token = std::get<1>(key);
        r.expert = std::get<2>(key);
        r.value.resize(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) {
            if (dims[i].first != i) {
                throw IoError(path + ": representation with gaps in its dim column");
            }
            r.value[i] = dims[i].second;
        }
        out.push_back(std::move(r));
    }
    return out;
}

void write_report(const std::string& run_dir) {
    const TrainConfig config = load_config(run_dir + "/config.json");
    const std::vector<RoutingRecord> routing = read_routing_csv(run_dir + "/routing.csv");
    const std::vector<ReprRecord> reprs = read_reprs_csv(run_dir + "/reprs.csv");
    if (routing.empty()) throw IoError(run_dir + "/routing.csv: no routed tokens to analyze");
    if (reprs.empty()) throw IoError(run_dir + "/reprs.csv: no representations to analyze");

    const WorkloadMatrix w = expert_workload(routing, config.data.num_tasks, config.n_experts);
    const SimilarityReport sim = representation_similarity(reprs);

    {
        std::ofstream out = open_out(run_dir + "/workload.csv");
        out << "# comoe-workload v1\ntask,expert,count,freq\n";
        for (std::size_t t = 0; t < w.num_tasks; ++t) {
            for (std::size_t e = 0; e < w.num_experts; ++e) {
                out << t << ',' << e << ',' << w.count(t, e) << ',' << fmt17(w.freq(t, e)) << '\n';
            }
        }
    }
    {
        std::ofstream out = open_out(run_dir + "/similarity.csv");
        out << "# comoe-similarity v1\ni,j,cosine\n";
        for (std::size_t i = 0; i < sim.num_experts; ++i) {
            for (std::size_t j = 0; j < sim.num_experts; ++j) {
                out << i << ',' << j << ',' << fmt17(sim.cosine[i * sim.num_experts + j]) << '\n';
            }
        }
    }
    {
        std::ofstream out = open_out(run_dir + "/projection.csv");
        out << "# comoe-projection v1\nexpert,pc1,pc2\n";
        for (std::size_t e = 0; e < sim.num_experts; ++e) {
            out << e << ',' << fmt17(sim.projection[e][0]) << ',' << fmt17(sim.projection[e][1])
                << '\n';
        }
    }
    double divergence_mean = 0.0;
    bool have_divergence = false;
    {
        std::ofstream out = open_out(run_dir + "/divergence.csv");
        out << "# comoe-divergence v1\ntask_a,task_b,jsd\n";
        std::vector<std::size_t> valid;
        for (std::size_t t = 0; t < w.num_tasks; ++t) {
            if (w.row_valid[t]) valid.push_back(t);
        }
        if (valid.size() >= 2) {
            for (std::size_t i = 0; i < valid.size(); ++i) {
                for (std::size_t j = i + 1; j < valid.size(); ++j) {
                    out << valid[i] << ',' << valid[j] << ','
                        << fmt17(row_divergence(w, valid[i], valid[j])) << '\n';
                }
            }
            divergence_mean = workload_divergence(w);
            have_divergence = true;
        }
    }
    {
        std::ofstream out = open_out(run_dir + "/report_summary.csv");
        out << "# comoe-report-summary v1\nmetric,value\n";
        out << "off_diag_mean," << fmt17(sim.off_diag_mean) << '\n';
        out << "repr_zero_norm_excluded," << sim.excluded << '\n';
        if (have_divergence) out << "workload_divergence_mean," << fmt17(divergence_mean) << '\n';
    }
}

std::string sweep_cells_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream out;
    out << "# comoe-sweep v1\nlambda,seed,accuracy,off_diag_mean,task_jsd\n";
    for (const SweepCell& c : cells) {
        out << fmt17(c.lambda) << ',' << c.seed << ',' << fmt17(c.accuracy) << ','
            << fmt17(c.off_diag_mean) << ',' << fmt17(c.task_jsd) << '\n';
    }
    return out.str();
}

std::string sweep_summary_csv(const std::vector<SweepSummary>& rows) {
    std::ostringstream out;
    out << "# comoe-sweep-summary v1\nlambda,median_accuracy,median_off_diag,median_jsd\n";
    for (const SweepSummary& r : rows) {
        out << fmt17(r.lambda) << ',' << fmt17(r.median_accuracy) << ',' << fmt17(r.median_off_diag)
            << ',' << fmt17(r.median_jsd) << '\n';
    }
    return out.str();
}

void write_sweep_dir(const std::string& dir, const std::vector<SweepCell>& cells) {
    std::filesystem::create_directories(dir);
    open_out(dir + "/sweep.csv") << sweep_cells_csv(cells);
    open_out(dir + "/sweep_summary.csv") << sweep_summary_csv(summarize_sweep(cells));
}

}  // namespace comoe
