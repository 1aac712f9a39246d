// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run-directory persistence and the post-hoc report. A finished run is laid
// out as
//
//   config.json   resolved configuration
//   steps.csv     # comoe-steps v1      step,ce,con,total
//   eval.csv      # comoe-eval v1       step,task,accuracy   (task -1 = all)
//   routing.csv   # comoe-routing v1    stage,token,task,slot,expert,weight
//   reprs.csv     # comoe-reprs v1      stage,token,expert,dim,value
//   params.ckpt   parameter checkpoint (adapters format)
//   summary.json  final accuracy, step count, lambda, seed
//
// and the report derives, from routing.csv and reprs.csv alone,
//
//   workload.csv        # comoe-workload v1    task,expert,count,freq
//   similarity.csv      # comoe-similarity v1  i,j,cosine
//   projection.csv      # comoe-projection v1  expert,pc1,pc2
//   divergence.csv      # comoe-divergence v1  task_a,task_b,jsd
//   report_summary.csv  # comoe-report-summary v1  metric,value
//
// Floats are written with %.17g, so every file round-trips doubles exactly
// and re-running the report is byte-identical.

#include <string>
#include <vector>

#include "comoe/trainer.hpp"

namespace comoe {

void write_run_dir(const std::string& dir, const TrainState& state);

std::vector<StepRecord> read_steps_csv(const std::string& path);
std::vector<EvalRecord> read_eval_csv(const std::string& path);
std::vector<RoutingRecord> read_routing_csv(const std::string& path);
std::vector<ReprRecord> read_reprs_csv(const std::string& path);

// Pure function of the run directory: reads config.json, routing.csv and
// reprs.csv, writes the report files listed above. IoError when inputs are
// missing or malformed.
void write_report(const std::string& run_dir);

std::string sweep_cells_csv(const std::vector<SweepCell>& cells);
std::string sweep_summary_csv(const std::vector<SweepSummary>& rows);
// sweep.csv (per cell) and sweep_summary.csv (medians per lambda).
void write_sweep_dir(const std::string& dir, const std::vector<SweepCell>& cells);

}  // namespace comoe
