#pragma once

#include <string>
#include <vector>

#include "seqdens/checkpoint.hpp"
#include "seqdens/config.hpp"
#include "seqdens/report.hpp"
#include "seqdens/training.hpp"

namespace seqdens {

// Experiment orchestration behind the CLI subcommands. Every command is
// idempotent given identical inputs and seed, refuses config-hash
// mismatches between artifacts, and embeds hashes in everything it writes.

void cmd_generate_data(const ExperimentConfig& config, const std::string& out_dir);

struct TrainArtifacts {
  std::string log_path;
  std::string best_checkpoint;
  std::string final_checkpoint;
  TrainResult result;
};

TrainArtifacts cmd_train(const ExperimentConfig& config,
                         const std::string& data_dir,
                         const std::string& out_dir);

DistillStats cmd_distill(const ExperimentConfig& config,
                         const std::string& teacher_checkpoint,
                         const std::string& data_dir,
                         const std::string& out_dir);

ExperimentReport cmd_evaluate(const std::string& checkpoint_path,
                              const std::string& data_dir,
                              const std::string& out_path,
                              bool measure_speed = false);

void cmd_infer(const std::string& checkpoint_path, const std::string& data_dir,
               const std::string& input_path, int refine_k, int beam_width,
               const std::string& out_path);

// inputs: training logs for within-family checkpoint series, or report
// files for the across-family comparison.
void cmd_correlate(const std::vector<std::string>& inputs,
                   const std::string& grouping, const std::string& out_dir);

void cmd_report(const std::vector<std::string>& report_paths,
                const std::string& out_dir);

struct MatrixResult {
  int completed = 0;
  int skipped = 0;
  int failed = 0;
};

// Runs every cell of a manifest (JSON: {"cells": [config, ...]}), raw
// variants first so distilled cells can find their teacher. Cells run in
// parallel threads, each owning its output directory (lockfile guarded);
// completed cells are skipped by config hash.
MatrixResult cmd_run_matrix(const std::string& manifest_path,
                            const std::string& out_root, int parallelism = 2);

}  // namespace seqdens
