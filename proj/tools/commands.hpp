// Copyright 2026 The zosparse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"

namespace zosparse::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitNumeric = 2,
  kExitTheory = 3,
};

// Data and starting weights resolved from a config.
struct Workspace {
  MlpSpec spec;
  Dataset train;
  Dataset validation;
  // Stand-in pretraining data scored for surrogate masks.
  std::optional<Dataset> surrogate;
  ParamStore params;
};

Workspace build_workspace(const ExperimentConfig& config);

// Mask for the configured source, scored at the workspace's parameters.
SparseMask build_mask(const ExperimentConfig& config, const Workspace& ws);

struct EvalPoint {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> accuracy;
};

struct TrainOutcome {
  std::vector<EvalPoint> evals;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double best_eval_loss = 0.0;
  std::size_t best_step = 0;
  std::optional<std::size_t> steps_to_target;
  ParamStore final_params;
  SparseMask mask;
  // Empty unless a step produced a non-finite loss.
  std::string error;
};

// Runs the configured ZO fine-tuning. With an output directory it writes
// metrics.jsonl, eval.jsonl, checkpoint.zosf, best.zosf and summary.json.
TrainOutcome run_training(const ExperimentConfig& config, const Workspace& ws,
                          const std::optional<std::filesystem::path>& out);

// Subcommands. Each writes into `out` and returns an exit code; errors other
// than theory failures surface as exceptions.
int cmd_select_mask(const ExperimentConfig& config,
                    const std::filesystem::path& out);
int cmd_train(const ExperimentConfig& config, const std::filesystem::path& out);
int cmd_quantize(const ExperimentConfig& config,
                 const std::filesystem::path& out);
int cmd_verify_theory(const ExperimentConfig& config,
                      const std::filesystem::path& out);
int cmd_bench(const ExperimentConfig& config, const std::filesystem::path& out);
int cmd_export_curve(const ExperimentConfig& config,
                     const std::filesystem::path& out);

// Maps library exceptions onto exit codes and prints the message.
int run_guarded(int (*command)(const ExperimentConfig&,
                               const std::filesystem::path&),
                const ExperimentConfig& config,
                const std::filesystem::path& out);

}  // namespace zosparse::cli
