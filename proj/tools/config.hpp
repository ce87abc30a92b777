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
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "zosparse/model.hpp"
#include "zosparse/quant.hpp"
#include "zosparse/sensitivity.hpp"
#include "zosparse/theory.hpp"
#include "zosparse/zo.hpp"

namespace zosparse::cli {

// Where training and evaluation data come from. "two_moons" generates the
// paired synthetic tasks; "file" reads JSON Lines datasets.
struct TaskConfig {
  std::string source = "two_moons";
  std::string which = "b";  // two_moons only: "a" or "b"
  std::uint64_t seed = 0;
  std::size_t size = kDefaultTaskSize;
  std::size_t validation_size = 256;
  std::optional<std::filesystem::path> path;
  std::optional<std::filesystem::path> validation_path;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

// Starting weights: a checkpoint, or a fresh network optionally trained
// with first-order SGD on a pretraining task.
struct InitConfig {
  std::optional<std::filesystem::path> checkpoint;
  std::uint64_t seed = 0;
  std::string pretrain_task = "a";
  std::size_t pretrain_steps = 0;
  double pretrain_lr = 0.1;
  std::size_t pretrain_batch_size = 32;

  friend bool operator==(const InitConfig&, const InitConfig&) = default;
};

struct MaskConfig {
  MaskSource source = MaskSource::kTask;
  double fraction = 0.01;
  MaskScope scope = MaskScope::kPerLayer;
  std::size_t refresh_every = 100;
  std::size_t score_batches = kDefaultScoreBatches;
  std::optional<std::filesystem::path> path;
  // Dataset scored for source=surrogate when the task is file-based.
  std::optional<std::filesystem::path> surrogate_path;

  friend bool operator==(const MaskConfig&, const MaskConfig&) = default;
};

struct EvalConfig {
  std::size_t interval = 50;
  std::optional<double> target_loss;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct BenchConfig {
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{256, 256}};
  std::vector<std::size_t> batches{1, 16, 256};
  std::vector<double> sparsities{0.99};
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  // Packed-versus-full perturb+update timing.
  std::size_t packed_dim = 1'000'000;
  double packed_fraction = 0.001;

  friend bool operator==(const BenchConfig&, const BenchConfig&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  MlpSpec model{{2, 64, 64, 2}, Activation::kTanh};
  TaskConfig task;
  LossKind loss = LossKind::kSoftmaxCrossEntropy;
  InitConfig init;
  ZoConfig zo;
  MaskConfig mask;
  bool quantize = false;
  EvalConfig eval;
  // Off keeps every output byte-reproducible: wall_us is written as 0.
  bool timing = false;
  std::filesystem::path out = "out";
  TheorySuiteConfig theory;
  BenchConfig bench;

  // Applies an explicit run seed everywhere a seed is derived from it.
  void set_seed(std::uint64_t s);
  void validate() const;

  friend bool operator==(const ExperimentConfig&,
                         const ExperimentConfig&) = default;
};

// Unknown keys, wrong types, and missing referenced files are UsageErrors.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace zosparse::cli
