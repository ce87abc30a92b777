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
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "zosparse/param_store.hpp"
#include "zosparse/rng.hpp"
#include "zosparse/tensor.hpp"

namespace zosparse {

enum class Activation { kIdentity, kRelu, kTanh };
enum class LossKind { kMse, kSoftmaxCrossEntropy };

std::string to_string(Activation a);
std::string to_string(LossKind l);
Activation parse_activation(const std::string& s);
LossKind parse_loss_kind(const std::string& s);

// Examples stored row-wise. Regression sets fill `targets` (n x d_out);
// classification sets fill `labels` and leave `targets` empty.
struct Dataset {
  Tensor inputs;
  Tensor targets;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.empty() ? 0 : inputs.rows(); }
  std::size_t input_dim() const { return inputs.cols(); }
  bool is_classification() const { return !labels.empty(); }

  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset slice(std::size_t begin, std::size_t end) const;
  bool bitwise_equal(const Dataset& other) const;
};

// A batch is just a small dataset.
using Batch = Dataset;

struct MlpSpec {
  // widths[0] is the input dimension, widths.back() the output dimension.
  std::vector<std::size_t> widths;
  Activation activation = Activation::kTanh;

  std::size_t num_layers() const {
    return widths.empty() ? 0 : widths.size() - 1;
  }
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

// Fully connected network. Layer i owns "layer{i}.weight" (out x in) and
// "layer{i}.bias" (out); the activation follows every layer but the last.
class MlpModel {
 public:
  MlpModel(MlpSpec spec, ParamStore params);

  // Weights ~ N(0, 1/fan_in), biases zero.
  static MlpModel initialize(const MlpSpec& spec, RngStream& stream);

  const MlpSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

 private:
  MlpSpec spec_;
  ParamStore params_;
};

// Validates that `params` has exactly the layout `spec` implies.
void check_mlp_params(const MlpSpec& spec, const ParamStore& params);

// Network outputs (n x d_out) for the given inputs.
Eigen::MatrixXd mlp_forward(const MlpSpec& spec, const ParamStore& params,
                            const Tensor& inputs);

// Mean loss over the batch. MSE averages over batch and output dims.
double forward_loss(const MlpSpec& spec, const ParamStore& params,
                    const Batch& batch, LossKind loss);
double forward_loss(const MlpModel& model, const Batch& batch, LossKind loss);

// Exact gradient of forward_loss with respect to every parameter.
ParamStore backprop_grads(const MlpSpec& spec, const ParamStore& params,
                          const Batch& batch, LossKind loss);
ParamStore backprop_grads(const MlpModel& model, const Batch& batch,
                          LossKind loss);

// Fraction of correctly classified examples (classification only).
double accuracy(const MlpSpec& spec, const ParamStore& params,
                const Dataset& data);

// Uniform sample with replacement of `batch_size` examples.
Batch sample_batch(const Dataset& data, std::size_t batch_size,
                   RngStream& stream);

// Plain minibatch SGD with exact gradients; returns the final full-data loss.
double train_first_order(MlpModel& model, const Dataset& data, LossKind loss,
                         std::size_t steps, double lr, std::size_t batch_size,
                         RngStream& stream);

// Two binary classification tasks on the same two-moons input distribution.
// Task A labels points by moon. Task B flips the label of the outer half of
// the second moon (x0 > 1), so the two decision rules share most structure.
struct TaskPair {
  Dataset task_a;
  Dataset task_b;
};

inline constexpr std::size_t kDefaultTaskSize = 1024;
inline constexpr double kMoonNoise = 0.1;

TaskPair make_tasks(std::uint64_t seed, std::size_t n = kDefaultTaskSize);

// JSON Lines: {"x": [...], "y": [...]} for regression or {"x": [...], "y": k}
// for classification. A file must not mix the two.
Dataset read_dataset_jsonl(const std::filesystem::path& path);
void write_dataset_jsonl(const std::filesystem::path& path,
                         const Dataset& data);

}  // namespace zosparse
