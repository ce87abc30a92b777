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
#include <functional>
#include <string>
#include <variant>

#include "zosparse/model.hpp"
#include "zosparse/param_store.hpp"
#include "zosparse/rng.hpp"
#include "zosparse/sensitivity.hpp"

namespace zosparse {

// Loss as a function of the full parameter store; the only primitive a
// zeroth-order method needs.
using Objective = std::function<double(const ParamStore&)>;

// Binds an MLP, a batch and a loss into an Objective. The batch is copied.
Objective mlp_objective(const MlpSpec& spec, Batch batch, LossKind loss);

enum class MaskMode { kFull, kFixedMask, kDynamicMask, kPacked };

std::string to_string(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);

inline constexpr double kDefaultEps = 1e-3;
inline constexpr std::size_t kDefaultBatchSize = 16;

struct ZoConfig {
  double eps = kDefaultEps;
  double lr = 1e-3;  // constant schedule
  std::size_t steps = 1000;
  std::size_t batch_size = kDefaultBatchSize;
  MaskMode mask_mode = MaskMode::kFixedMask;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ZoConfig&, const ZoConfig&) = default;
};

// Stream state plus mask from which a masked direction can be regenerated.
struct ReplayRecord {
  RngStream start;
  SparseMask mask;
};

// Symmetric difference quotient along one direction. The full estimate is
// scale * direction.
struct SpsaEstimate {
  double scale = 0.0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  std::variant<ParamStore, ReplayRecord> direction;

  ParamStore materialize(const ParamStore& like) const;
};

// Masked Gaussian direction: one N(0,1) draw per masked coordinate, taken in
// layout order (layers by name, indices ascending), zero elsewhere. A full
// mask therefore consumes the stream exactly like an unmasked direction.
ParamStore draw_direction(RngStream& stream, const SparseMask& mask,
                          const ParamStore& like);

// Adds alpha * z to params where z is regenerated from `start` over the mask.
// Touches only masked coordinates and returns the stream state after the
// replay.
RngStream replay_axpy(ParamStore& params, const RngStream& start,
                      const SparseMask& mask, double alpha);

// Perturbs by +eps z, -2 eps z, +eps z around two objective evaluations.
// Throws NumericError carrying both losses if either is non-finite.
SpsaEstimate spsa_estimate(ParamStore& params, const Objective& objective,
                           ParamStore direction, double eps);

// spsa_estimate along a masked direction drawn from `stream`.
SpsaEstimate masked_spsa(ParamStore& params, const Objective& objective,
                         RngStream& stream, const SparseMask& mask,
                         double eps);

// params -= lr * scale * direction.
ParamStore& zo_sgd_step(ParamStore& params, const SpsaEstimate& estimate,
                        double lr);

struct StepResult {
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double scale = 0.0;

  double loss() const { return 0.5 * (loss_plus + loss_minus); }
};

// masked_spsa followed by zo_sgd_step, with a materialized direction.
StepResult sensitive_zo_sgd_step(ParamStore& params, const Objective& objective,
                                 RngStream& stream, const SparseMask& mask,
                                 const ZoConfig& config);

// Same arithmetic as sensitive_zo_sgd_step, but the direction is regenerated
// from the recorded stream state for every use instead of being stored.
// Throws IntegrityError if a replay ends at a different stream position.
StepResult seed_trick_step(ParamStore& params, const Objective& objective,
                           RngStream& stream, const SparseMask& mask,
                           const ZoConfig& config);

// The k trainable values of a fixed mask, in layout order.
struct PackedParams {
  Tensor values;
  SparseMask layout;

  static PackedParams extract(const ParamStore& params, SparseMask layout);
  void scatter_into(ParamStore& params) const;
};

// Frozen dense weights with the masked coordinates held at zero, plus a
// working store equal to dense + scatter(values).
class PackedModel {
 public:
  PackedModel(ParamStore dense, const SparseMask& layout);
  PackedModel(const PackedModel&) = delete;
  PackedModel& operator=(const PackedModel&) = delete;
  PackedModel(PackedModel&&) = default;

  const ParamStore& dense() const { return dense_; }
  const ParamStore& working() const { return working_; }
  const SparseMask& layout() const { return layout_; }

  // Writes the packed values into their homes of the working store; O(k).
  void load(const Tensor& values);

 private:
  ParamStore dense_;
  ParamStore working_;
  SparseMask layout_;
  // (tensor, index) of every packed value in layout order.
  std::vector<std::pair<Tensor*, std::size_t>> homes_;
};

// Sensitive sparse ZO-SGD over only the packed values: perturbation and
// update cost O(k) plus the two objective evaluations.
StepResult packed_step(PackedParams& packed, PackedModel& model,
                       const Objective& objective, RngStream& stream,
                       const ZoConfig& config);

}  // namespace zosparse
