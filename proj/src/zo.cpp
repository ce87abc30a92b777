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

#include "zosparse/zo.hpp"

#include <cmath>
#include <sstream>

namespace zosparse {

namespace {

void check_losses(double plus, double minus) {
  if (!std::isfinite(plus) || !std::isfinite(minus)) {
    std::ostringstream os;
    os.precision(17);
    os << "non-finite loss at perturbed point: f(w+eps z)=" << plus
       << ", f(w-eps z)=" << minus;
    throw NumericError(os.str());
  }
}

}  // namespace

Objective mlp_objective(const MlpSpec& spec, Batch batch, LossKind loss) {
  return [spec, batch = std::move(batch), loss](const ParamStore& p) {
    return forward_loss(spec, p, batch, loss);
  };
}

std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::kFull:
      return "full";
    case MaskMode::kFixedMask:
      return "fixed-mask";
    case MaskMode::kDynamicMask:
      return "dynamic-mask";
    case MaskMode::kPacked:
      return "packed";
  }
  return "?";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "full") return MaskMode::kFull;
  if (s == "fixed-mask") return MaskMode::kFixedMask;
  if (s == "dynamic-mask") return MaskMode::kDynamicMask;
  if (s == "packed") return MaskMode::kPacked;
  throw UsageError("unknown mask mode '" + s + "'");
}

void ZoConfig::validate() const {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw UsageError("eps must be > 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("lr must be > 0");
  if (steps < 1) throw UsageError("steps must be >= 1");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
}

ParamStore SpsaEstimate::materialize(const ParamStore& like) const {
  if (const auto* z = std::get_if<ParamStore>(&direction)) {
    like.require_same_structure(*z);
    return *z;
  }
  const auto& rec = std::get<ReplayRecord>(direction);
  RngStream s = rec.start;
  return draw_direction(s, rec.mask, like);
}

ParamStore draw_direction(RngStream& stream, const SparseMask& mask,
                          const ParamStore& like) {
  mask.validate_against(like);
  ParamStore z = zeros_like(like);
  for (auto& [name, t] : z) {
    for (auto i : mask.indices(name)) t[i] = stream.gaussian();
  }
  return z;
}

RngStream replay_axpy(ParamStore& params, const RngStream& start,
                      const SparseMask& mask, double alpha) {
  RngStream s = start;
  for (auto& [name, t] : params) {
    for (auto i : mask.indices(name)) {
      const double z = s.gaussian();
      if (z != 0.0) t[i] += alpha * z;
    }
  }
  return s;
}

SpsaEstimate spsa_estimate(ParamStore& params, const Objective& objective,
                           ParamStore direction, double eps) {
  if (!(eps > 0.0)) throw UsageError("eps must be > 0");
  params.require_same_structure(direction);
  store_axpy(params, eps, direction);
  const double plus = objective(params);
  store_axpy(params, -2.0 * eps, direction);
  const double minus = objective(params);
  store_axpy(params, eps, direction);
  check_losses(plus, minus);
  return {(plus - minus) / (2.0 * eps), plus, minus, std::move(direction)};
}

SpsaEstimate masked_spsa(ParamStore& params, const Objective& objective,
                         RngStream& stream, const SparseMask& mask,
                         double eps) {
  return spsa_estimate(params, objective, draw_direction(stream, mask, params),
                       eps);
}

ParamStore& zo_sgd_step(ParamStore& params, const SpsaEstimate& estimate,
                        double lr) {
  if (!(lr > 0.0)) throw UsageError("lr must be > 0");
  const double alpha = -lr * estimate.scale;
  if (const auto* rec = std::get_if<ReplayRecord>(&estimate.direction)) {
    if (alpha != 0.0) replay_axpy(params, rec->start, rec->mask, alpha);
    return params;
  }
  return store_axpy(params, alpha, std::get<ParamStore>(estimate.direction));
}

StepResult sensitive_zo_sgd_step(ParamStore& params, const Objective& objective,
                                 RngStream& stream, const SparseMask& mask,
                                 const ZoConfig& config) {
  config.validate();
  const SpsaEstimate est =
      masked_spsa(params, objective, stream, mask, config.eps);
  zo_sgd_step(params, est, config.lr);
  return {est.loss_plus, est.loss_minus, est.scale};
}

StepResult seed_trick_step(ParamStore& params, const Objective& objective,
                           RngStream& stream, const SparseMask& mask,
                           const ZoConfig& config) {
  config.validate();
  mask.validate_against(params);
  const RngStream start = stream;
  const RngStream end(start.seed(), start.stream_id(),
                      start.counter() + mask.k());

  auto replay = [&](double alpha) {
    if (replay_axpy(params, start, mask, alpha) != end) {
      throw IntegrityError("direction replay ended at counter drift from " +
                           std::to_string(end.counter()));
    }
  };

  replay(config.eps);
  const double plus = objective(params);
  replay(-2.0 * config.eps);
  const double minus = objective(params);
  replay(config.eps);
  check_losses(plus, minus);
  const double scale = (plus - minus) / (2.0 * config.eps);
  const double alpha = -config.lr * scale;
  if (alpha != 0.0) replay(alpha);
  stream = end;
  return {plus, minus, scale};
}

PackedParams PackedParams::extract(const ParamStore& params,
                                   SparseMask layout) {
  layout.validate_against(params);
  if (layout.k() == 0) {
    throw UsageError("packed parameters need at least one masked coordinate");
  }
  Tensor values({layout.k()});
  std::size_t j = 0;
  for (const auto& [name, t] : params) {
    for (auto i : layout.indices(name)) values[j++] = t[i];
  }
  return {std::move(values), std::move(layout)};
}

void PackedParams::scatter_into(ParamStore& params) const {
  layout.validate_against(params);
  if (values.size() != layout.k()) {
    throw StructuralError("packed value count does not match layout k");
  }
  std::size_t j = 0;
  for (auto& [name, t] : params) {
    for (auto i : layout.indices(name)) t[i] = values[j++];
  }
}

PackedModel::PackedModel(ParamStore dense, const SparseMask& layout)
    : dense_(std::move(dense)), working_(dense_), layout_(layout) {
  layout_.validate_against(dense_);
  if (layout_.k() == 0) {
    throw UsageError("a packed model needs at least one masked coordinate");
  }
  for (auto& [name, t] : working_) {
    const Tensor& d = dense_.at(name);
    for (auto i : layout_.indices(name)) {
      if (d[i] != 0.0) {
        throw StructuralError("dense weights of '" + name +
                              "' are nonzero at masked index " +
                              std::to_string(i));
      }
      homes_.emplace_back(&t, i);
    }
  }
}

void PackedModel::load(const Tensor& values) {
  if (values.size() != homes_.size()) {
    throw StructuralError("packed value count " +
                          std::to_string(values.size()) +
                          " does not match layout k " +
                          std::to_string(homes_.size()));
  }
  // Dense entries under the mask are zero, so dense + value == value.
  for (std::size_t j = 0; j < homes_.size(); ++j) {
    (*homes_[j].first)[homes_[j].second] = values[j];
  }
}

StepResult packed_step(PackedParams& packed, PackedModel& model,
                       const Objective& objective, RngStream& stream,
                       const ZoConfig& config) {
  config.validate();
  if (packed.layout != model.layout()) {
    throw StructuralError("packed layout does not match the frozen model");
  }
  const std::size_t k = packed.values.size();
  Tensor z = sample_standard_gaussian(stream, k);
  auto v = packed.values.data();

  auto axpy = [&](double alpha) {
    for (std::size_t j = 0; j < k; ++j) {
      if (z[j] != 0.0) v[j] += alpha * z[j];
    }
    model.load(packed.values);
  };

  axpy(config.eps);
  const double plus = objective(model.working());
  axpy(-2.0 * config.eps);
  const double minus = objective(model.working());
  axpy(config.eps);
  check_losses(plus, minus);
  const double scale = (plus - minus) / (2.0 * config.eps);
  const double alpha = -config.lr * scale;
  if (alpha != 0.0) axpy(alpha);
  return {plus, minus, scale};
}

}  // namespace zosparse
