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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zosparse/model.hpp"
#include "zosparse/param_store.hpp"
#include "zosparse/rng.hpp"

namespace zosparse {

enum class MaskSource { kTask, kSurrogate, kRandom, kOutlier };
enum class MaskScope { kPerLayer, kGlobal };

std::string to_string(MaskSource s);
MaskSource parse_mask_source(const std::string& s);
std::string to_string(MaskScope s);
MaskScope parse_mask_scope(const std::string& s);

// Selected coordinates of a parameter store: for every layer, a sorted list
// of unique flat indices into that layer's tensor.
struct SparseMask {
  std::map<std::string, std::vector<std::size_t>> layers;
  std::map<std::string, std::size_t> layer_dims;
  MaskSource source = MaskSource::kTask;
  std::optional<std::uint64_t> seed;
  std::size_t created_at_step = 0;

  std::size_t k() const;
  std::size_t total_dim() const;
  double fraction() const { return double(k()) / double(total_dim()); }

  const std::vector<std::size_t>& indices(const std::string& layer) const;

  // Every coordinate of `like`, in layout order.
  static SparseMask full(const ParamStore& like,
                         MaskSource source = MaskSource::kTask);

  // Sorted, unique, in bounds, and covering exactly the layers of `like`.
  void validate_against(const ParamStore& like) const;

  friend bool operator==(const SparseMask&, const SparseMask&) = default;
};

// Number of coordinates a fraction selects out of d: ceil(fraction * d),
// clamped to [1, d]. Throws UsageError unless 0 < fraction <= 1.
std::size_t count_for_fraction(double fraction, std::size_t d);

// Per-coordinate mean of squared gradients (empirical Fisher diagonal).
struct SensitivityScores {
  ParamStore scores;
  std::size_t n_batches = 0;
};

inline constexpr std::size_t kDefaultScoreBatches = 8;
inline constexpr std::size_t kDefaultScoreBatchSize = 16;

SensitivityScores scores_from_gradients(std::span<const ParamStore> grads);

// Scores over `n_batches` consecutive batches of `batch_size` examples,
// wrapping around the dataset.
SensitivityScores score_sensitivity(
    const MlpSpec& spec, const ParamStore& params, const Dataset& data,
    LossKind loss, std::size_t n_batches = kDefaultScoreBatches,
    std::size_t batch_size = kDefaultScoreBatchSize);

// Largest scores, ties broken by lowest flat index. Per-layer scope keeps
// ceil(fraction * d_layer) in each layer; global scope ranks the flattened
// store.
SparseMask select_topk(const ParamStore& scores, double fraction,
                       MaskScope scope = MaskScope::kPerLayer);
SparseMask select_topk(const SensitivityScores& scores, double fraction,
                       MaskScope scope = MaskScope::kPerLayer);

// Uniform sample without replacement of ceil(fraction * d_layer) indices per
// layer of `like`.
SparseMask random_mask(const ParamStore& like, double fraction,
                       RngStream& stream);

// Largest |w| per layer, same tie-break as select_topk.
SparseMask outlier_mask(const ParamStore& params, double fraction,
                        MaskScope scope = MaskScope::kPerLayer);

// c = sum of scores under the mask / sum of all scores.
double coverage_fraction(const ParamStore& scores, const SparseMask& mask);

struct CoverageCurve {
  std::vector<double> fractions;
  std::vector<double> cumvals;
};

// Log-spaced grid from 1e-4 to 1, four points per decade.
std::vector<double> default_curve_grid();

// Scores sorted descending, accumulated, and normalized by the total; the
// value at fraction f covers the top ceil(f * d) coordinates.
CoverageCurve coverage_curve(const ParamStore& scores,
                             const std::vector<double>& grid =
                                 default_curve_grid());

void write_curve_csv(const std::filesystem::path& path,
                     const CoverageCurve& curve);

// Fresh top-k mask on multiples of `every_n_steps`, otherwise `previous`.
SparseMask refresh_mask(const MlpSpec& spec, const ParamStore& params,
                        const Dataset& data, LossKind loss, double fraction,
                        std::size_t every_n_steps, std::size_t current_step,
                        const SparseMask& previous,
                        MaskScope scope = MaskScope::kPerLayer,
                        std::size_t n_batches = kDefaultScoreBatches);

// |a intersect b| / |a|.
double mask_overlap(const SparseMask& a, const SparseMask& b);

// {"version":1,"source":...,"fraction":...,"k":...,"seed":...,"layers":{...}}
void write_mask_json(const std::filesystem::path& path, const SparseMask& mask);
SparseMask read_mask_json(const std::filesystem::path& path,
                          const ParamStore& like);

}  // namespace zosparse
