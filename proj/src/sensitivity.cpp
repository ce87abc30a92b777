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

#include "zosparse/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace zosparse {

namespace {

// Indices of the k largest values, ties by lowest index, sorted ascending.
std::vector<std::size_t> top_indices(std::span<const double> values,
                                     std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  if (k < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(),
                     better);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

SparseMask empty_mask_like(const ParamStore& like, MaskSource source) {
  SparseMask m;
  m.source = source;
  for (const auto& [name, t] : like) {
    m.layers[name] = {};
    m.layer_dims[name] = t.size();
  }
  return m;
}

}  // namespace

std::string to_string(MaskSource s) {
  switch (s) {
    case MaskSource::kTask:
      return "task";
    case MaskSource::kSurrogate:
      return "surrogate";
    case MaskSource::kRandom:
      return "random";
    case MaskSource::kOutlier:
      return "outlier";
  }
  return "?";
}

MaskSource parse_mask_source(const std::string& s) {
  if (s == "task") return MaskSource::kTask;
  if (s == "surrogate") return MaskSource::kSurrogate;
  if (s == "random") return MaskSource::kRandom;
  if (s == "outlier") return MaskSource::kOutlier;
  throw UsageError("unknown mask source '" + s + "'");
}

std::string to_string(MaskScope s) {
  return s == MaskScope::kPerLayer ? "per-layer" : "global";
}

MaskScope parse_mask_scope(const std::string& s) {
  if (s == "per-layer") return MaskScope::kPerLayer;
  if (s == "global") return MaskScope::kGlobal;
  throw UsageError("unknown mask scope '" + s + "'");
}

std::size_t SparseMask::k() const {
  std::size_t k = 0;
  for (const auto& [name, idx] : layers) k += idx.size();
  return k;
}

std::size_t SparseMask::total_dim() const {
  std::size_t d = 0;
  for (const auto& [name, n] : layer_dims) d += n;
  return d;
}

const std::vector<std::size_t>& SparseMask::indices(
    const std::string& layer) const {
  auto it = layers.find(layer);
  if (it == layers.end()) {
    throw StructuralError("mask has no layer '" + layer + "'");
  }
  return it->second;
}

SparseMask SparseMask::full(const ParamStore& like, MaskSource source) {
  SparseMask m = empty_mask_like(like, source);
  for (auto& [name, idx] : m.layers) {
    idx.resize(m.layer_dims[name]);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  return m;
}

void SparseMask::validate_against(const ParamStore& like) const {
  if (layers.size() != like.num_tensors() ||
      layer_dims.size() != like.num_tensors()) {
    throw StructuralError("mask covers " + std::to_string(layers.size()) +
                          " layers but the store has " +
                          std::to_string(like.num_tensors()));
  }
  for (const auto& [name, t] : like) {
    auto it = layers.find(name);
    auto dt = layer_dims.find(name);
    if (it == layers.end() || dt == layer_dims.end()) {
      throw StructuralError("mask is missing layer '" + name + "'");
    }
    if (dt->second != t.size()) {
      throw StructuralError("mask dimension for '" + name +
                            "' does not match the store");
    }
    const auto& idx = it->second;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= t.size()) {
        throw StructuralError("mask index " + std::to_string(idx[i]) +
                              " out of bounds in layer '" + name + "'");
      }
      if (i > 0 && idx[i] <= idx[i - 1]) {
        throw StructuralError("mask indices for '" + name +
                              "' are not strictly ascending");
      }
    }
  }
}

std::size_t count_for_fraction(double fraction, std::size_t d) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw UsageError("mask fraction must lie in (0, 1], got " +
                     std::to_string(fraction));
  }
  // The relative shave absorbs products like 0.01 * 100 = 1.0000000000000002.
  const double raw = fraction * double(d) * (1.0 - 1e-12);
  const auto k = static_cast<std::size_t>(std::ceil(raw));
  return std::clamp<std::size_t>(k, 1, d);
}

SensitivityScores scores_from_gradients(std::span<const ParamStore> grads) {
  if (grads.empty()) throw UsageError("no gradients to score");
  SensitivityScores out{zeros_like(grads.front()), grads.size()};
  for (const auto& g : grads) {
    out.scores.require_same_structure(g);
    auto gt = g.begin();
    for (auto& [name, s] : out.scores) {
      s.flat() += (gt++)->second.flat().cwiseAbs2();
    }
  }
  for (auto& [name, s] : out.scores) s.flat() /= double(grads.size());
  return out;
}

SensitivityScores score_sensitivity(const MlpSpec& spec,
                                    const ParamStore& params,
                                    const Dataset& data, LossKind loss,
                                    std::size_t n_batches,
                                    std::size_t batch_size) {
  if (data.size() == 0) throw UsageError("cannot score on an empty dataset");
  if (n_batches == 0 || batch_size == 0) {
    throw UsageError("n_batches and batch_size must be positive");
  }
  std::vector<ParamStore> grads;
  grads.reserve(n_batches);
  std::vector<std::size_t> idx(batch_size);
  for (std::size_t b = 0; b < n_batches; ++b) {
    for (std::size_t i = 0; i < batch_size; ++i) {
      idx[i] = (b * batch_size + i) % data.size();
    }
    grads.push_back(backprop_grads(spec, params, data.subset(idx), loss));
  }
  return scores_from_gradients(grads);
}

SparseMask select_topk(const ParamStore& scores, double fraction,
                       MaskScope scope) {
  SparseMask m = empty_mask_like(scores, MaskSource::kTask);
  if (scope == MaskScope::kPerLayer) {
    for (const auto& [name, s] : scores) {
      m.layers[name] = top_indices(s.data(), count_for_fraction(fraction,
                                                                s.size()));
    }
    return m;
  }
  const Eigen::VectorXd flat = scores.flatten();
  const auto k = count_for_fraction(fraction, std::size_t(flat.size()));
  const auto chosen =
      top_indices(std::span<const double>(flat.data(), std::size_t(flat.size())),
                  k);
  std::size_t offset = 0;
  auto it = chosen.begin();
  for (const auto& [name, s] : scores) {
    auto& dst = m.layers[name];
    while (it != chosen.end() && *it < offset + s.size()) {
      dst.push_back(*it++ - offset);
    }
    offset += s.size();
  }
  return m;
}

SparseMask select_topk(const SensitivityScores& scores, double fraction,
                       MaskScope scope) {
  return select_topk(scores.scores, fraction, scope);
}

SparseMask random_mask(const ParamStore& like, double fraction,
                       RngStream& stream) {
  SparseMask m = empty_mask_like(like, MaskSource::kRandom);
  m.seed = stream.seed();
  for (const auto& [name, t] : like) {
    const std::size_t d = t.size();
    const std::size_t k = count_for_fraction(fraction, d);
    std::vector<std::size_t> pool(d);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    if (k < d) {
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < k; ++i) {
        std::swap(pool[i], pool[i + std::size_t(stream.below(d - i))]);
      }
      pool.resize(k);
      std::sort(pool.begin(), pool.end());
    }
    m.layers[name] = std::move(pool);
  }
  return m;
}

SparseMask outlier_mask(const ParamStore& params, double fraction,
                        MaskScope scope) {
  ParamStore magnitudes = params;
  for (auto& [name, t] : magnitudes) t.flat() = t.flat().cwiseAbs();
  SparseMask m = select_topk(magnitudes, fraction, scope);
  m.source = MaskSource::kOutlier;
  return m;
}

double coverage_fraction(const ParamStore& scores, const SparseMask& mask) {
  mask.validate_against(scores);
  double covered = 0.0, total = 0.0;
  for (const auto& [name, s] : scores) {
    total += s.flat().sum();
    for (auto i : mask.indices(name)) covered += s[i];
  }
  if (!(total > 0.0)) {
    throw NumericError("coverage is undefined for all-zero scores");
  }
  return covered / total;
}

std::vector<double> default_curve_grid() {
  std::vector<double> grid;
  for (int j = 0; j <= 16; ++j) {
    grid.push_back(j % 4 == 0 ? std::pow(10.0, -4 + j / 4)
                              : std::pow(10.0, -4.0 + j / 4.0));
  }
  return grid;
}

CoverageCurve coverage_curve(const ParamStore& scores,
                             const std::vector<double>& grid) {
  Eigen::VectorXd flat = scores.flatten();
  if (flat.size() == 0) throw UsageError("coverage curve of empty scores");
  std::sort(flat.data(), flat.data() + flat.size(), std::greater<>());
  std::vector<double> cum(std::size_t(flat.size()));
  std::partial_sum(flat.data(), flat.data() + flat.size(), cum.begin());
  const double total = cum.back();
  if (!(total > 0.0)) {
    throw NumericError("coverage curve is undefined for all-zero scores");
  }
  CoverageCurve curve;
  for (double f : grid) {
    const auto m = count_for_fraction(f, cum.size());
    curve.fractions.push_back(f);
    curve.cumvals.push_back(cum[m - 1] / total);
  }
  return curve;
}

void write_curve_csv(const std::filesystem::path& path,
                     const CoverageCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "'");
  os << "fraction,cumval\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", curve.fractions[i],
                  curve.cumvals[i]);
    os << buf;
  }
}

SparseMask refresh_mask(const MlpSpec& spec, const ParamStore& params,
                        const Dataset& data, LossKind loss, double fraction,
                        std::size_t every_n_steps, std::size_t current_step,
                        const SparseMask& previous, MaskScope scope,
                        std::size_t n_batches) {
  if (every_n_steps == 0) throw UsageError("every_n_steps must be >= 1");
  if (current_step % every_n_steps != 0) return previous;
  SparseMask fresh = select_topk(
      score_sensitivity(spec, params, data, loss, n_batches), fraction, scope);
  fresh.source = previous.source;
  fresh.created_at_step = current_step;
  return fresh;
}

double mask_overlap(const SparseMask& a, const SparseMask& b) {
  if (a.layer_dims != b.layer_dims) {
    throw StructuralError("masks cover different parameter layouts");
  }
  if (a.k() == 0) throw UsageError("overlap of an empty mask is undefined");
  std::size_t shared = 0;
  for (const auto& [name, ia] : a.layers) {
    const auto& ib = b.indices(name);
    std::vector<std::size_t> both;
    std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(),
                          std::back_inserter(both));
    shared += both.size();
  }
  return double(shared) / double(a.k());
}

void write_mask_json(const std::filesystem::path& path,
                     const SparseMask& mask) {
  nlohmann::json j;
  j["version"] = 1;
  j["source"] = to_string(mask.source);
  j["fraction"] = mask.fraction();
  j["k"] = mask.k();
  j["seed"] = mask.seed ? nlohmann::json(*mask.seed) : nlohmann::json(nullptr);
  j["layers"] = nlohmann::json::object();
  for (const auto& [name, idx] : mask.layers) j["layers"][name] = idx;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "'");
  os << j.dump() << '\n';
}

SparseMask read_mask_json(const std::filesystem::path& path,
                          const ParamStore& like) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open mask file '" + path.string() + "'");
  SparseMask m = empty_mask_like(like, MaskSource::kTask);
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("version").get<int>() != 1) {
      throw UsageError("unsupported mask file version");
    }
    m.source = parse_mask_source(j.at("source").get<std::string>());
    if (!j.at("seed").is_null()) m.seed = j.at("seed").get<std::uint64_t>();
    m.layers.clear();
    for (const auto& [name, idx] : j.at("layers").items()) {
      m.layers[name] = idx.get<std::vector<std::size_t>>();
    }
    m.validate_against(like);
    if (m.k() != j.at("k").get<std::size_t>()) {
      throw StructuralError("mask file k does not match its index lists");
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed mask file '" + path.string() + "': " +
                     e.what());
  }
  return m;
}

}  // namespace zosparse
