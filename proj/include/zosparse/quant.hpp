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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zosparse/param_store.hpp"
#include "zosparse/sensitivity.hpp"
#include "zosparse/tensor.hpp"
#include "zosparse/zo.hpp"

namespace zosparse {

inline constexpr int kQ4Max = 7;

// Symmetric 4-bit codes in [-7, 7], two per byte (low nibble holds the even
// element), with one scale per row. Rank-1 tensors are a single row.
struct QuantizedTensor {
  Shape shape;
  std::vector<std::uint8_t> codes;
  std::vector<double> scales;

  std::size_t size() const { return shape_size(shape); }
  std::size_t rows() const { return shape.size() <= 1 ? 1 : shape[0]; }
  std::size_t cols() const { return size() / rows(); }

  int code(std::size_t i) const {
    const std::uint8_t nib = (codes[i / 2] >> (4 * (i % 2))) & 0xF;
    return nib >= 8 ? int(nib) - 16 : int(nib);
  }
  void set_code(std::size_t i, int c);

  friend bool operator==(const QuantizedTensor&,
                         const QuantizedTensor&) = default;
};

// Per row r: scale_r = max|w_r| / 7 (1 for an all-zero row) and
// code = round-half-away-from-zero(w / scale_r) clamped to [-7, 7].
QuantizedTensor quantize_uniform4(const Tensor& dense);
Tensor dequantize(const QuantizedTensor& q);

// Splits W into the values at `layout` (in layout order) and W with those
// positions zeroed.
struct Decomposition {
  Tensor sparse_values;
  Tensor dense;
};
Decomposition decompose(const Tensor& w, std::span<const std::size_t> layout);

// dense with sparse values added at their positions.
Tensor scatter_add(Tensor dense, const Tensor& sparse_values,
                   std::span<const std::size_t> layout);

struct DecomposedLayer {
  Tensor sparse_values;
  std::vector<std::size_t> sparse_layout;
  QuantizedTensor dense_q;

  static DecomposedLayer build(const Tensor& w,
                               std::vector<std::size_t> layout);
  Tensor reconstruct() const;
};

// x is [cols] or [batch, cols]; the result is [rows] or [batch, rows].
Tensor forward_dense(const Tensor& w, const Tensor& x);

// Dense product with the dequantized matrix, then a sparse product added.
Tensor forward_sparse_addmm(const QuantizedTensor& dense_q,
                            const Tensor& sparse_values,
                            std::span<const std::size_t> sparse_layout,
                            const Tensor& x);

// Sparse values scattered into the dequantized matrix, then one dense
// product.
Tensor forward_sparse_add(const QuantizedTensor& dense_q,
                          const Tensor& sparse_values,
                          std::span<const std::size_t> sparse_layout,
                          const Tensor& x);

// max |a - b| / max(max |b|, tiny).
double max_relative_difference(const Tensor& a, const Tensor& b);

struct BenchOptions {
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{256, 256}};
  std::vector<std::size_t> batches{1, 16, 256};
  std::vector<double> sparsities{0.99};
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string path;  // "sparse_add" or "sparse_addmm"
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t batch = 0;
  double sparsity = 0.0;
  double median_us = 0.0;
  // (max - min) / median over the timed repeats.
  double spread = 0.0;
};

// Median wall time of both forward paths for every grid cell. Each cell first
// checks that the two paths agree within 1e-9; a mismatch throws
// NumericError before any timing is recorded.
std::vector<BenchRow> bench_crossover(const BenchOptions& options);
void write_bench_csv(const std::filesystem::path& path,
                     const std::vector<BenchRow>& rows);

// Checkpoint version 2: records carry a dtype tag after the shape
// (0 = f64 data, 1 = q4 packed codes followed by per-row f64 scales).
inline constexpr std::uint32_t kQuantizedCheckpointVersion = 2;
inline constexpr std::uint8_t kDtypeF64 = 0;
inline constexpr std::uint8_t kDtypeQ4 = 1;
inline constexpr const char* kSparseSuffix = ".sparse";

struct QuantizedCheckpoint {
  std::map<std::string, Tensor> floats;
  std::map<std::string, QuantizedTensor> quantized;
};

struct LayerQuantStats {
  std::string name;
  bool quantized = false;
  std::size_t sparse_count = 0;
  double mean_abs_error = 0.0;
  double max_abs_error = 0.0;
  double max_half_scale = 0.0;
};

// Matrices whose mask is not full are decomposed: the dense remainder is
// quantized under the layer's name and the masked values are kept in f64
// under name + ".sparse". Vectors and fully masked matrices stay f64.
QuantizedCheckpoint quantize_store(const ParamStore& params,
                                   const SparseMask& mask,
                                   std::vector<LayerQuantStats>* stats);

// Shapes of the original parameters described by a quantized checkpoint.
ParamStore checkpoint_layout(const QuantizedCheckpoint& ckpt);

// Frozen dense store (dequantized, zero under the mask) and packed values.
std::pair<ParamStore, PackedParams> load_decomposed(
    const QuantizedCheckpoint& ckpt, const SparseMask& mask);

void write_quantized_checkpoint(const std::filesystem::path& path,
                                const QuantizedCheckpoint& ckpt);
// Reads version 1 or 2 files; version 1 records land in `floats`.
QuantizedCheckpoint read_quantized_checkpoint(
    const std::filesystem::path& path);

}  // namespace zosparse
