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

#include "zosparse/quant.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace zosparse {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_batch(const Tensor& x, std::size_t cols) {
  const std::size_t batch = x.rank() == 1 ? 1 : x.rows();
  if (x.size() != batch * cols || x.rank() > 2) {
    throw StructuralError("input of shape " + shape_string(x.shape()) +
                          " does not chain with " + std::to_string(cols) +
                          " columns");
  }
  return Eigen::Map<const RowMatrix>(x.data().data(), Eigen::Index(batch),
                                     Eigen::Index(cols));
}

Tensor product(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2) throw StructuralError("weight must be a matrix");
  const auto xm = as_batch(x, w.cols());
  const Shape out_shape = x.rank() == 1 ? Shape{w.rows()}
                                        : Shape{x.rows(), w.rows()};
  Tensor y(out_shape);
  Eigen::Map<RowMatrix>(y.data().data(), xm.rows(),
                        Eigen::Index(w.rows())) = xm * w.matrix().transpose();
  return y;
}

void check_layout(std::span<const std::size_t> layout, std::size_t n,
                  std::size_t values) {
  if (layout.size() != values) {
    throw StructuralError("sparse value count does not match layout size");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i] >= n) {
      throw StructuralError("sparse index " + std::to_string(layout[i]) +
                            " out of bounds for " + std::to_string(n) +
                            " elements");
    }
  }
}

}  // namespace

void QuantizedTensor::set_code(std::size_t i, int c) {
  if (c < -kQ4Max || c > kQ4Max) throw UsageError("q4 code out of range");
  const auto nib = static_cast<std::uint8_t>(c & 0xF);
  auto& byte = codes[i / 2];
  const int shift = 4 * int(i % 2);
  byte = static_cast<std::uint8_t>((byte & ~(0xF << shift)) | (nib << shift));
}

QuantizedTensor quantize_uniform4(const Tensor& dense) {
  if (!all_finite(dense)) {
    throw NumericError("cannot quantize a tensor with non-finite entries");
  }
  QuantizedTensor q;
  q.shape = dense.shape();
  q.codes.assign((dense.size() + 1) / 2, 0);
  const std::size_t rows = dense.rows(), cols = dense.cols();
  q.scales.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = dense.data().subspan(r * cols, cols);
    double m = 0.0;
    for (double v : row) m = std::max(m, std::abs(v));
    const double scale = m > 0.0 ? m / kQ4Max : 1.0;
    q.scales[r] = scale;
    for (std::size_t c = 0; c < cols; ++c) {
      // std::round rounds halfway cases away from zero.
      const double code = std::clamp(std::round(row[c] / scale),
                                     double(-kQ4Max), double(kQ4Max));
      q.set_code(r * cols + c, int(code));
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  const std::size_t cols = q.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = q.code(i) * q.scales[i / cols];
  }
  return out;
}

Decomposition decompose(const Tensor& w, std::span<const std::size_t> layout) {
  check_layout(layout, w.size(), layout.size());
  Decomposition d{Tensor({layout.size()}), w};
  for (std::size_t j = 0; j < layout.size(); ++j) {
    d.sparse_values[j] = w[layout[j]];
    d.dense[layout[j]] = 0.0;
  }
  return d;
}

Tensor scatter_add(Tensor dense, const Tensor& sparse_values,
                   std::span<const std::size_t> layout) {
  check_layout(layout, dense.size(), sparse_values.size());
  for (std::size_t j = 0; j < layout.size(); ++j) {
    // Assigning into a zero keeps the sign of a -0.0 sparse value.
    double& d = dense[layout[j]];
    d = d == 0.0 ? sparse_values[j] : d + sparse_values[j];
  }
  return dense;
}

DecomposedLayer DecomposedLayer::build(const Tensor& w,
                                       std::vector<std::size_t> layout) {
  auto parts = decompose(w, layout);
  return {std::move(parts.sparse_values), std::move(layout),
          quantize_uniform4(parts.dense)};
}

Tensor DecomposedLayer::reconstruct() const {
  return scatter_add(dequantize(dense_q), sparse_values, sparse_layout);
}

Tensor forward_dense(const Tensor& w, const Tensor& x) { return product(w, x); }

Tensor forward_sparse_addmm(const QuantizedTensor& dense_q,
                            const Tensor& sparse_values,
                            std::span<const std::size_t> sparse_layout,
                            const Tensor& x) {
  check_layout(sparse_layout, dense_q.size(), sparse_values.size());
  Tensor y = product(dequantize(dense_q), x);
  const std::size_t rows = dense_q.rows(), cols = dense_q.cols();
  const auto xm = as_batch(x, cols);
  Eigen::Map<RowMatrix> ym(y.data().data(), xm.rows(), Eigen::Index(rows));
  for (std::size_t j = 0; j < sparse_layout.size(); ++j) {
    const auto r = Eigen::Index(sparse_layout[j] / cols);
    const auto c = Eigen::Index(sparse_layout[j] % cols);
    ym.col(r) += sparse_values[j] * xm.col(c);
  }
  return y;
}

Tensor forward_sparse_add(const QuantizedTensor& dense_q,
                          const Tensor& sparse_values,
                          std::span<const std::size_t> sparse_layout,
                          const Tensor& x) {
  return product(
      scatter_add(dequantize(dense_q), sparse_values, sparse_layout), x);
}

double max_relative_difference(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw StructuralError("shape mismatch in comparison");
  if (a.empty()) return 0.0;
  const double denom =
      std::max(b.flat().cwiseAbs().maxCoeff(),
               std::numeric_limits<double>::min());
  return (a.flat() - b.flat()).cwiseAbs().maxCoeff() / denom;
}

std::vector<BenchRow> bench_crossover(const BenchOptions& options) {
  if (options.repeats < 3) throw UsageError("bench needs repeats >= 3");
  using Clock = std::chrono::steady_clock;
  std::vector<BenchRow> out;
  std::uint64_t cell = 0;
  for (const auto& [rows, cols] : options.sizes) {
    for (double sparsity : options.sparsities) {
      if (!(sparsity >= 0.0) || !(sparsity < 1.0)) {
        throw UsageError("sparsity must lie in [0, 1)");
      }
      ParamStore single;
      single.add("w", Tensor({rows, cols}));
      RngStream w_stream(options.seed, cell++);
      auto w_values = sample_standard_gaussian(w_stream, rows * cols);
      single.at("w").flat() = w_values.flat();
      const auto mask = random_mask(single, 1.0 - sparsity, w_stream);
      const auto layer =
          DecomposedLayer::build(single.at("w"), mask.indices("w"));

      for (std::size_t batch : options.batches) {
        Tensor x = sample_standard_gaussian(w_stream, batch * cols);
        x = Tensor({batch, cols},
                   std::vector<double>(x.data().begin(), x.data().end()));
        auto run_add = [&] {
          return forward_sparse_add(layer.dense_q, layer.sparse_values,
                                    layer.sparse_layout, x);
        };
        auto run_addmm = [&] {
          return forward_sparse_addmm(layer.dense_q, layer.sparse_values,
                                      layer.sparse_layout, x);
        };
        if (max_relative_difference(run_add(), run_addmm()) > 1e-9) {
          throw NumericError("SparseAdd and SparseAddMM disagree beyond 1e-9");
        }
        for (std::size_t i = 0; i < options.warmup; ++i) {
          run_add();
          run_addmm();
        }
        std::vector<double> t_add, t_addmm;
        for (std::size_t i = 0; i < options.repeats; ++i) {
          auto t0 = Clock::now();
          run_add();
          auto t1 = Clock::now();
          run_addmm();
          auto t2 = Clock::now();
          t_add.push_back(
              std::chrono::duration<double, std::micro>(t1 - t0).count());
          t_addmm.push_back(
              std::chrono::duration<double, std::micro>(t2 - t1).count());
        }
        for (auto* series : {&t_add, &t_addmm}) {
          std::sort(series->begin(), series->end());
          const double median = (*series)[series->size() / 2];
          out.push_back({series == &t_add ? "sparse_add" : "sparse_addmm",
                         rows, cols, batch, sparsity, median,
                         median > 0 ? (series->back() - series->front()) / median
                                    : 0.0});
        }
      }
    }
  }
  return out;
}

void write_bench_csv(const std::filesystem::path& path,
                     const std::vector<BenchRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "'");
  os << "path,rows,cols,batch,sparsity,median_us\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%.6g,%.3f\n",
                  r.path.c_str(), r.rows, r.cols, r.batch, r.sparsity,
                  r.median_us);
    os << buf;
  }
}

QuantizedCheckpoint quantize_store(const ParamStore& params,
                                   const SparseMask& mask,
                                   std::vector<LayerQuantStats>* stats) {
  mask.validate_against(params);
  QuantizedCheckpoint ckpt;
  for (const auto& [name, w] : params) {
    const auto& idx = mask.indices(name);
    LayerQuantStats st{name, false, idx.size(), 0.0, 0.0, 0.0};
    if (w.rank() == 2 && idx.size() < w.size()) {
      const auto parts = decompose(w, idx);
      auto q = quantize_uniform4(parts.dense);
      const Tensor err = dequantize(q);
      double sum = 0.0;
      for (std::size_t i = 0; i < err.size(); ++i) {
        const double e = std::abs(err[i] - parts.dense[i]);
        sum += e;
        st.max_abs_error = std::max(st.max_abs_error, e);
      }
      st.mean_abs_error = sum / double(err.size());
      for (double s : q.scales) {
        st.max_half_scale = std::max(st.max_half_scale, s / 2.0);
      }
      st.quantized = true;
      ckpt.quantized.emplace(name, std::move(q));
      if (!idx.empty()) {
        ckpt.floats.emplace(name + kSparseSuffix, parts.sparse_values);
      }
    } else {
      ckpt.floats.emplace(name, w);
    }
    if (stats) stats->push_back(st);
  }
  return ckpt;
}

ParamStore checkpoint_layout(const QuantizedCheckpoint& ckpt) {
  ParamStore like;
  for (const auto& [name, q] : ckpt.quantized) like.add(name, Tensor(q.shape));
  for (const auto& [name, t] : ckpt.floats) {
    const bool sparse_part =
        name.size() > std::string(kSparseSuffix).size() &&
        name.ends_with(kSparseSuffix) &&
        ckpt.quantized.count(
            name.substr(0, name.size() - std::string(kSparseSuffix).size()));
    if (!sparse_part) like.add(name, Tensor(t.shape()));
  }
  return like;
}

std::pair<ParamStore, PackedParams> load_decomposed(
    const QuantizedCheckpoint& ckpt, const SparseMask& mask) {
  const ParamStore like = checkpoint_layout(ckpt);
  mask.validate_against(like);
  ParamStore dense;
  ParamStore full = zeros_like(like);
  for (const auto& [name, shape_only] : like) {
    const auto& idx = mask.indices(name);
    if (auto q = ckpt.quantized.find(name); q != ckpt.quantized.end()) {
      Tensor d = dequantize(q->second);
      Tensor values({idx.size()});
      if (!idx.empty()) {
        auto s = ckpt.floats.find(name + kSparseSuffix);
        if (s == ckpt.floats.end() || s->second.size() != idx.size()) {
          throw StructuralError("sparse values for '" + name +
                                "' missing or inconsistent with the mask");
        }
        values = s->second;
      }
      for (auto i : idx) {
        if (d[i] != 0.0) {
          throw StructuralError("quantized dense part of '" + name +
                                "' is nonzero under the mask");
        }
      }
      full.at(name) = scatter_add(d, values, idx);
      dense.add(name, std::move(d));
    } else {
      const Tensor& t = ckpt.floats.at(name);
      full.at(name) = t;
      dense.add(name, decompose(t, idx).dense);
    }
  }
  return {std::move(dense), PackedParams::extract(full, mask)};
}

void write_quantized_checkpoint(const std::filesystem::path& path,
                                const QuantizedCheckpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "' for writing");
  io::write_header(os, kQuantizedCheckpointVersion);
  auto f = ckpt.floats.begin();
  auto q = ckpt.quantized.begin();
  while (f != ckpt.floats.end() || q != ckpt.quantized.end()) {
    const bool take_float =
        q == ckpt.quantized.end() ||
        (f != ckpt.floats.end() && f->first < q->first);
    if (take_float) {
      io::write_name_and_shape(os, f->first, f->second.shape());
      io::write_u8(os, kDtypeF64);
      for (double v : f->second.data()) io::write_f64(os, v);
      ++f;
    } else {
      io::write_name_and_shape(os, q->first, q->second.shape);
      io::write_u8(os, kDtypeQ4);
      os.write(reinterpret_cast<const char*>(q->second.codes.data()),
               std::streamsize(q->second.codes.size()));
      for (double s : q->second.scales) io::write_f64(os, s);
      ++q;
    }
  }
  if (!os) throw UsageError("failed writing '" + path.string() + "'");
}

QuantizedCheckpoint read_quantized_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint '" + path.string() + "'");
  const auto version = io::read_header(is);
  if (version != kCheckpointVersion && version != kQuantizedCheckpointVersion) {
    throw StructuralError("unsupported checkpoint version " +
                          std::to_string(version));
  }
  QuantizedCheckpoint ckpt;
  std::string name;
  Shape shape;
  while (io::read_name_and_shape(is, name, shape)) {
    const std::uint8_t tag =
        version == kCheckpointVersion ? kDtypeF64 : io::read_u8(is);
    if (tag == kDtypeF64) {
      std::vector<double> data(shape_size(shape));
      for (auto& v : data) v = io::read_f64(is);
      ckpt.floats.emplace(name, Tensor(shape, std::move(data)));
    } else if (tag == kDtypeQ4) {
      QuantizedTensor q;
      q.shape = shape;
      q.codes.resize((shape_size(shape) + 1) / 2);
      is.read(reinterpret_cast<char*>(q.codes.data()),
              std::streamsize(q.codes.size()));
      if (is.gcount() != std::streamsize(q.codes.size())) {
        throw StructuralError("checkpoint truncated in q4 codes");
      }
      q.scales.resize(q.rows());
      for (auto& s : q.scales) s = io::read_f64(is);
      ckpt.quantized.emplace(name, std::move(q));
    } else {
      throw StructuralError("unknown dtype tag " + std::to_string(tag) +
                            " for '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace zosparse
