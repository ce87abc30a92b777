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
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "zosparse/tensor.hpp"

namespace zosparse {

// Named parameter tensors iterated in ascending lexicographic name order.
// That order defines the flattening of the store into one vector of
// total_dim() coordinates.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;
  using iterator = Map::iterator;
  using const_iterator = Map::const_iterator;

  ParamStore() = default;

  void add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const {
    return tensors_.count(name) != 0;
  }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t num_tensors() const { return tensors_.size(); }
  std::size_t total_dim() const;
  std::vector<std::string> names() const;

  iterator begin() { return tensors_.begin(); }
  iterator end() { return tensors_.end(); }
  const_iterator begin() const { return tensors_.begin(); }
  const_iterator end() const { return tensors_.end(); }

  // Same names and shapes, or throws StructuralError naming the first
  // offending layer.
  void require_same_structure(const ParamStore& other) const;
  bool same_structure(const ParamStore& other) const;

  bool bitwise_equal(const ParamStore& other) const;
  friend bool operator==(const ParamStore&, const ParamStore&) = default;

  // Concatenation in iteration order, and its inverse.
  Eigen::VectorXd flatten() const;
  void assign_flat(const Eigen::Ref<const Eigen::VectorXd>& values);

 private:
  Map tensors_;
};

ParamStore zeros_like(const ParamStore& like);

// dst += alpha * src, layer by layer in name order. alpha == 0 and zero
// entries of src leave dst untouched, so signed zeros survive.
ParamStore& store_axpy(ParamStore& dst, double alpha, const ParamStore& src);

// Sum of a_i * b_i over every coordinate, accumulated in name order.
double store_dot(const ParamStore& a, const ParamStore& b);

// Binary checkpoint: "ZOSF", u32 version, then one record per tensor in name
// order (u32 name length, UTF-8 name, u32 rank, u64 dims, f64 data), all
// little-endian.
inline constexpr char kCheckpointMagic[4] = {'Z', 'O', 'S', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path,
                      const ParamStore& store);
ParamStore read_checkpoint(const std::filesystem::path& path);

namespace io {

// Little-endian primitives shared by the checkpoint readers and writers.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

void write_header(std::ostream& os, std::uint32_t version);
// Returns the version after validating the magic.
std::uint32_t read_header(std::istream& is);

void write_name_and_shape(std::ostream& os, const std::string& name,
                          const Shape& shape);
// False at clean end of stream.
bool read_name_and_shape(std::istream& is, std::string& name, Shape& shape);

}  // namespace io

}  // namespace zosparse
