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

#include "zosparse/param_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace zosparse {

void ParamStore::add(const std::string& name, Tensor tensor) {
  if (name.empty()) throw StructuralError("parameter name must not be empty");
  if (!tensors_.emplace(name, std::move(tensor)).second) {
    throw StructuralError("duplicate parameter name '" + name + "'");
  }
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw StructuralError("no parameter named '" + name + "'");
  }
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

std::size_t ParamStore::total_dim() const {
  std::size_t d = 0;
  for (const auto& [name, t] : tensors_) d += t.size();
  return d;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, t] : tensors_) out.push_back(name);
  return out;
}

void ParamStore::require_same_structure(const ParamStore& other) const {
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end() && b != other.tensors_.end(); ++a, ++b) {
    if (a->first != b->first) {
      throw StructuralError("layer name mismatch: '" + a->first + "' vs '" +
                            b->first + "'");
    }
    if (!a->second.same_shape(b->second)) {
      throw StructuralError("shape mismatch in layer '" + a->first + "': " +
                            shape_string(a->second.shape()) + " vs " +
                            shape_string(b->second.shape()));
    }
  }
  if (a != tensors_.end()) {
    throw StructuralError("layer '" + a->first + "' missing from other store");
  }
  if (b != other.tensors_.end()) {
    throw StructuralError("unexpected extra layer '" + b->first + "'");
  }
}

bool ParamStore::same_structure(const ParamStore& other) const {
  try {
    require_same_structure(other);
    return true;
  } catch (const StructuralError&) {
    return false;
  }
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (!same_structure(other)) return false;
  auto b = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (!t.bitwise_equal((b++)->second)) return false;
  }
  return true;
}

Eigen::VectorXd ParamStore::flatten() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(total_dim()));
  Eigen::Index offset = 0;
  for (const auto& [name, t] : tensors_) {
    out.segment(offset, Eigen::Index(t.size())) = t.flat();
    offset += Eigen::Index(t.size());
  }
  return out;
}

void ParamStore::assign_flat(const Eigen::Ref<const Eigen::VectorXd>& values) {
  if (std::size_t(values.size()) != total_dim()) {
    throw StructuralError("flat vector of length " +
                          std::to_string(values.size()) +
                          " does not match store dimension " +
                          std::to_string(total_dim()));
  }
  Eigen::Index offset = 0;
  for (auto& [name, t] : tensors_) {
    t.flat() = values.segment(offset, Eigen::Index(t.size()));
    offset += Eigen::Index(t.size());
  }
}

ParamStore zeros_like(const ParamStore& like) {
  ParamStore out;
  for (const auto& [name, t] : like) out.add(name, Tensor(t.shape()));
  return out;
}

ParamStore& store_axpy(ParamStore& dst, double alpha, const ParamStore& src) {
  dst.require_same_structure(src);
  if (alpha == 0.0) return dst;
  auto s = src.begin();
  for (auto& [name, d] : dst) {
    auto dd = d.data();
    auto ss = (s++)->second.data();
    for (std::size_t i = 0; i < dd.size(); ++i) {
      if (ss[i] != 0.0) dd[i] += alpha * ss[i];
    }
  }
  return dst;
}

double store_dot(const ParamStore& a, const ParamStore& b) {
  a.require_same_structure(b);
  double acc = 0.0;
  auto bt = b.begin();
  for (const auto& [name, at] : a) {
    auto x = at.data();
    auto y = (bt++)->second.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  }
  return acc;
}

namespace io {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != std::streamsize(sizeof(T))) {
    throw StructuralError("checkpoint truncated");
  }
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, v); }
std::uint8_t read_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
double read_f64(std::istream& is) { return get<double>(is); }

void write_header(std::ostream& os, std::uint32_t version) {
  os.write(kCheckpointMagic, 4);
  write_u32(os, version);
}

std::uint32_t read_header(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw StructuralError("not a ZOSF checkpoint (bad magic)");
  }
  return read_u32(is);
}

void write_name_and_shape(std::ostream& os, const std::string& name,
                          const Shape& shape) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  write_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_u64(os, d);
}

bool read_name_and_shape(std::istream& is, std::string& name, Shape& shape) {
  if (is.peek() == std::char_traits<char>::eof()) return false;
  const auto len = read_u32(is);
  name.assign(len, '\0');
  is.read(name.data(), len);
  if (is.gcount() != std::streamsize(len)) {
    throw StructuralError("checkpoint truncated in tensor name");
  }
  const auto rank = read_u32(is);
  if (rank > 8) throw StructuralError("implausible tensor rank in checkpoint");
  shape.assign(rank, 0);
  for (auto& d : shape) d = read_u64(is);
  return true;
}

}  // namespace io

void write_checkpoint(const std::filesystem::path& path,
                      const ParamStore& store) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot open '" + path.string() + "' for writing");
  io::write_header(os, kCheckpointVersion);
  for (const auto& [name, t] : store) {
    io::write_name_and_shape(os, name, t.shape());
    for (double v : t.data()) io::write_f64(os, v);
  }
  if (!os) throw UsageError("failed writing '" + path.string() + "'");
}

ParamStore read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint '" + path.string() + "'");
  const auto version = io::read_header(is);
  if (version != kCheckpointVersion) {
    throw StructuralError("checkpoint '" + path.string() + "' has version " +
                          std::to_string(version) +
                          "; use the quantized reader for version 2");
  }
  ParamStore store;
  std::string name;
  Shape shape;
  while (io::read_name_and_shape(is, name, shape)) {
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = io::read_f64(is);
    store.add(name, Tensor(shape, std::move(data)));
  }
  return store;
}

}  // namespace zosparse
