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

#include "zosparse/rng.hpp"

#include <cmath>
#include <numbers>

namespace zosparse {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = std::uint64_t{a} * std::uint64_t{b};
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// 53 random bits mapped to the open interval (0, 1).
inline double to_unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

std::array<std::uint32_t, 4> RngStream::block(std::uint64_t position) const {
  return philox4x32_10(
      {static_cast<std::uint32_t>(position),
       static_cast<std::uint32_t>(position >> 32),
       static_cast<std::uint32_t>(stream_id_),
       static_cast<std::uint32_t>(stream_id_ >> 32)},
      {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
}

double RngStream::uniform_at(std::uint64_t position) const {
  const auto b = block(position);
  return to_unit_open((std::uint64_t{b[1]} << 32) | b[0]);
}

double RngStream::gaussian_at(std::uint64_t position) const {
  const auto b = block(position);
  const double u1 = to_unit_open((std::uint64_t{b[1]} << 32) | b[0]);
  const double u2 = to_unit_open((std::uint64_t{b[3]} << 32) | b[2]);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw UsageError("RngStream::below requires n > 0");
  const auto b = block(counter_++);
  const std::uint64_t bits = (std::uint64_t{b[1]} << 32) | b[0];
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(bits) * n) >> 64);
}

Tensor sample_standard_gaussian(RngStream& stream, std::size_t n) {
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = stream.gaussian();
  return out;
}

}  // namespace zosparse
