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

#include <array>
#include <cstddef>
#include <cstdint>

#include "zosparse/tensor.hpp"

namespace zosparse {

// Philox4x32 with 10 rounds (Salmon et al., "Parallel random numbers: as easy
// as 1, 2, 3"). Pure function of (key, counter).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key);

// Counter-based stream. Draw number `counter` of stream `stream_id` is a pure
// function of (seed, stream_id, counter), so any state can be replayed and any
// split of a draw sequence reproduces the unsplit sequence bit for bit.
//
// Every draw, of any kind, consumes exactly one counter slot (one Philox
// block). Gaussians use the cosine branch of Box-Muller on the block's two
// 53-bit uniforms.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream_id,
            std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  double gaussian() { return gaussian_at(counter_++); }
  // Uniform on the open interval (0, 1).
  double uniform() { return uniform_at(counter_++); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  double gaussian_at(std::uint64_t position) const;
  double uniform_at(std::uint64_t position) const;

  // Independent stream under the same seed.
  RngStream substream(std::uint64_t stream_id) const {
    return RngStream(seed_, stream_id, 0);
  }

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::array<std::uint32_t, 4> block(std::uint64_t position) const;

  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

// n draws from N(0, 1); advances the stream by n.
Tensor sample_standard_gaussian(RngStream& stream, std::size_t n);

}  // namespace zosparse
