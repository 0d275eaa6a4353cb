// Copyright 2026 The dpaflab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DPAF_RNG_HPP_
#define DPAF_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

namespace dpaf {

// Derives a child stream id from a master seed, a textual stream label and
// two numeric coordinates (typically epoch and batch). Every consumer of
// randomness in this project draws from a stream derived this way, so runs
// are reproducible and independent of the order in which unrelated
// components consume their own streams.
std::uint64_t derive_stream_id(std::uint64_t master_seed,
                               std::string_view label, std::uint64_t a = 0,
                               std::uint64_t b = 0);

// A deterministic random stream. Gaussian variates use an explicit
// Box-Muller transform rather than std::normal_distribution so that output
// is bit-identical across standard library implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t stream_id)
      : id_(stream_id), gen_(stream_id) {}
  RngStream(std::uint64_t master_seed, std::string_view label,
            std::uint64_t a = 0, std::uint64_t b = 0)
      : RngStream(derive_stream_id(master_seed, label, a, b)) {}

  std::uint64_t id() const { return id_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; never exactly zero, safe to pass through log().
  double uniform_open() {
    return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  int uniform_int(int n);

  // Standard normal variate.
  double gaussian();

 private:
  std::uint64_t id_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dpaf

#endif  // DPAF_RNG_HPP_
