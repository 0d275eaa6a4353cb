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

#ifndef DPAF_MECHANISMS_HPP_
#define DPAF_MECHANISMS_HPP_

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpaf/rng.hpp"
#include "dpaf/tensor.hpp"

namespace dpaf {

// Variance stabilizer inside the normalization square root. Keeps constant
// maps finite; only ever shrinks a map's norm, so the sqrt(m) * p
// sensitivity bound still holds.
inline constexpr double kSinVarianceEpsilon = 1e-5;

struct ClipSpec {
  double threshold = 1.0;  // u; +infinity disables clipping

  void validate() const;
};

// Counts noisy releases by component label. Tests hang one of these on the
// noise path to audit the trainer's privacy ledger independently.
struct ReleaseProbe {
  std::map<std::string, long, std::less<>> counts;

  void record(std::string_view component) { ++counts[std::string(component)]; }
  long count(std::string_view component) const {
    auto it = counts.find(component);
    return it == counts.end() ? 0 : it->second;
  }
};

// A seedable randomness handle for one noise consumer, with optional
// release instrumentation.
struct NoiseSource {
  RngStream* rng = nullptr;
  ReleaseProbe* probe = nullptr;
  std::string label;

  // v += N(0, stddev^2 I). One call is one release.
  void add_gaussian(std::span<double> v, double stddev);
};

struct NoiseSpec {
  double sigma = 0.0;        // noise multiplier
  double sensitivity = 0.0;  // Delta, l2
  NoiseSource source;

  void validate() const;
};

// Per-(sample, map) standardization: subtract the map mean and divide by
// sqrt(variance + kSinVarianceEpsilon), variance taken over the map with
// the 1/(H*W) population convention. No learnable center or scale. Every
// output map has l2 norm at most sqrt(H*W), with equality in the limit of
// variance much larger than the stabilizer.
Tensor4 sin_normalize(const Tensor4& t);

// As above, also writing 1/sqrt(variance + eps) per (sample, map) into
// inv_std (size n*c) for use by backward passes.
Tensor4 sin_normalize_with_stats(const Tensor4& t,
                                 std::vector<double>* inv_std);

// Concatenates each sample's maps into a vector of length c*h*w and sums
// the vectors over the batch. Callers normalize first; this function does
// not re-check.
std::vector<double> aggregate(const Tensor4& t);

// aggregate(t) plus elementwise N(0, (sigma * sqrt(m) * p)^2) noise.
// noise.sensitivity must equal sqrt(m) * p for this tensor's shape; a
// mismatch is a hard error rather than a silently wrong privacy guarantee.
std::vector<double> dp_aggregate(const Tensor4& t, NoiseSpec& noise);

// min{1, u / ||v||_2} * v. The zero vector maps to itself.
std::vector<double> clip_gradient(std::vector<double> v, const ClipSpec& spec);

// Zeroes all but the ceil(keep_fraction * len) largest-magnitude entries.
// Kept entries are unchanged; ties keep the lower index.
std::vector<double> top_k_compress(std::vector<double> v,
                                   double keep_fraction);

// One DPSGD update on `params`:
//   w -= lr * [ (1/B) sum_i clip_u(compress(g_i)) + (sigma u / B) xi ]
// with xi standard normal from `noise`. Per-sample compression runs before
// clipping when keep_fraction < 1. sigma == 0 skips the noise draw (and
// records no release), leaving plain clipped SGD.
void dpsgd_step(const std::vector<std::vector<double>>& per_sample_grads,
                const ClipSpec& clip, double sigma, double learning_rate,
                std::span<double> params, NoiseSource* noise,
                double keep_fraction = 1.0);

}  // namespace dpaf

#endif  // DPAF_MECHANISMS_HPP_
