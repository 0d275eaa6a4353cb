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

#include "dpaf/mechanisms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpaf/errors.hpp"

namespace dpaf {

void ClipSpec::validate() const {
  if (!(threshold > 0.0)) {  // +inf passes, NaN does not
    throw ValidationError("ClipSpec: threshold must be positive");
  }
}

void NoiseSource::add_gaussian(std::span<double> v, double stddev) {
  if (rng == nullptr) {
    throw ValidationError("NoiseSource: no rng stream attached");
  }
  for (double& x : v) x += stddev * rng->gaussian();
  if (probe != nullptr) probe->record(label);
}

void NoiseSpec::validate() const {
  if (!(sigma > 0.0)) throw ValidationError("NoiseSpec: sigma must be positive");
  if (!(sensitivity > 0.0)) {
    throw ValidationError("NoiseSpec: sensitivity must be positive");
  }
  if (source.rng == nullptr) {
    throw ValidationError("NoiseSpec: no rng stream attached");
  }
}

Tensor4 sin_normalize(const Tensor4& t) {
  return sin_normalize_with_stats(t, nullptr);
}

Tensor4 sin_normalize_with_stats(const Tensor4& t,
                                 std::vector<double>* inv_std_out) {
  const int hw = t.h * t.w;
  if (hw == 0 || t.n == 0) throw ValidationError("sin_normalize: empty tensor");
  Tensor4 out(t.n, t.c, t.h, t.w);
  if (inv_std_out != nullptr) {
    inv_std_out->assign(static_cast<std::size_t>(t.n) * t.c, 0.0);
  }
  for (int i = 0; i < t.n; ++i) {
    for (int j = 0; j < t.c; ++j) {
      const std::size_t base = (static_cast<std::size_t>(i) * t.c + j) * hw;
      const double* src = &t.v[base];
      double* dst = &out.v[base];
      double mean = 0.0;
      for (int k = 0; k < hw; ++k) mean += src[k];
      mean /= hw;
      double var = 0.0;
      for (int k = 0; k < hw; ++k) {
        const double d = src[k] - mean;
        var += d * d;
      }
      var /= hw;
      const double inv_std = 1.0 / std::sqrt(var + kSinVarianceEpsilon);
      for (int k = 0; k < hw; ++k) dst[k] = (src[k] - mean) * inv_std;
      if (inv_std_out != nullptr) {
        (*inv_std_out)[static_cast<std::size_t>(i) * t.c + j] = inv_std;
      }
    }
  }
  return out;
}

std::vector<double> aggregate(const Tensor4& t) {
  if (t.n == 0) throw ValidationError("aggregate: empty batch");
  std::vector<double> out(t.sample_size(), 0.0);
  for (int i = 0; i < t.n; ++i) {
    const auto sample = t.sample(i);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += sample[k];
  }
  return out;
}

std::vector<double> dp_aggregate(const Tensor4& t, NoiseSpec& noise) {
  noise.validate();
  if (t.h != t.w) {
    throw ValidationError("dp_aggregate: feature maps must be square");
  }
  const double expected = std::sqrt(static_cast<double>(t.c)) * t.h;
  if (std::abs(noise.sensitivity - expected) >
      1e-12 * std::max(1.0, expected)) {
    throw ValidationError(
        "dp_aggregate: noise sensitivity does not match sqrt(m) * p for "
        "this tensor");
  }
  std::vector<double> out = aggregate(t);
  noise.source.add_gaussian(out, noise.sigma * noise.sensitivity);
  return out;
}

std::vector<double> clip_gradient(std::vector<double> v,
                                  const ClipSpec& spec) {
  spec.validate();
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > spec.threshold) {
    const double scale = spec.threshold / norm;
    for (double& x : v) x *= scale;
  }
  return v;
}

std::vector<double> top_k_compress(std::vector<double> v,
                                   double keep_fraction) {
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw ValidationError("top_k_compress: keep_fraction must be in (0, 1]");
  }
  if (keep_fraction == 1.0 || v.empty()) return v;
  const std::size_t n = v.size();
  // Guard against ceil(0.9 * 10) = 10 style float slop.
  const std::size_t k = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(keep_fraction * n - 1e-9)));
  if (k >= n) return v;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Stable sort by descending magnitude keeps the lower index first among
  // ties.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return std::abs(v[a]) > std::abs(v[b]);
                   });
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) out[order[i]] = v[order[i]];
  return out;
}

void dpsgd_step(const std::vector<std::vector<double>>& per_sample_grads,
                const ClipSpec& clip, double sigma, double learning_rate,
                std::span<double> params, NoiseSource* noise,
                double keep_fraction) {
  clip.validate();
  if (per_sample_grads.empty()) {
    throw ValidationError("dpsgd_step: empty gradient batch");
  }
  if (sigma < 0.0) throw ValidationError("dpsgd_step: negative sigma");
  const std::size_t dim = params.size();
  for (const auto& g : per_sample_grads) {
    if (g.size() != dim) {
      throw ValidationError("dpsgd_step: gradient/parameter size mismatch");
    }
  }
  const double batch = static_cast<double>(per_sample_grads.size());
  std::vector<double> step(dim, 0.0);
  for (const auto& g : per_sample_grads) {
    std::vector<double> clipped =
        keep_fraction < 1.0 ? top_k_compress(g, keep_fraction) : g;
    clipped = clip_gradient(std::move(clipped), clip);
    for (std::size_t k = 0; k < dim; ++k) step[k] += clipped[k];
  }
  for (double& x : step) x /= batch;
  if (sigma > 0.0) {
    if (noise == nullptr) {
      throw ValidationError("dpsgd_step: sigma > 0 requires a noise source");
    }
    noise->add_gaussian(step, sigma * clip.threshold / batch);
  }
  for (std::size_t k = 0; k < dim; ++k) {
    params[k] -= learning_rate * step[k];
  }
}

}  // namespace dpaf
