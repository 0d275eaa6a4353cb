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

#ifndef DPAF_TENSOR_HPP_
#define DPAF_TENSOR_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "dpaf/errors.hpp"

namespace dpaf {

// Dense NCHW tensor of doubles. Batches of images and feature maps all use
// this one layout; a "flat vector" view of sample i is just the contiguous
// range of its c*h*w values.
struct Tensor4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_),
        c(c_),
        h(h_),
        w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {
    if (n_ < 0 || c_ <= 0 || h_ <= 0 || w_ <= 0) {
      throw ValidationError("Tensor4: nonpositive dimension");
    }
  }

  std::size_t size() const { return v.size(); }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(c) * h * w;
  }

  double& at(int i, int j, int y, int x) {
    return v[((static_cast<std::size_t>(i) * c + j) * h + y) * w + x];
  }
  double at(int i, int j, int y, int x) const {
    return v[((static_cast<std::size_t>(i) * c + j) * h + y) * w + x];
  }

  std::span<double> sample(int i) {
    return {v.data() + static_cast<std::size_t>(i) * sample_size(),
            sample_size()};
  }
  std::span<const double> sample(int i) const {
    return {v.data() + static_cast<std::size_t>(i) * sample_size(),
            sample_size()};
  }
};

}  // namespace dpaf

#endif  // DPAF_TENSOR_HPP_
