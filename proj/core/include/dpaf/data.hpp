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

#ifndef DPAF_DATA_HPP_
#define DPAF_DATA_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "dpaf/tensor.hpp"

namespace dpaf {

struct LabeledDataset {
  Tensor4 images;           // (N, c, rho, rho), values in [-1, 1]
  std::vector<int> labels;  // length N, each in [0, num_classes)
  int num_classes = 0;

  int size() const { return images.n; }
  void validate() const;
};

// Per-class recipe for the synthetic generator: a soft blob at a relative
// position plus optional sinusoidal stripes, with additive pixel noise.
struct ClassPattern {
  double blob_x = 0.5;       // relative [0, 1]
  double blob_y = 0.5;
  double blob_radius = 0.25; // relative to the image side
  double stripe_frequency = 0.0;  // cycles across the image; 0 = none
  bool stripes_vertical = false;
  double noise_level = 0.1;  // stddev of pixel noise before clamping
};

// Distinct, well separated patterns for K classes.
std::vector<ClassPattern> default_patterns(int num_classes,
                                           double noise_level);

// Deterministic synthetic dataset: round-robin class assignment (balanced
// to within one sample), pattern pixels in [-1, 1].
LabeledDataset synth_dataset(const std::vector<ClassPattern>& patterns,
                             int n, int num_classes, int image_side,
                             std::uint64_t seed);

// Reads an IDX image/label file pair (big-endian magics 0x803 / 0x801,
// unsigned byte payloads). Pixels map linearly from [0, 255] to [-1, 1].
// Throws IdxError with a distinct kind for a bad magic, a truncated
// payload, and an image/label count mismatch.
LabeledDataset read_idx(const std::string& images_path,
                        const std::string& labels_path);

// Writes the dataset in the same IDX format, mapping [-1, 1] back to
// [0, 255].
void write_idx(const LabeledDataset& data, const std::string& images_path,
               const std::string& labels_path);

// One epoch of subsampling without replacement: a fresh permutation keyed
// by (seed, epoch), split into `num_batches` disjoint batches of
// `batch_size` index lists. The accountant's per-step rate for this
// batcher is batch_size / N.
std::vector<std::vector<int>> subsample_batches(const LabeledDataset& data,
                                                int batch_size,
                                                int num_batches,
                                                std::uint64_t seed,
                                                std::uint64_t epoch);

// Copies the rows named by `indices` into a batch tensor + labels.
void gather_batch(const LabeledDataset& data, const std::vector<int>& indices,
                  Tensor4& images, std::vector<int>& labels);

// The dataset with sample `index` removed; all other samples unchanged.
// Removing the last remaining sample is an error (datasets are nonempty).
LabeledDataset make_neighbor(const LabeledDataset& data, int index);

}  // namespace dpaf

#endif  // DPAF_DATA_HPP_
