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

#include "dpaf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dpaf/errors.hpp"
#include "dpaf/rng.hpp"

namespace dpaf {
namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4)) {
    throw IdxError(IdxError::Kind::kTruncated,
                   "idx: truncated header in " + path);
  }
  return (std::uint32_t{buf[0]} << 24) | (std::uint32_t{buf[1]} << 16) |
         (std::uint32_t{buf[2]} << 8) | std::uint32_t{buf[3]};
}

void write_be32(std::ostream& out, std::uint32_t x) {
  const unsigned char buf[4] = {
      static_cast<unsigned char>(x >> 24), static_cast<unsigned char>(x >> 16),
      static_cast<unsigned char>(x >> 8), static_cast<unsigned char>(x)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace

void LabeledDataset::validate() const {
  if (images.n < 1) throw ValidationError("dataset: empty");
  if (num_classes < 2) throw ValidationError("dataset: need >= 2 classes");
  if (static_cast<int>(labels.size()) != images.n) {
    throw ValidationError("dataset: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ValidationError("dataset: label out of range");
    }
  }
  for (double x : images.v) {
    if (!(x >= -1.0 && x <= 1.0)) {
      throw ValidationError("dataset: pixel outside [-1, 1]");
    }
  }
}

std::vector<ClassPattern> default_patterns(int num_classes,
                                           double noise_level) {
  if (num_classes < 2) throw ValidationError("default_patterns: K >= 2");
  std::vector<ClassPattern> patterns(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    ClassPattern& p = patterns[k];
    // Blob centers on a circle; stripes alternate orientation and step in
    // frequency so every class pair differs in at least one cue.
    const double angle = 2.0 * M_PI * k / num_classes;
    p.blob_x = 0.5 + 0.28 * std::cos(angle);
    p.blob_y = 0.5 + 0.28 * std::sin(angle);
    p.blob_radius = 0.18;
    p.stripe_frequency = (k % 2 == 0) ? 0.0 : 2.0 + k;
    p.stripes_vertical = (k / 2) % 2 == 1;
    p.noise_level = noise_level;
  }
  return patterns;
}

LabeledDataset synth_dataset(const std::vector<ClassPattern>& patterns,
                             int n, int num_classes, int image_side,
                             std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("synth_dataset: K >= 2");
  if (static_cast<int>(patterns.size()) != num_classes) {
    throw ValidationError("synth_dataset: one pattern per class required");
  }
  if (n < 1 || image_side < 2) {
    throw ValidationError("synth_dataset: bad size");
  }
  LabeledDataset out;
  out.num_classes = num_classes;
  out.images = Tensor4(n, 1, image_side, image_side);
  out.labels.resize(n);
  RngStream rng(seed, "data/synth");
  for (int i = 0; i < n; ++i) {
    const int label = i % num_classes;  // balanced to within one
    out.labels[i] = label;
    const ClassPattern& p = patterns[label];
    const double cx = p.blob_x * (image_side - 1);
    const double cy = p.blob_y * (image_side - 1);
    const double r = std::max(1e-6, p.blob_radius * image_side);
    for (int y = 0; y < image_side; ++y) {
      for (int x = 0; x < image_side; ++x) {
        const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (r * r);
        double value = -1.0 + 2.0 * std::exp(-0.5 * d2);
        if (p.stripe_frequency > 0.0) {
          const double t = p.stripes_vertical ? x : y;
          value += 0.6 * std::sin(2.0 * M_PI * p.stripe_frequency * t /
                                  image_side);
        }
        value += p.noise_level * rng.gaussian();
        out.images.at(i, 0, y, x) = std::clamp(value, -1.0, 1.0);
      }
    }
  }
  return out;
}

LabeledDataset read_idx(const std::string& images_path,
                        const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot open " + labels_path);

  if (read_be32(img, images_path) != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::kBadMagic,
                   "idx: bad image magic in " + images_path);
  }
  const std::uint32_t n = read_be32(img, images_path);
  const std::uint32_t rows = read_be32(img, images_path);
  const std::uint32_t cols = read_be32(img, images_path);
  if (read_be32(lab, labels_path) != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::kBadMagic,
                   "idx: bad label magic in " + labels_path);
  }
  const std::uint32_t n_labels = read_be32(lab, labels_path);
  if (n != n_labels) {
    throw IdxError(IdxError::Kind::kCountMismatch,
                   "idx: image/label count mismatch");
  }
  if (n == 0 || rows == 0 || cols == 0) {
    throw IdxError(IdxError::Kind::kTruncated, "idx: empty dimensions");
  }

  LabeledDataset out;
  out.images = Tensor4(static_cast<int>(n), 1, static_cast<int>(rows),
                       static_cast<int>(cols));
  out.labels.resize(n);
  std::vector<unsigned char> row(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!img.read(reinterpret_cast<char*>(row.data()), row.size())) {
      throw IdxError(IdxError::Kind::kTruncated,
                     "idx: truncated image payload in " + images_path);
    }
    for (std::size_t k = 0; k < row.size(); ++k) {
      out.images.v[i * row.size() + k] = 2.0 * row[k] / 255.0 - 1.0;
    }
  }
  std::vector<unsigned char> raw_labels(n);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()), n)) {
    throw IdxError(IdxError::Kind::kTruncated,
                   "idx: truncated label payload in " + labels_path);
  }
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    out.labels[i] = raw_labels[i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = max_label + 1;
  if (out.num_classes < 2) out.num_classes = 2;
  return out;
}

void write_idx(const LabeledDataset& data, const std::string& images_path,
               const std::string& labels_path) {
  if (data.images.c != 1) {
    throw ValidationError("write_idx: only single-channel datasets");
  }
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot write " + images_path);
  write_be32(img, kIdxImageMagic);
  write_be32(img, static_cast<std::uint32_t>(data.images.n));
  write_be32(img, static_cast<std::uint32_t>(data.images.h));
  write_be32(img, static_cast<std::uint32_t>(data.images.w));
  for (double x : data.images.v) {
    const double mapped = std::clamp((x + 1.0) * 0.5, 0.0, 1.0) * 255.0;
    const unsigned char b = static_cast<unsigned char>(std::lround(mapped));
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!img) throw IoError("idx: write failed for " + images_path);

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot write " + labels_path);
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.labels.size()));
  for (int y : data.labels) {
    const unsigned char b = static_cast<unsigned char>(y);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!lab) throw IoError("idx: write failed for " + labels_path);
}

std::vector<std::vector<int>> subsample_batches(const LabeledDataset& data,
                                                int batch_size,
                                                int num_batches,
                                                std::uint64_t seed,
                                                std::uint64_t epoch) {
  const int n = data.size();
  if (batch_size < 1 || num_batches < 1) {
    throw ValidationError("subsample_batches: bad schedule");
  }
  if (static_cast<long>(batch_size) * num_batches > n) {
    throw ValidationError(
        "subsample_batches: schedule draws more samples than the dataset "
        "holds");
  }
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  RngStream rng(seed, "data/permutation", epoch);
  for (int i = n - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
  }
  std::vector<std::vector<int>> batches(num_batches);
  for (int b = 0; b < num_batches; ++b) {
    batches[b].assign(perm.begin() + static_cast<long>(b) * batch_size,
                      perm.begin() + static_cast<long>(b + 1) * batch_size);
  }
  return batches;
}

void gather_batch(const LabeledDataset& data, const std::vector<int>& indices,
                  Tensor4& images, std::vector<int>& labels) {
  images = Tensor4(static_cast<int>(indices.size()), data.images.c,
                   data.images.h, data.images.w);
  labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int src = indices[i];
    if (src < 0 || src >= data.size()) {
      throw ValidationError("gather_batch: index out of range");
    }
    const auto from = data.images.sample(src);
    std::copy(from.begin(), from.end(), images.sample(i).begin());
    labels[i] = data.labels[src];
  }
}

LabeledDataset make_neighbor(const LabeledDataset& data, int index) {
  if (index < 0 || index >= data.size()) {
    throw ValidationError("make_neighbor: index out of range");
  }
  if (data.size() == 1) {
    throw ValidationError("make_neighbor: removal would empty the dataset");
  }
  LabeledDataset out;
  out.num_classes = data.num_classes;
  out.images = Tensor4(data.images.n - 1, data.images.c, data.images.h,
                       data.images.w);
  out.labels.reserve(data.labels.size() - 1);
  int dst = 0;
  for (int i = 0; i < data.size(); ++i) {
    if (i == index) continue;
    const auto from = data.images.sample(i);
    std::copy(from.begin(), from.end(), out.images.sample(dst).begin());
    out.labels.push_back(data.labels[i]);
    ++dst;
  }
  return out;
}

}  // namespace dpaf
