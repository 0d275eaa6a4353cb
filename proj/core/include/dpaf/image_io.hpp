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

#ifndef DPAF_IMAGE_IO_HPP_
#define DPAF_IMAGE_IO_HPP_

#include <span>
#include <string>
#include <vector>

#include "dpaf/data.hpp"

namespace dpaf {

// Binary PGM (P5), maxval 255. Values map linearly between [-1, 1] and
// [0, 255].
void write_pgm(const std::string& path, std::span<const double> pixels, int h,
               int w);
std::vector<double> read_pgm(const std::string& path, int* h, int* w);

// Writes one PGM per (sample, channel) as sample_NNNNN_cC.pgm plus a
// manifest.csv mapping rows (index,label,channel,file). Multi-channel
// images simply produce one file per channel.
void write_pgm_dataset(const std::string& dir, const LabeledDataset& data);

// Rebuilds the dataset from a manifest.csv written by write_pgm_dataset.
LabeledDataset read_pgm_dataset(const std::string& dir);

}  // namespace dpaf

#endif  // DPAF_IMAGE_IO_HPP_
