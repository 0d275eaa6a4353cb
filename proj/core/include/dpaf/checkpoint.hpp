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

#ifndef DPAF_CHECKPOINT_HPP_
#define DPAF_CHECKPOINT_HPP_

#include <cstdint>
#include <string>

#include "dpaf/nn.hpp"

namespace dpaf {

// Flat binary checkpoint: magic, format version, config digest, the
// config's canonical text (so a checkpoint alone can rebuild its network),
// a group table (name, freeze flag, tensor shapes), then one little-endian
// float64 payload per group.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     std::uint64_t config_digest,
                     const std::string& config_text);

struct LoadedCheckpoint {
  ModelParams params;
  std::uint64_t config_digest = 0;
  std::string config_text;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dpaf

#endif  // DPAF_CHECKPOINT_HPP_
