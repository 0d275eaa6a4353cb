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

#include "dpaf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dpaf/errors.hpp"

namespace dpaf {
namespace {

constexpr char kMagic[8] = {'D', 'P', 'A', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(x >> (8 * i)));
}

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(x >> (8 * i)));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw IoError("checkpoint: truncated file " + path_);
    }
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
           (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
  }

  std::uint64_t u64() {
    std::uint64_t x = 0;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8));
    for (int i = 7; i >= 0; --i) x = (x << 8) | p[i];
    return x;
  }

  std::string str() {
    const std::uint32_t n = u32();
    return std::string(take(n), n);
  }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little,
              "payload serialization below assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     std::uint64_t config_digest,
                     const std::string& config_text) {
  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u64(out, config_digest);
  put_string(out, config_text);
  put_u32(out, static_cast<std::uint32_t>(params.groups.size()));
  for (const auto& g : params.groups) {
    put_string(out, g.name);
    out.push_back(g.frozen ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(g.tensors.size()));
    for (const auto& t : g.tensors) {
      put_string(out, t.name);
      put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
      for (int d : t.dims) put_u32(out, static_cast<std::uint32_t>(d));
    }
    put_u64(out, g.values.size());
  }
  for (const auto& g : params.groups) {
    const std::size_t bytes = g.values.size() * sizeof(double);
    const std::size_t base = out.size();
    out.resize(base + bytes);
    std::memcpy(out.data() + base, g.values.data(), bytes);
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("checkpoint: cannot write " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(file)),
                  std::istreambuf_iterator<char>());
  Reader in(buf, path);
  if (std::memcmp(in.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  if (in.u32() != kVersion) {
    throw IoError("checkpoint: unsupported version in " + path);
  }
  LoadedCheckpoint loaded;
  loaded.config_digest = in.u64();
  loaded.config_text = in.str();
  const std::uint32_t group_count = in.u32();
  for (std::uint32_t gi = 0; gi < group_count; ++gi) {
    ParamGroup g;
    g.name = in.str();
    g.frozen = *in.take(1) != 0;
    const std::uint32_t tensor_count = in.u32();
    std::size_t offset = 0;
    for (std::uint32_t ti = 0; ti < tensor_count; ++ti) {
      TensorShape t;
      t.name = in.str();
      const std::uint32_t rank = in.u32();
      for (std::uint32_t d = 0; d < rank; ++d) {
        t.dims.push_back(static_cast<int>(in.u32()));
      }
      t.offset = offset;
      offset += t.count();
      g.tensors.push_back(std::move(t));
    }
    const std::uint64_t count = in.u64();
    if (count != offset) {
      throw IoError("checkpoint: tensor shapes disagree with payload size in " +
                    path);
    }
    g.values.assign(count, 0.0);
    loaded.params.groups.push_back(std::move(g));
  }
  for (auto& g : loaded.params.groups) {
    const std::size_t bytes = g.values.size() * sizeof(double);
    std::memcpy(g.values.data(), in.take(bytes), bytes);
  }
  return loaded;
}

}  // namespace dpaf
