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

#include "dpaf/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpaf/errors.hpp"

namespace dpaf {
namespace {

unsigned char to_byte(double x) {
  const double mapped = std::clamp((x + 1.0) * 0.5, 0.0, 1.0) * 255.0;
  return static_cast<unsigned char>(std::lround(mapped));
}

double from_byte(unsigned char b) { return 2.0 * b / 255.0 - 1.0; }

}  // namespace

void write_pgm(const std::string& path, std::span<const double> pixels, int h,
               int w) {
  if (h < 1 || w < 1 || pixels.size() != static_cast<std::size_t>(h) * w) {
    throw ValidationError("write_pgm: bad dimensions");
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("pgm: cannot write " + path);
  file << "P5\n" << w << " " << h << "\n255\n";
  std::string payload(pixels.size(), '\0');
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    payload[k] = static_cast<char>(to_byte(pixels[k]));
  }
  file.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!file) throw IoError("pgm: write failed for " + path);
}

std::vector<double> read_pgm(const std::string& path, int* h, int* w) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("pgm: cannot open " + path);
  std::string magic;
  file >> magic;
  if (magic != "P5") throw IoError("pgm: not a P5 file: " + path);
  int width = 0, height = 0, maxval = 0;
  file >> width >> height >> maxval;
  if (!file || width < 1 || height < 1 || maxval != 255) {
    throw IoError("pgm: unsupported header in " + path);
  }
  file.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height);
  if (!file.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError("pgm: truncated payload in " + path);
  }
  std::vector<double> out(bytes.size());
  for (std::size_t k = 0; k < bytes.size(); ++k) out[k] = from_byte(bytes[k]);
  if (h != nullptr) *h = height;
  if (w != nullptr) *w = width;
  return out;
}

void write_pgm_dataset(const std::string& dir, const LabeledDataset& data) {
  data.validate();
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "index,label,channel,file\n";
  const std::size_t map =
      static_cast<std::size_t>(data.images.h) * data.images.w;
  for (int i = 0; i < data.size(); ++i) {
    for (int ch = 0; ch < data.images.c; ++ch) {
      char name[40];
      std::snprintf(name, sizeof name, "sample_%05d_c%d.pgm", i, ch);
      const auto sample = data.images.sample(i);
      write_pgm(dir + "/" + name, sample.subspan(ch * map, map),
                data.images.h, data.images.w);
      manifest << i << "," << data.labels[i] << "," << ch << "," << name
               << "\n";
    }
  }
  std::ofstream file(dir + "/manifest.csv", std::ios::trunc);
  if (!file) throw IoError("pgm: cannot write manifest in " + dir);
  file << manifest.str();
  if (!file) throw IoError("pgm: manifest write failed in " + dir);
}

LabeledDataset read_pgm_dataset(const std::string& dir) {
  std::ifstream file(dir + "/manifest.csv");
  if (!file) throw IoError("pgm: cannot open manifest in " + dir);
  std::string line;
  if (!std::getline(file, line) || line != "index,label,channel,file") {
    throw IoError("pgm: bad manifest header in " + dir);
  }
  struct Row {
    int index;
    int label;
    int channel;
    std::string name;
  };
  std::vector<Row> rows;
  int max_index = -1, max_channel = -1, max_label = 0;
  while (std::getline(file, line)) {
    if (line.empty()) continue;
    Row row;
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    row.index = std::stoi(field);
    std::getline(ss, field, ',');
    row.label = std::stoi(field);
    std::getline(ss, field, ',');
    row.channel = std::stoi(field);
    std::getline(ss, row.name);
    if (row.name.empty()) throw IoError("pgm: bad manifest row in " + dir);
    max_index = std::max(max_index, row.index);
    max_channel = std::max(max_channel, row.channel);
    max_label = std::max(max_label, row.label);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("pgm: empty manifest in " + dir);

  int h = 0, w = 0;
  std::vector<double> first = read_pgm(dir + "/" + rows.front().name, &h, &w);
  LabeledDataset out;
  out.num_classes = std::max(2, max_label + 1);
  out.images = Tensor4(max_index + 1, max_channel + 1, h, w);
  out.labels.assign(max_index + 1, 0);
  const std::size_t map = static_cast<std::size_t>(h) * w;
  for (const auto& row : rows) {
    int rh = 0, rw = 0;
    std::vector<double> pixels = read_pgm(dir + "/" + row.name, &rh, &rw);
    if (rh != h || rw != w) {
      throw IoError("pgm: inconsistent image sizes in " + dir);
    }
    auto dst = out.images.sample(row.index);
    std::copy(pixels.begin(), pixels.end(),
              dst.begin() + static_cast<std::size_t>(row.channel) * map);
    out.labels[row.index] = row.label;
  }
  return out;
}

}  // namespace dpaf
