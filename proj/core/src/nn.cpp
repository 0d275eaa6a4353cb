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

#include "dpaf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dpaf/errors.hpp"

namespace dpaf {
namespace {

constexpr double kLeakySlope = 0.2;
constexpr double kInitStd = 0.02;
constexpr double kScoreClamp = 1e-7;
constexpr int kKernel = 4;  // stride 2, pad 1: exact spatial halving/doubling

double activate(double x, Activation a) {
  if (a == Activation::kLeakyRelu) return x > 0.0 ? x : kLeakySlope * x;
  return std::tanh(x);
}

// Derivative recovered from the post-activation value; both activations
// are invertible enough for that (leaky-relu preserves sign, tanh is
// monotone).
double activation_deriv(double y, Activation a) {
  if (a == Activation::kLeakyRelu) return y > 0.0 ? 1.0 : kLeakySlope;
  return 1.0 - y * y;
}

// out[oc, oy, ox] = b[oc] + sum W[oc, ic, ky, kx] * in[ic, 2oy+ky-1, 2ox+kx-1]
void conv_forward(std::span<const double> in, int in_ch, int in_side,
                  std::span<const double> w, std::span<const double> b,
                  int out_ch, std::span<double> out) {
  const int out_side = in_side / 2;
  for (int oc = 0; oc < out_ch; ++oc) {
    for (int oy = 0; oy < out_side; ++oy) {
      for (int ox = 0; ox < out_side; ++ox) {
        double acc = b[oc];
        for (int ic = 0; ic < in_ch; ++ic) {
          for (int ky = 0; ky < kKernel; ++ky) {
            const int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= in_side) continue;
            for (int kx = 0; kx < kKernel; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= in_side) continue;
              acc += w[((static_cast<std::size_t>(oc) * in_ch + ic) * kKernel +
                        ky) *
                           kKernel +
                       kx] *
                     in[(static_cast<std::size_t>(ic) * in_side + iy) *
                            in_side +
                        ix];
            }
          }
        }
        out[(static_cast<std::size_t>(oc) * out_side + oy) * out_side + ox] =
            acc;
      }
    }
  }
}

void conv_backward(std::span<const double> in, int in_ch, int in_side,
                   std::span<const double> w, int out_ch,
                   std::span<const double> dout, std::span<double> dw,
                   std::span<double> db, std::span<double> din) {
  const int out_side = in_side / 2;
  if (!din.empty()) std::fill(din.begin(), din.end(), 0.0);
  for (int oc = 0; oc < out_ch; ++oc) {
    for (int oy = 0; oy < out_side; ++oy) {
      for (int ox = 0; ox < out_side; ++ox) {
        const double g =
            dout[(static_cast<std::size_t>(oc) * out_side + oy) * out_side +
                 ox];
        if (g == 0.0) continue;
        db[oc] += g;
        for (int ic = 0; ic < in_ch; ++ic) {
          for (int ky = 0; ky < kKernel; ++ky) {
            const int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= in_side) continue;
            for (int kx = 0; kx < kKernel; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= in_side) continue;
              const std::size_t widx =
                  ((static_cast<std::size_t>(oc) * in_ch + ic) * kKernel +
                   ky) *
                      kKernel +
                  kx;
              const std::size_t iidx =
                  (static_cast<std::size_t>(ic) * in_side + iy) * in_side + ix;
              dw[widx] += g * in[iidx];
              if (!din.empty()) din[iidx] += g * w[widx];
            }
          }
        }
      }
    }
  }
}

// Transposed conv, weight layout {in_ch, out_ch, k, k}:
// out[oc, 2iy+ky-1, 2ix+kx-1] += W[ic, oc, ky, kx] * in[ic, iy, ix]
void deconv_forward(std::span<const double> in, int in_ch, int in_side,
                    std::span<const double> w, std::span<const double> b,
                    int out_ch, std::span<double> out) {
  const int out_side = 2 * in_side;
  for (int oc = 0; oc < out_ch; ++oc) {
    std::fill(out.begin() + static_cast<std::size_t>(oc) * out_side * out_side,
              out.begin() +
                  static_cast<std::size_t>(oc + 1) * out_side * out_side,
              b[oc]);
  }
  for (int ic = 0; ic < in_ch; ++ic) {
    for (int iy = 0; iy < in_side; ++iy) {
      for (int ix = 0; ix < in_side; ++ix) {
        const double x =
            in[(static_cast<std::size_t>(ic) * in_side + iy) * in_side + ix];
        if (x == 0.0) continue;
        for (int oc = 0; oc < out_ch; ++oc) {
          for (int ky = 0; ky < kKernel; ++ky) {
            const int y = 2 * iy + ky - 1;
            if (y < 0 || y >= out_side) continue;
            for (int kx = 0; kx < kKernel; ++kx) {
              const int xx = 2 * ix + kx - 1;
              if (xx < 0 || xx >= out_side) continue;
              out[(static_cast<std::size_t>(oc) * out_side + y) * out_side +
                  xx] +=
                  w[((static_cast<std::size_t>(ic) * out_ch + oc) * kKernel +
                     ky) *
                        kKernel +
                    kx] *
                  x;
            }
          }
        }
      }
    }
  }
}

void deconv_backward(std::span<const double> in, int in_ch, int in_side,
                     std::span<const double> w, int out_ch,
                     std::span<const double> dout, std::span<double> dw,
                     std::span<double> db, std::span<double> din) {
  const int out_side = 2 * in_side;
  for (int oc = 0; oc < out_ch; ++oc) {
    double acc = 0.0;
    for (int k = 0; k < out_side * out_side; ++k) {
      acc += dout[static_cast<std::size_t>(oc) * out_side * out_side + k];
    }
    db[oc] += acc;
  }
  if (!din.empty()) std::fill(din.begin(), din.end(), 0.0);
  for (int ic = 0; ic < in_ch; ++ic) {
    for (int iy = 0; iy < in_side; ++iy) {
      for (int ix = 0; ix < in_side; ++ix) {
        const std::size_t iidx =
            (static_cast<std::size_t>(ic) * in_side + iy) * in_side + ix;
        const double x = in[iidx];
        double dx = 0.0;
        for (int oc = 0; oc < out_ch; ++oc) {
          for (int ky = 0; ky < kKernel; ++ky) {
            const int y = 2 * iy + ky - 1;
            if (y < 0 || y >= out_side) continue;
            for (int kx = 0; kx < kKernel; ++kx) {
              const int xx = 2 * ix + kx - 1;
              if (xx < 0 || xx >= out_side) continue;
              const std::size_t widx =
                  ((static_cast<std::size_t>(ic) * out_ch + oc) * kKernel +
                   ky) *
                      kKernel +
                  kx;
              const double g =
                  dout[(static_cast<std::size_t>(oc) * out_side + y) *
                           out_side +
                       xx];
              dw[widx] += g * x;
              dx += g * w[widx];
            }
          }
        }
        if (!din.empty()) din[iidx] = dx;
      }
    }
  }
}

std::vector<double> zeros_like_group(const ParamGroup& g) {
  return std::vector<double>(g.values.size(), 0.0);
}

}  // namespace

void NetConfig::validate() const {
  if (conv1_layers < 1) throw ValidationError("NetConfig: conv1 needs >= 1 layer");
  if (conv2_layers < 1) throw ValidationError("NetConfig: conv2 needs >= 1 layer");
  if (conv3_layers < 0) throw ValidationError("NetConfig: negative conv3 layers");
  const int total = total_conv_layers();
  if (static_cast<int>(filters.size()) != total) {
    throw ValidationError("NetConfig: need one filter count per conv layer");
  }
  for (int f : filters) {
    if (f < 1) throw ValidationError("NetConfig: filters must be positive");
  }
  if (image_side < 2 || channels < 1) {
    throw ValidationError("NetConfig: bad input shape");
  }
  if (image_side % (1 << total) != 0 || (image_side >> total) < 1) {
    throw ValidationError(
        "NetConfig: image side must be divisible by 2^(conv layers)");
  }
  if (fc_hidden < 1 || latent_dim < 1 || label_embedding_dim < 1) {
    throw ValidationError("NetConfig: bad width");
  }
  if (num_classes < 2) throw ValidationError("NetConfig: need >= 2 classes");
}

std::string NetConfig::layout_string() const {
  char buf[48];
  if (conv3_layers > 0) {
    std::snprintf(buf, sizeof buf, "C%d-C%d-C%d", conv1_layers, conv2_layers,
                  conv3_layers);
  } else {
    std::snprintf(buf, sizeof buf, "C%d-C%d-x", conv1_layers, conv2_layers);
  }
  return buf;
}

void NetConfig::set_layout(const std::string& layout) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : layout) {
    if (ch == '-') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  if (parts.size() != 3) {
    throw ValidationError("layout: expected three dash-separated blocks");
  }
  auto parse_block = [&](const std::string& s, bool allow_absent) -> int {
    if (allow_absent && (s == "x" || s == "X")) return 0;
    if (s.size() < 2 || s[0] != 'C') {
      throw ValidationError("layout: bad block '" + s + "'");
    }
    int value = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (s[i] < '0' || s[i] > '9') {
        throw ValidationError("layout: bad block '" + s + "'");
      }
      value = value * 10 + (s[i] - '0');
    }
    return value;
  };
  conv1_layers = parse_block(parts[0], false);
  conv2_layers = parse_block(parts[1], false);
  conv3_layers = parse_block(parts[2], true);
}

std::size_t TensorShape::count() const {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

std::span<double> ParamGroup::tensor(std::size_t index) {
  const TensorShape& t = tensors.at(index);
  return {values.data() + t.offset, t.count()};
}

std::span<const double> ParamGroup::tensor(std::size_t index) const {
  const TensorShape& t = tensors.at(index);
  return {values.data() + t.offset, t.count()};
}

bool ModelParams::has_group(std::string_view name) const {
  for (const auto& g : groups) {
    if (g.name == name) return true;
  }
  return false;
}

ParamGroup& ModelParams::group(std::string_view name) {
  for (auto& g : groups) {
    if (g.name == name) return g;
  }
  throw ValidationError("ModelParams: no group named '" + std::string(name) +
                        "'");
}

const ParamGroup& ModelParams::group(std::string_view name) const {
  for (const auto& g : groups) {
    if (g.name == name) return g;
  }
  throw ValidationError("ModelParams: no group named '" + std::string(name) +
                        "'");
}

std::size_t ModelParams::total_size() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.values.size();
  return n;
}

double loss_mse_fraction(std::span<const double> pred,
                         std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw ValidationError("loss_mse_fraction: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = pred[k] - target[k];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

std::vector<double> loss_mse_fraction_grad(std::span<const double> pred,
                                           std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw ValidationError("loss_mse_fraction: length mismatch");
  }
  std::vector<double> g(pred.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    g[k] = 2.0 * (pred[k] - target[k]) / static_cast<double>(pred.size());
  }
  return g;
}

double loss_bce(double score, double target) {
  const double s = std::clamp(score, kScoreClamp, 1.0 - kScoreClamp);
  return -target * std::log(s) - (1.0 - target) * std::log(1.0 - s);
}

double loss_bce_grad(double score, double target) {
  if (score <= kScoreClamp || score >= 1.0 - kScoreClamp) return 0.0;
  return -target / score + (1.0 - target) / (1.0 - score);
}

// ---------------------------------------------------------------------------
// AggregationNet

AggregationNet::AggregationNet(NetConfig config, Head head,
                               bool label_conditioned)
    : config_(std::move(config)),
      head_(head),
      label_conditioned_(label_conditioned) {
  config_.validate();
  const int total = config_.total_conv_layers();

  auto add_conv_layers = [&](const std::string& name, int first, int count) {
    ParamGroup g;
    g.name = name;
    std::size_t offset = 0;
    for (int l = first; l < first + count; ++l) {
      const ConvShape s = conv_shape(l);
      char wname[16], bname[16];
      std::snprintf(wname, sizeof wname, "w%d", l);
      std::snprintf(bname, sizeof bname, "b%d", l);
      g.tensors.push_back(
          {wname, {s.out_channels, s.in_channels, kKernel, kKernel}, offset});
      offset += g.tensors.back().count();
      g.tensors.push_back({bname, {s.out_channels}, offset});
      offset += g.tensors.back().count();
    }
    g.values.assign(offset, 0.0);
    params_.groups.push_back(std::move(g));
  };

  add_conv_layers("conv1", 0, config_.conv1_layers);
  add_conv_layers("conv2", config_.conv1_layers, config_.conv2_layers);
  if (config_.conv3_layers > 0) {
    add_conv_layers("conv3", config_.conv1_layers + config_.conv2_layers,
                    config_.conv3_layers);
  }

  {
    ParamGroup g;
    g.name = "fc";
    const int flat = flat_dim();
    const int ow = output_width();
    std::size_t offset = 0;
    g.tensors.push_back({"w_fc1", {config_.fc_hidden, flat}, offset});
    offset += g.tensors.back().count();
    g.tensors.push_back({"b_fc1", {config_.fc_hidden}, offset});
    offset += g.tensors.back().count();
    g.tensors.push_back({"w_fc2", {ow, config_.fc_hidden}, offset});
    offset += g.tensors.back().count();
    g.tensors.push_back({"b_fc2", {ow}, offset});
    offset += g.tensors.back().count();
    g.values.assign(offset, 0.0);
    params_.groups.push_back(std::move(g));
  }

  if (label_conditioned_) {
    ParamGroup g;
    g.name = "embedding";
    const int side = config_.image_side / 2;
    g.tensors.push_back({"w_table", {config_.num_classes, side * side}, 0});
    g.values.assign(g.tensors.back().count(), 0.0);
    params_.groups.push_back(std::move(g));
  }
  (void)total;
}

int AggregationNet::output_width() const {
  return head_ == Head::kSigmoid ? 1 : config_.num_classes;
}

AggregationNet::ConvShape AggregationNet::conv_shape(int layer) const {
  ConvShape s;
  if (layer == 0) {
    s.in_channels = config_.channels;
  } else if (layer == 1) {
    // Embedding slot: one extra channel rides along after the first layer
    // whether or not this net is conditioned, so conv1 shapes line up for
    // parameter transfer.
    s.in_channels = config_.filters[0] + 1;
  } else {
    s.in_channels = config_.filters[layer - 1];
  }
  s.out_channels = config_.filters[layer];
  s.in_side = config_.side_after(layer);
  s.out_side = config_.side_after(layer + 1);
  return s;
}

int AggregationNet::flat_dim() const {
  const int total = config_.total_conv_layers();
  const int side = config_.side_after(total);
  return config_.filters[total - 1] * side * side;
}

void AggregationNet::init_params(RngStream& rng) {
  init_params_except(rng, {});
}

void AggregationNet::init_params_except(
    RngStream& rng, std::span<const std::string> keep_groups) {
  for (auto& g : params_.groups) {
    bool keep = false;
    for (const auto& name : keep_groups) keep |= g.name == name;
    if (keep) continue;
    for (std::size_t t = 0; t < g.tensors.size(); ++t) {
      auto dst = g.tensor(t);
      if (g.tensors[t].name[0] == 'b') {
        std::fill(dst.begin(), dst.end(), 0.0);
      } else {
        for (double& x : dst) x = kInitStd * rng.gaussian();
      }
    }
  }
}

AggregationNet::Forward AggregationNet::forward(const Tensor4& images,
                                                std::span<const int> labels,
                                                ForwardMode mode,
                                                NoiseSpec* noise) const {
  if (images.c != config_.channels || images.h != config_.image_side ||
      images.w != config_.image_side) {
    throw ValidationError("forward: image shape does not match the config");
  }
  if (images.n < 1) throw ValidationError("forward: empty batch");
  if (label_conditioned_) {
    if (static_cast<int>(labels.size()) != images.n) {
      throw ValidationError("forward: one label per sample required");
    }
    for (int y : labels) {
      if (y < 0 || y >= config_.num_classes) {
        throw ValidationError("forward: label out of range");
      }
    }
  }
  if (mode == ForwardMode::kWithDpAgg && noise == nullptr) {
    throw ValidationError("forward: kWithDpAgg requires a noise spec");
  }

  const int n = images.n;
  const int trunk_layers = config_.conv1_layers + config_.conv2_layers;
  Forward f;
  f.mode = mode;
  f.batch = n;
  if (label_conditioned_) f.labels.assign(labels.begin(), labels.end());

  f.trunk.reserve(trunk_layers + 1);
  f.trunk.push_back(images);
  const ParamGroup* conv_groups[2] = {&params_.group("conv1"),
                                      &params_.group("conv2")};
  for (int l = 0; l < trunk_layers; ++l) {
    const ConvShape s = conv_shape(l);
    const ParamGroup& pg =
        l < config_.conv1_layers ? *conv_groups[0] : *conv_groups[1];
    const int local = l < config_.conv1_layers ? l : l - config_.conv1_layers;
    const auto w = pg.tensor(2 * local);
    const auto b = pg.tensor(2 * local + 1);
    const int stored_ch = l == 0 ? s.out_channels + 1 : s.out_channels;
    Tensor4 out(n, stored_ch, s.out_side, s.out_side);
    const std::size_t map = static_cast<std::size_t>(s.out_side) * s.out_side;
    for (int i = 0; i < n; ++i) {
      auto dst = out.sample(i);
      conv_forward(f.trunk[l].sample(i), s.in_channels, s.in_side, w, b,
                   s.out_channels, dst.subspan(0, s.out_channels * map));
      for (std::size_t k = 0; k < s.out_channels * map; ++k) {
        dst[k] = activate(dst[k], config_.activation);
      }
      if (l == 0) {
        auto slot = dst.subspan(s.out_channels * map, map);
        if (label_conditioned_) {
          const auto table = params_.group("embedding").tensor(0);
          const std::size_t row = static_cast<std::size_t>(labels[i]) * map;
          std::copy(table.begin() + row, table.begin() + row + map,
                    slot.begin());
        } else {
          std::fill(slot.begin(), slot.end(), 0.0);
        }
      }
    }
    f.trunk.push_back(std::move(out));
  }

  if (mode == ForwardMode::kPerSample) {
    f.head.push_back(f.trunk.back());
  } else {
    f.sin_out = sin_normalize_with_stats(f.trunk.back(), &f.sin_inv_std);
    std::vector<double> agg = mode == ForwardMode::kWithDpAgg
                                  ? dp_aggregate(f.sin_out, *noise)
                                  : aggregate(f.sin_out);
    Tensor4 aggt(1, config_.agg_maps(), config_.agg_side(), config_.agg_side());
    aggt.v = std::move(agg);
    f.head.push_back(std::move(aggt));
  }

  const int units = f.units();
  for (int t = 0; t < config_.conv3_layers; ++t) {
    const int l = trunk_layers + t;
    const ConvShape s = conv_shape(l);
    const ParamGroup& pg = params_.group("conv3");
    const auto w = pg.tensor(2 * t);
    const auto b = pg.tensor(2 * t + 1);
    Tensor4 out(units, s.out_channels, s.out_side, s.out_side);
    for (int u = 0; u < units; ++u) {
      auto dst = out.sample(u);
      conv_forward(f.head[t].sample(u), s.in_channels, s.in_side, w, b,
                   s.out_channels, dst);
      for (double& x : dst) x = activate(x, config_.activation);
    }
    f.head.push_back(std::move(out));
  }

  const int flat = flat_dim();
  const int hidden = config_.fc_hidden;
  const int ow = output_width();
  const ParamGroup& fc = params_.group("fc");
  const auto w1 = fc.tensor(0);
  const auto b1 = fc.tensor(1);
  const auto w2 = fc.tensor(2);
  const auto b2 = fc.tensor(3);
  f.fc1_out.resize(static_cast<std::size_t>(units) * hidden);
  f.outputs.resize(static_cast<std::size_t>(units) * ow);
  for (int u = 0; u < units; ++u) {
    const auto in = f.head.back().sample(u);
    double* h1 = &f.fc1_out[static_cast<std::size_t>(u) * hidden];
    for (int j = 0; j < hidden; ++j) {
      double acc = b1[j];
      const double* wrow = &w1[static_cast<std::size_t>(j) * flat];
      for (int k = 0; k < flat; ++k) acc += wrow[k] * in[k];
      h1[j] = activate(acc, config_.activation);
    }
    double* out = &f.outputs[static_cast<std::size_t>(u) * ow];
    for (int o = 0; o < ow; ++o) {
      double acc = b2[o];
      const double* wrow = &w2[static_cast<std::size_t>(o) * hidden];
      for (int j = 0; j < hidden; ++j) acc += wrow[j] * h1[j];
      out[o] = acc;
    }
    if (head_ == Head::kSigmoid) {
      out[0] = 1.0 / (1.0 + std::exp(-out[0]));
    } else {
      double mx = out[0];
      for (int o = 1; o < ow; ++o) mx = std::max(mx, out[o]);
      double sum = 0.0;
      for (int o = 0; o < ow; ++o) {
        out[o] = std::exp(out[o] - mx);
        sum += out[o];
      }
      for (int o = 0; o < ow; ++o) out[o] /= sum;
    }
  }
  return f;
}

void AggregationNet::backprop_trunk_sample(
    const Forward& fwd, int sample, const std::vector<double>& d_agg_in,
    const BackwardOptions& options, Gradients& grads,
    std::vector<std::vector<double>>* scratch) const {
  const int trunk_layers = config_.conv1_layers + config_.conv2_layers;
  (*scratch)[trunk_layers] = d_agg_in;
  for (int l = trunk_layers - 1; l >= 0; --l) {
    const ConvShape s = conv_shape(l);
    const std::size_t map = static_cast<std::size_t>(s.out_side) * s.out_side;
    const bool is_conv1 = l < config_.conv1_layers;
    const std::string_view gname = is_conv1 ? "conv1" : "conv2";
    const int local = is_conv1 ? l : l - config_.conv1_layers;
    const ParamGroup& pg = params_.group(gname);
    const auto w = pg.tensor(2 * local);
    const std::size_t w_off = pg.tensors[2 * local].offset;
    const std::size_t b_off = pg.tensors[2 * local + 1].offset;

    std::vector<double>& dpost = (*scratch)[l + 1];
    const auto post = fwd.trunk[l + 1].sample(sample);

    if (l == 0 && label_conditioned_) {
      // The embedding slot channel sits above the conv output channels.
      const std::size_t slot = static_cast<std::size_t>(s.out_channels) * map;
      auto& emb = grads.batch["embedding"];
      const std::size_t row =
          static_cast<std::size_t>(fwd.labels[sample]) * map;
      for (std::size_t k = 0; k < map; ++k) emb[row + k] += dpost[slot + k];
      if (options.per_sample) {
        auto& per = grads.per_sample["embedding"][sample];
        for (std::size_t k = 0; k < map; ++k) per[row + k] += dpost[slot + k];
      }
    }
    // Activation mask over the conv output channels (the slot channel, if
    // any, is not a conv output).
    for (std::size_t k = 0; k < static_cast<std::size_t>(s.out_channels) * map;
         ++k) {
      dpost[k] *= activation_deriv(post[k], config_.activation);
    }

    std::vector<double>& din = (*scratch)[l];
    const bool want_din = l > 0 || options.input_grad;
    din.assign(want_din ? static_cast<std::size_t>(s.in_channels) *
                              s.in_side * s.in_side
                        : 0,
               0.0);
    auto& gbatch = grads.batch[std::string(gname)];
    std::span<double> dw(gbatch.data() + w_off, w.size());
    std::span<double> db(gbatch.data() + b_off, s.out_channels);
    conv_backward(fwd.trunk[l].sample(sample), s.in_channels, s.in_side, w,
                  s.out_channels,
                  std::span<const double>(dpost.data(),
                                          static_cast<std::size_t>(
                                              s.out_channels) *
                                              map),
                  dw, db, din);
    if (options.per_sample) {
      // Repeat the parameter accumulation into this sample's own slot; the
      // input gradient is already available, so only dW/db are recomputed.
      auto& per = grads.per_sample[std::string(gname)][sample];
      std::span<double> pdw(per.data() + w_off, w.size());
      std::span<double> pdb(per.data() + b_off, s.out_channels);
      conv_backward(fwd.trunk[l].sample(sample), s.in_channels, s.in_side, w,
                    s.out_channels,
                    std::span<const double>(dpost.data(),
                                            static_cast<std::size_t>(
                                                s.out_channels) *
                                                map),
                    pdw, pdb, {});
    }
  }
  if (options.input_grad) {
    const auto& din = (*scratch)[0];
    auto dst = grads.input.sample(sample);
    std::copy(din.begin(), din.end(), dst.begin());
  }
}

Gradients AggregationNet::backward(const Forward& fwd,
                                   std::span<const double> dloss_doutput,
                                   const BackwardOptions& options) const {
  const int units = fwd.units();
  const int ow = output_width();
  if (dloss_doutput.size() != static_cast<std::size_t>(units) * ow) {
    throw ValidationError("backward: loss gradient size does not match the "
                          "recorded forward pass");
  }
  const int n = fwd.batch;
  const int trunk_layers = config_.conv1_layers + config_.conv2_layers;

  Gradients grads;
  for (const auto& g : params_.groups) grads.batch[g.name] = zeros_like_group(g);
  if (options.per_sample) {
    grads.per_sample["conv1"].assign(
        n, zeros_like_group(params_.group("conv1")));
    grads.per_sample["conv2"].assign(
        n, zeros_like_group(params_.group("conv2")));
    if (label_conditioned_) {
      grads.per_sample["embedding"].assign(
          n, zeros_like_group(params_.group("embedding")));
    }
  }
  if (options.input_grad) {
    grads.input = Tensor4(n, config_.channels, config_.image_side,
                          config_.image_side);
  }

  const int flat = flat_dim();
  const int hidden = config_.fc_hidden;
  const ParamGroup& fc = params_.group("fc");
  const auto w1 = fc.tensor(0);
  const auto w2 = fc.tensor(2);
  auto& fc_grad = grads.batch["fc"];
  std::span<double> dw1(fc_grad.data() + fc.tensors[0].offset, w1.size());
  std::span<double> db1(fc_grad.data() + fc.tensors[1].offset, hidden);
  std::span<double> dw2(fc_grad.data() + fc.tensors[2].offset, w2.size());
  std::span<double> db2(fc_grad.data() + fc.tensors[3].offset, ow);

  // Head gradient flowing back to the aggregation input, one tensor slice
  // per unit.
  Tensor4 dcur(units, fwd.head.back().c, fwd.head.back().h,
               fwd.head.back().w);
  std::vector<double> dpre(ow), dh(hidden);
  for (int u = 0; u < units; ++u) {
    const double* out = &fwd.outputs[static_cast<std::size_t>(u) * ow];
    const double* dout = &dloss_doutput[static_cast<std::size_t>(u) * ow];
    if (head_ == Head::kSigmoid) {
      dpre[0] = dout[0] * out[0] * (1.0 - out[0]);
    } else {
      double dot = 0.0;
      for (int o = 0; o < ow; ++o) dot += dout[o] * out[o];
      for (int o = 0; o < ow; ++o) dpre[o] = out[o] * (dout[o] - dot);
    }
    const double* h1 = &fwd.fc1_out[static_cast<std::size_t>(u) * hidden];
    for (int j = 0; j < hidden; ++j) {
      double acc = 0.0;
      for (int o = 0; o < ow; ++o) {
        acc += w2[static_cast<std::size_t>(o) * hidden + j] * dpre[o];
        dw2[static_cast<std::size_t>(o) * hidden + j] += dpre[o] * h1[j];
      }
      dh[j] = acc * activation_deriv(h1[j], config_.activation);
    }
    for (int o = 0; o < ow; ++o) db2[o] += dpre[o];
    const auto in = fwd.head.back().sample(u);
    auto dflat = dcur.sample(u);
    std::fill(dflat.begin(), dflat.end(), 0.0);
    for (int j = 0; j < hidden; ++j) {
      const double g = dh[j];
      db1[j] += g;
      const double* wrow = &w1[static_cast<std::size_t>(j) * flat];
      double* dwrow = &dw1[static_cast<std::size_t>(j) * flat];
      for (int k = 0; k < flat; ++k) {
        dwrow[k] += g * in[k];
        dflat[k] += g * wrow[k];
      }
    }
  }

  // Post-aggregation conv layers, reversed.
  for (int t = config_.conv3_layers - 1; t >= 0; --t) {
    const int l = trunk_layers + t;
    const ConvShape s = conv_shape(l);
    const ParamGroup& pg = params_.group("conv3");
    const auto w = pg.tensor(2 * t);
    auto& gbatch = grads.batch["conv3"];
    std::span<double> dw(gbatch.data() + pg.tensors[2 * t].offset, w.size());
    std::span<double> db(gbatch.data() + pg.tensors[2 * t + 1].offset,
                         s.out_channels);
    Tensor4 dnext(units, s.in_channels, s.in_side, s.in_side);
    for (int u = 0; u < units; ++u) {
      auto dout = dcur.sample(u);
      const auto post = fwd.head[t + 1].sample(u);
      for (std::size_t k = 0; k < dout.size(); ++k) {
        dout[k] *= activation_deriv(post[k], config_.activation);
      }
      conv_backward(fwd.head[t].sample(u), s.in_channels, s.in_side, w,
                    s.out_channels, dout, dw, db, dnext.sample(u));
    }
    dcur = std::move(dnext);
  }

  // Trunk: per-sample paths through (SIN +) the sum aggregation.
  std::vector<std::vector<double>> scratch(trunk_layers + 1);
  const int m = config_.agg_maps();
  const int p = config_.agg_side();
  const std::size_t map = static_cast<std::size_t>(p) * p;
  if (fwd.mode == ForwardMode::kPerSample) {
    std::vector<double> seed(m * map);
    for (int i = 0; i < n; ++i) {
      const auto src = dcur.sample(i);
      seed.assign(src.begin(), src.end());
      backprop_trunk_sample(fwd, i, seed, options, grads, &scratch);
    }
  } else {
    const auto d_agg = dcur.sample(0);
    std::vector<double> d_sin_in(m * map);
    for (int i = 0; i < n; ++i) {
      // The aggregate is a sum, so every sample's normalized maps see the
      // same upstream gradient; only the normalization statistics are
      // sample-specific.
      const auto xhat = fwd.sin_out.sample(i);
      for (int j = 0; j < m; ++j) {
        const double inv_std =
            fwd.sin_inv_std[static_cast<std::size_t>(i) * m + j];
        const double* g = &d_agg[j * map];
        const double* xh = &xhat[j * map];
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t k = 0; k < map; ++k) {
          mean_g += g[k];
          mean_gx += g[k] * xh[k];
        }
        mean_g /= static_cast<double>(map);
        mean_gx /= static_cast<double>(map);
        double* dst = &d_sin_in[j * map];
        for (std::size_t k = 0; k < map; ++k) {
          dst[k] = inv_std * (g[k] - mean_g - xh[k] * mean_gx);
        }
      }
      backprop_trunk_sample(fwd, i, d_sin_in, options, grads, &scratch);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Generator

Generator::Generator(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  const int layers = config_.total_conv_layers();
  const int s0 = base_side();

  {
    ParamGroup g;
    g.name = "embedding";
    g.tensors.push_back(
        {"w_table", {config_.num_classes, config_.label_embedding_dim}, 0});
    g.values.assign(g.tensors.back().count(), 0.0);
    params_.groups.push_back(std::move(g));
  }
  {
    ParamGroup g;
    g.name = "fc";
    const int in_dim = config_.latent_dim + config_.label_embedding_dim;
    const int proj = stage_channels(0) * s0 * s0;
    std::size_t offset = 0;
    g.tensors.push_back({"w_proj", {proj, in_dim}, offset});
    offset += g.tensors.back().count();
    g.tensors.push_back({"b_proj", {proj}, offset});
    offset += g.tensors.back().count();
    g.values.assign(offset, 0.0);
    params_.groups.push_back(std::move(g));
  }
  {
    ParamGroup g;
    g.name = "deconv";
    std::size_t offset = 0;
    for (int t = 0; t < layers; ++t) {
      const int in_ch = stage_channels(t);
      const int out_ch = stage_channels(t + 1);
      char wname[16], bname[16];
      std::snprintf(wname, sizeof wname, "w%d", t);
      std::snprintf(bname, sizeof bname, "b%d", t);
      g.tensors.push_back({wname, {in_ch, out_ch, kKernel, kKernel}, offset});
      offset += g.tensors.back().count();
      g.tensors.push_back({bname, {out_ch}, offset});
      offset += g.tensors.back().count();
    }
    g.values.assign(offset, 0.0);
    params_.groups.push_back(std::move(g));
  }
}

int Generator::stage_channels(int stage) const {
  const int layers = config_.total_conv_layers();
  if (stage >= layers) return config_.channels;
  return config_.filters[layers - 1 - stage];
}

int Generator::base_side() const {
  return config_.image_side >> config_.total_conv_layers();
}

void Generator::init_params(RngStream& rng) {
  for (auto& g : params_.groups) {
    for (std::size_t t = 0; t < g.tensors.size(); ++t) {
      auto dst = g.tensor(t);
      if (g.tensors[t].name[0] == 'b') {
        std::fill(dst.begin(), dst.end(), 0.0);
      } else {
        for (double& x : dst) x = kInitStd * rng.gaussian();
      }
    }
  }
}

Generator::Forward Generator::forward(std::span<const double> z,
                                      std::span<const int> labels) const {
  const int latent = config_.latent_dim;
  const int emb_dim = config_.label_embedding_dim;
  if (z.size() % latent != 0) {
    throw ValidationError("generator: latent size mismatch");
  }
  const int n = static_cast<int>(z.size() / latent);
  if (n < 1 || static_cast<int>(labels.size()) != n) {
    throw ValidationError("generator: one label per latent vector required");
  }
  for (int y : labels) {
    if (y < 0 || y >= config_.num_classes) {
      throw ValidationError("generator: label out of range");
    }
  }

  const int layers = config_.total_conv_layers();
  const int s0 = base_side();
  const int in_dim = latent + emb_dim;
  const int proj = stage_channels(0) * s0 * s0;

  Forward f;
  f.batch = n;
  f.labels.assign(labels.begin(), labels.end());
  f.inputs.resize(static_cast<std::size_t>(n) * in_dim);
  const auto table = params_.group("embedding").tensor(0);
  for (int i = 0; i < n; ++i) {
    double* dst = &f.inputs[static_cast<std::size_t>(i) * in_dim];
    std::copy(z.begin() + static_cast<std::size_t>(i) * latent,
              z.begin() + static_cast<std::size_t>(i + 1) * latent, dst);
    const std::size_t row = static_cast<std::size_t>(labels[i]) * emb_dim;
    std::copy(table.begin() + row, table.begin() + row + emb_dim,
              dst + latent);
  }

  const ParamGroup& fc = params_.group("fc");
  const auto w = fc.tensor(0);
  const auto b = fc.tensor(1);
  f.fc_out.resize(static_cast<std::size_t>(n) * proj);
  Tensor4 stage(n, stage_channels(0), s0, s0);
  for (int i = 0; i < n; ++i) {
    const double* in = &f.inputs[static_cast<std::size_t>(i) * in_dim];
    double* out = &f.fc_out[static_cast<std::size_t>(i) * proj];
    for (int j = 0; j < proj; ++j) {
      double acc = b[j];
      const double* wrow = &w[static_cast<std::size_t>(j) * in_dim];
      for (int k = 0; k < in_dim; ++k) acc += wrow[k] * in[k];
      out[j] = activate(acc, config_.activation);
    }
    std::copy(out, out + proj, stage.sample(i).begin());
  }
  f.stages.push_back(std::move(stage));

  const ParamGroup& dg = params_.group("deconv");
  for (int t = 0; t < layers; ++t) {
    const int in_ch = stage_channels(t);
    const int out_ch = stage_channels(t + 1);
    const int in_side = s0 << t;
    Tensor4 out(n, out_ch, in_side * 2, in_side * 2);
    const auto wt = dg.tensor(2 * t);
    const auto bt = dg.tensor(2 * t + 1);
    for (int i = 0; i < n; ++i) {
      auto dst = out.sample(i);
      deconv_forward(f.stages[t].sample(i), in_ch, in_side, wt, bt, out_ch,
                     dst);
      if (t + 1 < layers) {
        for (double& x : dst) x = activate(x, config_.activation);
      } else {
        for (double& x : dst) x = std::tanh(x);
      }
    }
    if (t + 1 < layers) {
      f.stages.push_back(std::move(out));
    } else {
      f.images = std::move(out);
    }
  }
  return f;
}

Gradients Generator::backward(const Forward& fwd,
                              const Tensor4& dloss_dimages) const {
  const int n = fwd.batch;
  if (dloss_dimages.n != n || dloss_dimages.c != config_.channels ||
      dloss_dimages.h != config_.image_side) {
    throw ValidationError("generator backward: image gradient shape mismatch");
  }
  const int layers = config_.total_conv_layers();
  const int s0 = base_side();
  const int latent = config_.latent_dim;
  const int emb_dim = config_.label_embedding_dim;
  const int in_dim = latent + emb_dim;
  const int proj = stage_channels(0) * s0 * s0;

  Gradients grads;
  for (const auto& g : params_.groups) grads.batch[g.name] = zeros_like_group(g);

  const ParamGroup& dg = params_.group("deconv");
  const ParamGroup& fc = params_.group("fc");
  const auto w_fc = fc.tensor(0);
  auto& fc_grad = grads.batch["fc"];
  std::span<double> dw_fc(fc_grad.data() + fc.tensors[0].offset, w_fc.size());
  std::span<double> db_fc(fc_grad.data() + fc.tensors[1].offset, proj);
  auto& deconv_grad = grads.batch["deconv"];
  auto& emb_grad = grads.batch["embedding"];

  std::vector<double> dcur, dnext;
  for (int i = 0; i < n; ++i) {
    const auto img = fwd.images.sample(i);
    const auto dimg = dloss_dimages.sample(i);
    dcur.resize(img.size());
    for (std::size_t k = 0; k < img.size(); ++k) {
      dcur[k] = dimg[k] * (1.0 - img[k] * img[k]);
    }
    for (int t = layers - 1; t >= 0; --t) {
      const int in_ch = stage_channels(t);
      const int out_ch = stage_channels(t + 1);
      const int in_side = s0 << t;
      const auto wt = dg.tensor(2 * t);
      std::span<double> dwt(deconv_grad.data() + dg.tensors[2 * t].offset,
                            wt.size());
      std::span<double> dbt(deconv_grad.data() + dg.tensors[2 * t + 1].offset,
                            out_ch);
      dnext.assign(static_cast<std::size_t>(in_ch) * in_side * in_side, 0.0);
      deconv_backward(fwd.stages[t].sample(i), in_ch, in_side, wt, out_ch,
                      dcur, dwt, dbt, dnext);
      if (t > 0) {
        const auto post = fwd.stages[t].sample(i);
        for (std::size_t k = 0; k < dnext.size(); ++k) {
          dnext[k] *= activation_deriv(post[k], config_.activation);
        }
      }
      std::swap(dcur, dnext);
    }
    // dcur is now the gradient at the projection output (stage 0), whose
    // post-activation values also live in fc_out.
    const double* h = &fwd.fc_out[static_cast<std::size_t>(i) * proj];
    const double* in = &fwd.inputs[static_cast<std::size_t>(i) * in_dim];
    const std::size_t row =
        static_cast<std::size_t>(fwd.labels[i]) * emb_dim;
    std::vector<double> demb(emb_dim, 0.0);
    for (int j = 0; j < proj; ++j) {
      const double g = dcur[j] * activation_deriv(h[j], config_.activation);
      db_fc[j] += g;
      const double* wrow = &w_fc[static_cast<std::size_t>(j) * in_dim];
      double* dwrow = &dw_fc[static_cast<std::size_t>(j) * in_dim];
      for (int k = 0; k < in_dim; ++k) dwrow[k] += g * in[k];
      for (int k = 0; k < emb_dim; ++k) demb[k] += g * wrow[latent + k];
    }
    for (int k = 0; k < emb_dim; ++k) emb_grad[row + k] += demb[k];
  }
  return grads;
}

std::vector<std::vector<double>> per_path_gradients(
    const AggregationNet& net, const AggregationNet::Forward& fwd,
    std::span<const double> dloss_doutput, std::string_view group) {
  const ParamGroup& g = net.params().group(group);
  if (g.frozen) {
    throw ValidationError("per_path_gradients: group '" + std::string(group) +
                          "' is frozen");
  }
  if (group != "conv1" && group != "conv2" && group != "embedding") {
    throw ValidationError(
        "per_path_gradients: group '" + std::string(group) +
        "' sits above the aggregation point and has no per-sample paths");
  }
  AggregationNet::BackwardOptions options;
  options.per_sample = true;
  Gradients grads = net.backward(fwd, dloss_doutput, options);
  return std::move(grads.per_sample.find(group)->second);
}

}  // namespace dpaf
