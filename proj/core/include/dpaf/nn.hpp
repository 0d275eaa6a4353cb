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

#ifndef DPAF_NN_HPP_
#define DPAF_NN_HPP_

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpaf/mechanisms.hpp"
#include "dpaf/rng.hpp"
#include "dpaf/tensor.hpp"

namespace dpaf {

enum class Activation { kLeakyRelu, kTanh };

// How a critic-style net runs its aggregation point.
//   kWithDpAgg: normalize + sum over the batch + Gaussian noise -> one unit
//   kWithAgg:   normalize + sum, no noise -> one unit
//   kPerSample: normalization and aggregation skipped -> one unit per sample
enum class ForwardMode { kWithDpAgg, kWithAgg, kPerSample };

// Architecture knobs shared by the classifier, the discriminator and the
// generator (which mirrors the conv stack in reverse). Every conv layer is
// kernel 4 / stride 2 / pad 1, halving the spatial side; the layout
// "Cx1-Cx2-Cx3" counts layers in the three trainable blocks, with "x"
// marking an absent third block.
struct NetConfig {
  int conv1_layers = 1;
  int conv2_layers = 1;
  int conv3_layers = 0;
  std::vector<int> filters;  // one count per conv layer
  int fc_hidden = 64;        // two FC layers: hidden width, then the head
  int latent_dim = 100;
  int label_embedding_dim = 16;  // generator-side label embedding width
  int num_classes = 2;
  Activation activation = Activation::kLeakyRelu;
  int image_side = 16;  // rho
  int channels = 1;     // c

  int total_conv_layers() const {
    return conv1_layers + conv2_layers + conv3_layers;
  }
  // Shape of the tensor entering the aggregation point.
  int agg_maps() const { return filters[conv1_layers + conv2_layers - 1]; }
  int agg_side() const { return image_side >> (conv1_layers + conv2_layers); }
  int side_after(int layers) const { return image_side >> layers; }

  void validate() const;
  std::string layout_string() const;
  void set_layout(const std::string& layout);  // e.g. "C2-C1-x"
};

struct TensorShape {
  std::string name;
  std::vector<int> dims;
  std::size_t offset = 0;

  std::size_t count() const;
};

// One named block of parameters stored as a flat vector plus per-tensor
// shape metadata. Frozen groups must not be updated by any optimizer.
struct ParamGroup {
  std::string name;
  std::vector<double> values;
  std::vector<TensorShape> tensors;
  bool frozen = false;

  std::span<double> tensor(std::size_t index);
  std::span<const double> tensor(std::size_t index) const;
};

struct ModelParams {
  std::vector<ParamGroup> groups;

  bool has_group(std::string_view name) const;
  ParamGroup& group(std::string_view name);
  const ParamGroup& group(std::string_view name) const;
  std::size_t total_size() const;
};

// Gradients keyed by group name. `batch` holds the full gradient of the
// loss; `per_sample` (when requested) holds, for each pre-aggregation
// group, one gradient per sample restricted to that sample's forward path.
// Summing a group's per-sample entries reproduces its batch entry because
// the aggregation is a plain sum.
struct Gradients {
  std::map<std::string, std::vector<double>, std::less<>> batch;
  std::map<std::string, std::vector<std::vector<double>>, std::less<>>
      per_sample;
  Tensor4 input;  // d loss / d input images, when requested
};

// Mean squared error between two distribution-like vectors.
double loss_mse_fraction(std::span<const double> pred,
                         std::span<const double> target);
std::vector<double> loss_mse_fraction_grad(std::span<const double> pred,
                                           std::span<const double> target);

// Binary cross-entropy on a probability score; scores are clamped to
// [1e-7, 1 - 1e-7] before the logs.
double loss_bce(double score, double target);
double loss_bce_grad(double score, double target);

// The critic-shaped network: conv1 -> conv2 -> [SIN -> (DP)AGG] -> conv3 ->
// FC -> head. With a sigmoid head and label conditioning it is the
// discriminator; with a softmax head and no conditioning it is the
// class-fraction classifier (aggregated modes) or a plain per-sample
// classifier (kPerSample).
//
// Label conditioning embeds the class id as one extra channel map
// concatenated after the first conv layer. The embedding slot channel
// exists in the weight shapes regardless of conditioning (unconditioned
// nets feed it zeros), so conv1 transfers bit-identically between the
// classifier and the discriminator.
class AggregationNet {
 public:
  enum class Head { kSigmoid, kSoftmax };

  AggregationNet(NetConfig config, Head head, bool label_conditioned);

  const NetConfig& config() const { return config_; }
  Head head() const { return head_; }
  bool label_conditioned() const { return label_conditioned_; }
  int output_width() const;

  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Zero-mean Gaussian weights with std 0.02, zero biases.
  void init_params(RngStream& rng);
  // Re-initializes every group except the named ones.
  void init_params_except(RngStream& rng,
                          std::span<const std::string> keep_groups);

  struct Forward {
    ForwardMode mode;
    std::vector<int> labels;
    int batch = 0;
    // trunk[l] is the input to conv layer l; trunk.back() is the conv2
    // block output feeding the aggregation point.
    std::vector<Tensor4> trunk;
    Tensor4 sin_out;                  // aggregated modes only
    std::vector<double> sin_inv_std;  // n * m
    // head[t] is the input to post-aggregation conv layer t; head[0] is
    // the aggregate (aggregated modes, one unit) or the conv2 output
    // (kPerSample, one unit per sample).
    std::vector<Tensor4> head;
    std::vector<double> fc1_out;   // post-activation, units * fc_hidden
    std::vector<double> outputs;   // post-head, units * output_width

    int units() const { return mode == ForwardMode::kPerSample ? batch : 1; }
  };

  // `noise` is required in kWithDpAgg mode and must carry sensitivity
  // sqrt(m) * p for this net's aggregation shape.
  Forward forward(const Tensor4& images, std::span<const int> labels,
                  ForwardMode mode, NoiseSpec* noise = nullptr) const;

  struct BackwardOptions {
    bool per_sample = false;  // per-path gradients for conv1/conv2/embedding
    bool input_grad = false;  // d loss / d images
  };

  // dloss_doutput has units() * output_width() entries matching
  // Forward::outputs.
  Gradients backward(const Forward& fwd, std::span<const double> dloss_doutput,
                     const BackwardOptions& options = {}) const;

 private:
  struct ConvShape {
    int in_channels;
    int out_channels;
    int in_side;
    int out_side;
  };

  ConvShape conv_shape(int layer) const;
  int flat_dim() const;
  void backprop_trunk_sample(const Forward& fwd, int sample,
                             const std::vector<double>& d_agg_in,
                             const BackwardOptions& options, Gradients& grads,
                             std::vector<std::vector<double>>* scratch) const;

  NetConfig config_;
  Head head_;
  bool label_conditioned_;
  ModelParams params_;
};

// DCGAN-style generator mirroring the critic stack: label embedding joins
// the latent vector, one FC projects to the deepest conv shape, then one
// transposed conv per critic conv layer doubles the side back up to the
// image, ending in tanh.
class Generator {
 public:
  explicit Generator(NetConfig config);

  const NetConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  void init_params(RngStream& rng);

  struct Forward {
    std::vector<int> labels;
    int batch = 0;
    std::vector<double> inputs;   // per sample: latent ++ embedding row
    std::vector<double> fc_out;   // post-activation
    std::vector<Tensor4> stages;  // stages[t]: input to deconv layer t
    Tensor4 images;               // tanh output in [-1, 1]
  };

  // z has batch * latent_dim entries.
  Forward forward(std::span<const double> z, std::span<const int> labels) const;

  // Batch gradients for all generator groups given d loss / d images.
  Gradients backward(const Forward& fwd, const Tensor4& dloss_dimages) const;

 private:
  int stage_channels(int stage) const;  // channels entering deconv `stage`
  int base_side() const;                // image_side / 2^layers

  NetConfig config_;
  ModelParams params_;
};

// Per-path gradients of the selected group, one vector per sample in the
// recorded forward pass. Requesting a frozen group is an error, as is a
// gradient/mode mismatch (per-sample paths only exist for groups below the
// aggregation point).
std::vector<std::vector<double>> per_path_gradients(
    const AggregationNet& net, const AggregationNet::Forward& fwd,
    std::span<const double> dloss_doutput, std::string_view group);

}  // namespace dpaf

#endif  // DPAF_NN_HPP_
