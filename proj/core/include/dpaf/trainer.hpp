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

#ifndef DPAF_TRAINER_HPP_
#define DPAF_TRAINER_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dpaf/accountant.hpp"
#include "dpaf/data.hpp"
#include "dpaf/mechanisms.hpp"
#include "dpaf/nn.hpp"

namespace dpaf {

struct TrainSchedule {
  int batch_size = 16;       // B
  int batches_per_epoch = 0; // batches drawn per epoch
  int epochs = 1;            // E, GAN phase
  int mu = 8;                // asymmetry multiplier
  int n_critic = 3;          // critic iterations per generator iteration
  int classifier_epochs = 1; // E_c, pre-training phase

  void validate(int dataset_size) const;
};

// Knobs the underlying method leaves open: step sizes, clipping bounds,
// compression, and whether the fake-batch aggregate is noised like the
// real one (it carries no privacy cost either way; the default keeps both
// score inputs identically distributed).
struct HyperParams {
  double lr_classifier = 0.05;
  double lr_head = 0.05;       // conv3 + fc during the GAN phase
  double lr_conv2 = 0.05;
  double lr_generator = 0.05;
  double clip_conv1 = 1.0;     // u1
  double clip_conv2 = 1.0;     // u2
  double top_k_fraction = 0.9; // per-sample gradient compression
  bool noisy_fake_aggregate = true;

  void validate() const;
};

struct LedgerRecord {
  long step = 0;              // 1-based global batch counter within a phase
  std::string component;      // conv1 | conv2 | head | generator
  double loss = 0.0;
  double epsilon_so_far = 0.0;  // NaN when privacy is disabled
  std::uint64_t rng_stream = 0; // noise stream id, 0 when no noise drawn
};

struct RunLedger {
  std::vector<LedgerRecord> records;
  long conv1_updates = 0;
  long conv2_updates = 0;
  long head_updates = 0;
  long generator_updates = 0;
  long dpagg_releases = 0;
  // Values handed to the accountant.
  long t1 = 0, t2 = 0, t3 = 0;
  double gamma1 = 0.0, gamma2 = 0.0, gamma3 = 0.0;
  double final_epsilon = 0.0;
  double delta = 0.0;

  void write_jsonl(std::ostream& out) const;
};

// Live (epsilon so far) bookkeeping over the three components. A disabled
// instance records nothing and reports NaN.
class PrivacyAccounting {
 public:
  static PrivacyAccounting disabled();
  PrivacyAccounting(const PrivacySpec& planned,
                    std::span<const int> alpha_grid);

  bool enabled() const { return enabled_; }
  // component: 0 = conv1, 1 = conv2, 2 = dpagg. Returns epsilon consumed so
  // far; throws InfeasibleBudgetError if the planned target is exceeded.
  double record_release(int component);
  double current_epsilon() const;
  const PrivacySpec& spec() const { return spec_; }
  long releases(int component) const { return counts_[component]; }

 private:
  PrivacyAccounting() = default;

  bool enabled_ = false;
  PrivacySpec spec_;
  std::optional<ComposedEpsilonTable> table_;
  long counts_[3] = {0, 0, 0};
};

// Phase one: trains the class-fraction classifier with plain SGD above the
// aggregation point and DPSGD (clip clip_conv1, noise sigma_conv1 *
// clip_conv1 / B) on conv1, then returns conv1 alone; everything else is
// discarded.
ParamGroup train_classifier(const LabeledDataset& data,
                            const NetConfig& config,
                            const TrainSchedule& schedule, double sigma_conv1,
                            const HyperParams& hyper, std::uint64_t seed,
                            PrivacyAccounting& accounting, RunLedger& ledger,
                            ReleaseProbe* probe = nullptr);

// Builds the discriminator around the transferred conv1: the group is
// copied bit for bit and frozen, every other group is freshly initialized
// from the seed.
AggregationNet transfer_conv1(const ParamGroup& classifier_conv1,
                              const NetConfig& config, std::uint64_t seed);

// Phase two: asymmetric adversarial training. Per global batch i the
// conv3/fc head takes an SGD step on the noisy-aggregate scores; every
// mu-th batch conv2 takes a DPSGD step on per-path gradients over the mu
// cached batches; every n_critic-th batch the generator takes an SGD step
// on per-sample scores of fresh fakes.
void train_gan(const LabeledDataset& data, Generator& gen,
               AggregationNet& disc, const TrainSchedule& schedule,
               double sigma_conv2, double sigma_dpagg,
               const HyperParams& hyper, std::uint64_t seed,
               PrivacyAccounting& accounting, RunLedger& ledger,
               ReleaseProbe* probe = nullptr);

// Deterministic sampling from a trained generator. With `labels` empty the
// classes are balanced round-robin.
LabeledDataset generate_samples(const Generator& gen, int count,
                                std::span<const int> labels,
                                std::uint64_t seed);

// Trains a fresh small per-sample CNN (no privacy machinery) on the
// synthetic set and reports accuracy on the real test set.
double eval_downstream(const LabeledDataset& synthetic,
                       const LabeledDataset& real_test,
                       const NetConfig& eval_config, std::uint64_t seed);

NetConfig default_eval_config(int image_side, int num_classes);

}  // namespace dpaf

#endif  // DPAF_TRAINER_HPP_
