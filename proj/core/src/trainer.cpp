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

#include "dpaf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <ostream>

#include "dpaf/errors.hpp"

namespace dpaf {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void sgd_step(ParamGroup& group, const std::vector<double>& grad, double lr) {
  if (group.frozen) {
    throw ValidationError("sgd_step: group '" + group.name + "' is frozen");
  }
  if (grad.size() != group.values.size()) {
    throw ValidationError("sgd_step: gradient size mismatch");
  }
  for (std::size_t k = 0; k < grad.size(); ++k) {
    group.values[k] -= lr * grad[k];
  }
}

std::vector<double> class_fractions(const std::vector<int>& labels, int k) {
  std::vector<double> f(k, 0.0);
  for (int y : labels) f[y] += 1.0;
  for (double& x : f) x /= static_cast<double>(labels.size());
  return f;
}

// Concatenates cached batches along the sample axis.
void concat_batches(const std::deque<Tensor4>& images,
                    const std::deque<std::vector<int>>& labels, Tensor4& out,
                    std::vector<int>& out_labels) {
  int total = 0;
  for (const auto& t : images) total += t.n;
  out = Tensor4(total, images.front().c, images.front().h, images.front().w);
  out_labels.clear();
  out_labels.reserve(total);
  int at = 0;
  for (std::size_t b = 0; b < images.size(); ++b) {
    for (int i = 0; i < images[b].n; ++i) {
      const auto src = images[b].sample(i);
      std::copy(src.begin(), src.end(), out.sample(at).begin());
      ++at;
    }
    out_labels.insert(out_labels.end(), labels[b].begin(), labels[b].end());
  }
}

}  // namespace

void TrainSchedule::validate(int dataset_size) const {
  if (batch_size < 1) throw ValidationError("schedule: batch_size >= 1");
  if (batches_per_epoch < 1) {
    throw ValidationError("schedule: batches_per_epoch >= 1");
  }
  if (epochs < 0 || classifier_epochs < 0) {
    throw ValidationError("schedule: negative epoch count");
  }
  if (mu < 1) throw ValidationError("schedule: mu >= 1");
  if (n_critic < 1) throw ValidationError("schedule: n_critic >= 1");
  if (static_cast<long>(batch_size) * batches_per_epoch > dataset_size) {
    throw ValidationError(
        "schedule: an epoch draws more samples than the dataset holds");
  }
}

void HyperParams::validate() const {
  if (!(lr_classifier > 0.0) || !(lr_head > 0.0) || !(lr_conv2 > 0.0) ||
      !(lr_generator > 0.0)) {
    throw ValidationError("hyper: learning rates must be positive");
  }
  if (!(clip_conv1 > 0.0) || !(clip_conv2 > 0.0)) {
    throw ValidationError("hyper: clip thresholds must be positive");
  }
  if (!(top_k_fraction > 0.0) || top_k_fraction > 1.0) {
    throw ValidationError("hyper: top_k_fraction must be in (0, 1]");
  }
}

void RunLedger::write_jsonl(std::ostream& out) const {
  for (const auto& r : records) {
    out << "{\"step\":" << r.step << ",\"component\":\"" << r.component
        << "\",\"loss\":" << fmt_double(r.loss) << ",\"epsilon\":";
    if (std::isnan(r.epsilon_so_far)) {
      out << "null";
    } else {
      out << fmt_double(r.epsilon_so_far);
    }
    out << ",\"rng_stream\":" << r.rng_stream << "}\n";
  }
}

PrivacyAccounting PrivacyAccounting::disabled() { return {}; }

PrivacyAccounting::PrivacyAccounting(const PrivacySpec& planned,
                                     std::span<const int> alpha_grid)
    : enabled_(true), spec_(planned) {
  table_.emplace(planned, alpha_grid);
}

double PrivacyAccounting::record_release(int component) {
  if (!enabled_) return kNan;
  if (component < 0 || component > 2) {
    throw ValidationError("record_release: bad component");
  }
  ++counts_[component];
  const double eps = current_epsilon();
  if (eps > spec_.epsilon_total * (1.0 + 1e-9)) {
    throw InfeasibleBudgetError(
        "privacy budget exhausted: spent " + fmt_double(eps) + " of " +
        fmt_double(spec_.epsilon_total) + " after a " +
        (component == 0 ? "conv1" : component == 1 ? "conv2" : "dpagg") +
        " release");
  }
  return eps;
}

double PrivacyAccounting::current_epsilon() const {
  if (!enabled_) return kNan;
  return table_->total(counts_[0], counts_[1], counts_[2]).epsilon;
}

ParamGroup train_classifier(const LabeledDataset& data,
                            const NetConfig& config,
                            const TrainSchedule& schedule, double sigma_conv1,
                            const HyperParams& hyper, std::uint64_t seed,
                            PrivacyAccounting& accounting, RunLedger& ledger,
                            ReleaseProbe* probe) {
  data.validate();
  schedule.validate(data.size());
  hyper.validate();
  NetConfig cfg = config;
  cfg.num_classes = data.num_classes;
  AggregationNet net(cfg, AggregationNet::Head::kSoftmax,
                     /*label_conditioned=*/false);
  RngStream init_rng(seed, "classifier/init");
  net.init_params(init_rng);
  const std::uint64_t data_seed = derive_stream_id(seed, "classifier/data");

  const ClipSpec clip{hyper.clip_conv1};
  Tensor4 images;
  std::vector<int> labels;
  long step = 0;
  for (int epoch = 0; epoch < schedule.classifier_epochs; ++epoch) {
    const auto batches = subsample_batches(
        data, schedule.batch_size, schedule.batches_per_epoch, data_seed,
        static_cast<std::uint64_t>(epoch));
    for (int b = 0; b < schedule.batches_per_epoch; ++b) {
      ++step;
      gather_batch(data, batches[b], images, labels);
      const auto target = class_fractions(labels, data.num_classes);
      const auto fwd = net.forward(images, {}, ForwardMode::kWithAgg);
      const double loss = loss_mse_fraction(fwd.outputs, target);
      const auto dout = loss_mse_fraction_grad(fwd.outputs, target);
      AggregationNet::BackwardOptions options;
      options.per_sample = true;
      auto grads = net.backward(fwd, dout, options);

      sgd_step(net.params().group("conv2"), grads.batch["conv2"],
               hyper.lr_classifier);
      if (net.params().has_group("conv3")) {
        sgd_step(net.params().group("conv3"), grads.batch["conv3"],
                 hyper.lr_classifier);
      }
      sgd_step(net.params().group("fc"), grads.batch["fc"],
               hyper.lr_classifier);

      RngStream noise_rng(seed, "noise/conv1", static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(b));
      NoiseSource source{&noise_rng, probe, "conv1"};
      dpsgd_step(grads.per_sample["conv1"], clip, sigma_conv1,
                 hyper.lr_classifier, net.params().group("conv1").values,
                 &source, hyper.top_k_fraction);
      double eps = kNan;
      std::uint64_t stream_id = 0;
      if (sigma_conv1 > 0.0) {
        eps = accounting.record_release(0);
        stream_id = noise_rng.id();
      }
      ++ledger.conv1_updates;
      ++ledger.t1;
      ledger.records.push_back({step, "conv1", loss, eps, stream_id});
    }
  }
  ledger.gamma1 =
      static_cast<double>(schedule.batch_size) / static_cast<double>(data.size());
  return net.params().group("conv1");
}

AggregationNet transfer_conv1(const ParamGroup& classifier_conv1,
                              const NetConfig& config, std::uint64_t seed) {
  AggregationNet disc(config, AggregationNet::Head::kSigmoid,
                      /*label_conditioned=*/true);
  ParamGroup& conv1 = disc.params().group("conv1");
  if (conv1.values.size() != classifier_conv1.values.size() ||
      conv1.tensors.size() != classifier_conv1.tensors.size()) {
    throw ValidationError(
        "transfer_conv1: classifier and discriminator conv1 layouts differ");
  }
  RngStream init_rng(seed, "discriminator/init");
  const std::string keep[] = {"conv1"};
  disc.init_params_except(init_rng, keep);
  conv1.values = classifier_conv1.values;
  conv1.frozen = true;
  return disc;
}

void train_gan(const LabeledDataset& data, Generator& gen,
               AggregationNet& disc, const TrainSchedule& schedule,
               double sigma_conv2, double sigma_dpagg,
               const HyperParams& hyper, std::uint64_t seed,
               PrivacyAccounting& accounting, RunLedger& ledger,
               ReleaseProbe* probe) {
  data.validate();
  schedule.validate(data.size());
  hyper.validate();
  if (!disc.params().group("conv1").frozen) {
    throw ValidationError("train_gan: conv1 must be frozen (transfer first)");
  }
  const NetConfig& cfg = disc.config();
  if (data.num_classes != cfg.num_classes) {
    throw ValidationError("train_gan: dataset/config class count mismatch");
  }
  const int batch = schedule.batch_size;
  const int latent = cfg.latent_dim;
  const double delta_agg = agg_sensitivity(cfg.agg_maps(), cfg.agg_side());
  const ClipSpec clip2{hyper.clip_conv2};
  const std::uint64_t gan_seed = derive_stream_id(seed, "gan/data");

  std::deque<Tensor4> window_real, window_fake;
  std::deque<std::vector<int>> window_real_labels, window_fake_labels;

  Tensor4 real_images;
  std::vector<int> real_labels;
  std::vector<double> z(static_cast<std::size_t>(batch) * latent);
  std::vector<int> fake_labels(batch);

  long i = 0;  // global 1-based batch counter across epochs
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto batches =
        subsample_batches(data, batch, schedule.batches_per_epoch, gan_seed,
                          static_cast<std::uint64_t>(epoch));
    for (int b = 0; b < schedule.batches_per_epoch; ++b) {
      ++i;
      const auto e64 = static_cast<std::uint64_t>(epoch);
      const auto b64 = static_cast<std::uint64_t>(b);
      gather_batch(data, batches[b], real_images, real_labels);

      // Fake batch for the head loss.
      RngStream z_rng(seed, "latent/d", e64, b64);
      for (double& x : z) x = z_rng.gaussian();
      RngStream label_rng(seed, "labels/d", e64, b64);
      for (int& y : fake_labels) y = label_rng.uniform_int(cfg.num_classes);
      auto gen_fwd = gen.forward(z, fake_labels);

      // Score the real and fake aggregates. The real aggregate always
      // carries the calibrated noise; the fake aggregate is non-sensitive
      // and follows the symmetry flag.
      RngStream real_noise_rng(seed, "noise/dpagg", e64, b64);
      NoiseSpec real_noise{sigma_dpagg, delta_agg,
                           {&real_noise_rng, probe, "dpagg"}};
      const bool real_noisy = sigma_dpagg > 0.0;
      const auto real_fwd = disc.forward(
          real_images, real_labels,
          real_noisy ? ForwardMode::kWithDpAgg : ForwardMode::kWithAgg,
          real_noisy ? &real_noise : nullptr);
      double eps = kNan;
      if (real_noisy) {
        eps = accounting.record_release(2);
        ++ledger.dpagg_releases;
        ++ledger.t3;
      }
      RngStream fake_noise_rng(seed, "noise/dpagg_fake", e64, b64);
      NoiseSpec fake_noise{sigma_dpagg, delta_agg,
                           {&fake_noise_rng, probe, "dpagg_fake"}};
      const bool fake_noisy = real_noisy && hyper.noisy_fake_aggregate;
      const auto fake_fwd = disc.forward(
          gen_fwd.images, fake_labels,
          fake_noisy ? ForwardMode::kWithDpAgg : ForwardMode::kWithAgg,
          fake_noisy ? &fake_noise : nullptr);
      const double score_real = real_fwd.outputs[0];
      const double score_fake = fake_fwd.outputs[0];
      const double head_loss =
          loss_bce(score_real, 1.0) + loss_bce(score_fake, 0.0);

      // Cache the batch for the asymmetric conv2 update.
      window_real.push_back(real_images);
      window_real_labels.push_back(real_labels);
      window_fake.push_back(gen_fwd.images);
      window_fake_labels.push_back(fake_labels);
      if (static_cast<int>(window_real.size()) > schedule.mu) {
        window_real.pop_front();
        window_real_labels.pop_front();
        window_fake.pop_front();
        window_fake_labels.pop_front();
      }

      // All gradients below come from pre-update parameters; the updates
      // land afterwards in the head -> conv2 -> generator order.
      const bool conv2_turn = i % schedule.mu == 0;
      std::vector<std::vector<double>> conv2_per_sample;
      double window_loss = 0.0;
      if (conv2_turn) {
        Tensor4 window_images;
        std::vector<int> window_labels;
        concat_batches(window_real, window_real_labels, window_images,
                       window_labels);
        const auto rfwd =
            disc.forward(window_images, window_labels, ForwardMode::kWithAgg);
        concat_batches(window_fake, window_fake_labels, window_images,
                       window_labels);
        const auto ffwd =
            disc.forward(window_images, window_labels, ForwardMode::kWithAgg);
        window_loss = loss_bce(rfwd.outputs[0], 1.0) +
                      loss_bce(ffwd.outputs[0], 0.0);
        // Only real samples have per-path gradients to privatize; the fake
        // term of the loss does not reach them.
        const double dscore[1] = {loss_bce_grad(rfwd.outputs[0], 1.0)};
        AggregationNet::BackwardOptions options;
        options.per_sample = true;
        auto grads = disc.backward(rfwd, dscore, options);
        conv2_per_sample = std::move(grads.per_sample["conv2"]);
      }

      const double dreal[1] = {loss_bce_grad(score_real, 1.0)};
      const double dfake[1] = {loss_bce_grad(score_fake, 0.0)};
      AggregationNet::BackwardOptions head_only;
      head_only.head_only = true;
      auto grads_real = disc.backward(real_fwd, dreal, head_only);
      auto grads_fake = disc.backward(fake_fwd, dfake, head_only);
      auto add_into = [](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
      };
      add_into(grads_real.batch["fc"], grads_fake.batch["fc"]);
      sgd_step(disc.params().group("fc"), grads_real.batch["fc"],
               hyper.lr_head);
      if (disc.params().has_group("conv3")) {
        add_into(grads_real.batch["conv3"], grads_fake.batch["conv3"]);
        sgd_step(disc.params().group("conv3"), grads_real.batch["conv3"],
                 hyper.lr_head);
      }
      ++ledger.head_updates;
      ledger.records.push_back(
          {i, "head", head_loss, eps,
           real_noisy ? real_noise_rng.id() : 0});

      if (conv2_turn) {
        RngStream conv2_rng(seed, "noise/conv2", e64, b64);
        NoiseSource source{&conv2_rng, probe, "conv2"};
        dpsgd_step(conv2_per_sample, clip2, sigma_conv2, hyper.lr_conv2,
                   disc.params().group("conv2").values, &source,
                   hyper.top_k_fraction);
        double conv2_eps = kNan;
        std::uint64_t stream_id = 0;
        if (sigma_conv2 > 0.0) {
          conv2_eps = accounting.record_release(1);
          stream_id = conv2_rng.id();
        }
        ++ledger.conv2_updates;
        ++ledger.t2;
        ledger.records.push_back({i, "conv2", window_loss, conv2_eps,
                                  stream_id});
      }

      if (i % schedule.n_critic == 0) {
        RngStream gz_rng(seed, "latent/g", e64, b64);
        for (double& x : z) x = gz_rng.gaussian();
        RngStream glabel_rng(seed, "labels/g", e64, b64);
        for (int& y : fake_labels) y = glabel_rng.uniform_int(cfg.num_classes);
        const auto gen_fwd2 = gen.forward(z, fake_labels);
        const auto disc_fwd =
            disc.forward(gen_fwd2.images, fake_labels, ForwardMode::kPerSample);
        double gen_loss = 0.0;
        std::vector<double> dscores(batch);
        for (int s = 0; s < batch; ++s) {
          gen_loss += loss_bce(disc_fwd.outputs[s], 1.0);
          dscores[s] = loss_bce_grad(disc_fwd.outputs[s], 1.0) /
                       static_cast<double>(batch);
        }
        gen_loss /= static_cast<double>(batch);
        AggregationNet::BackwardOptions options;
        options.input_grad = true;
        auto dgrads = disc.backward(disc_fwd, dscores, options);
        auto ggrads = gen.backward(gen_fwd2, dgrads.input);
        sgd_step(gen.params().group("embedding"), ggrads.batch["embedding"],
                 hyper.lr_generator);
        sgd_step(gen.params().group("fc"), ggrads.batch["fc"],
                 hyper.lr_generator);
        sgd_step(gen.params().group("deconv"), ggrads.batch["deconv"],
                 hyper.lr_generator);
        ++ledger.generator_updates;
        ledger.records.push_back(
            {i, "generator", gen_loss, accounting.current_epsilon(),
             gz_rng.id()});
      }
    }
  }
  ledger.gamma2 = static_cast<double>(schedule.mu) * batch /
                  static_cast<double>(data.size());
  ledger.gamma3 = static_cast<double>(batch) / static_cast<double>(data.size());
  ledger.final_epsilon = accounting.current_epsilon();
  if (accounting.enabled()) ledger.delta = accounting.spec().delta;
}

LabeledDataset generate_samples(const Generator& gen, int count,
                                std::span<const int> labels,
                                std::uint64_t seed) {
  if (count < 1) throw ValidationError("generate_samples: count >= 1");
  const NetConfig& cfg = gen.config();
  std::vector<int> all_labels;
  if (labels.empty()) {
    all_labels.resize(count);
    for (int i = 0; i < count; ++i) all_labels[i] = i % cfg.num_classes;
  } else {
    if (static_cast<int>(labels.size()) != count) {
      throw ValidationError("generate_samples: label list length mismatch");
    }
    all_labels.assign(labels.begin(), labels.end());
  }
  LabeledDataset out;
  out.num_classes = cfg.num_classes;
  out.labels = all_labels;
  out.images = Tensor4(count, cfg.channels, cfg.image_side, cfg.image_side);
  RngStream z_rng(seed, "generate/z");
  constexpr int kChunk = 64;
  std::vector<double> z;
  for (int at = 0; at < count; at += kChunk) {
    const int n = std::min(kChunk, count - at);
    z.resize(static_cast<std::size_t>(n) * cfg.latent_dim);
    for (double& x : z) x = z_rng.gaussian();
    const std::vector<int> chunk_labels(all_labels.begin() + at,
                                        all_labels.begin() + at + n);
    const auto fwd = gen.forward(z, chunk_labels);
    for (int s = 0; s < n; ++s) {
      const auto src = fwd.images.sample(s);
      std::copy(src.begin(), src.end(), out.images.sample(at + s).begin());
    }
  }
  return out;
}

NetConfig default_eval_config(int image_side, int num_classes) {
  NetConfig cfg;
  cfg.conv1_layers = 1;
  cfg.conv2_layers = 1;
  cfg.conv3_layers = 0;
  cfg.filters = {8, 16};
  cfg.fc_hidden = 32;
  cfg.num_classes = num_classes;
  cfg.image_side = image_side;
  cfg.channels = 1;
  return cfg;
}

double eval_downstream(const LabeledDataset& synthetic,
                       const LabeledDataset& real_test,
                       const NetConfig& eval_config, std::uint64_t seed) {
  synthetic.validate();
  real_test.validate();
  if (synthetic.images.h != real_test.images.h ||
      synthetic.images.c != real_test.images.c) {
    throw ValidationError("eval_downstream: train/test shape mismatch");
  }
  NetConfig cfg = eval_config;
  cfg.num_classes = std::max(synthetic.num_classes, real_test.num_classes);
  AggregationNet net(cfg, AggregationNet::Head::kSoftmax,
                     /*label_conditioned=*/false);
  RngStream init_rng(seed, "eval/init");
  net.init_params(init_rng);

  constexpr int kEpochs = 12;
  constexpr int kBatch = 32;
  constexpr double kLr = 0.5;
  const int k = cfg.num_classes;
  const int n = synthetic.size();
  std::vector<int> order(n);
  Tensor4 images;
  std::vector<int> labels;
  std::vector<double> target(k), dout;
  for (int epoch = 0; epoch < kEpochs; ++epoch) {
    for (int i = 0; i < n; ++i) order[i] = i;
    RngStream shuffle_rng(seed, "eval/shuffle", static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
    }
    for (int at = 0; at < n; at += kBatch) {
      const int bsize = std::min(kBatch, n - at);
      const std::vector<int> idx(order.begin() + at,
                                 order.begin() + at + bsize);
      gather_batch(synthetic, idx, images, labels);
      const auto fwd = net.forward(images, {}, ForwardMode::kPerSample);
      dout.assign(static_cast<std::size_t>(bsize) * k, 0.0);
      for (int s = 0; s < bsize; ++s) {
        std::fill(target.begin(), target.end(), 0.0);
        target[labels[s]] = 1.0;
        const std::span<const double> pred(&fwd.outputs[s * k], k);
        const auto g = loss_mse_fraction_grad(pred, target);
        for (int j = 0; j < k; ++j) {
          dout[static_cast<std::size_t>(s) * k + j] =
              g[j] / static_cast<double>(bsize);
        }
      }
      auto grads = net.backward(fwd, dout);
      sgd_step(net.params().group("conv1"), grads.batch["conv1"], kLr);
      sgd_step(net.params().group("conv2"), grads.batch["conv2"], kLr);
      sgd_step(net.params().group("fc"), grads.batch["fc"], kLr);
      if (at + bsize >= n) break;
    }
  }

  long correct = 0;
  constexpr int kTestChunk = 256;
  for (int at = 0; at < real_test.size(); at += kTestChunk) {
    const int bsize = std::min(kTestChunk, real_test.size() - at);
    std::vector<int> idx(bsize);
    for (int s = 0; s < bsize; ++s) idx[s] = at + s;
    gather_batch(real_test, idx, images, labels);
    const auto fwd = net.forward(images, {}, ForwardMode::kPerSample);
    for (int s = 0; s < bsize; ++s) {
      int best = 0;
      for (int j = 1; j < k; ++j) {
        if (fwd.outputs[static_cast<std::size_t>(s) * k + j] >
            fwd.outputs[static_cast<std::size_t>(s) * k + best]) {
          best = j;
        }
      }
      if (best == labels[s]) ++correct;
    }
  }
  return static_cast<double>(correct) / real_test.size();
}

}  // namespace dpaf
