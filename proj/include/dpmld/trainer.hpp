// Copyright 2026 The dpmld Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Two-step alternating training: per mini-batch, first a momentum-SGD step
// on model parameters with the dropout rates held fixed, then a step on the
// rate logits with the parameters held fixed. Training uses the relaxed
// release (soft Gumbel-Softmax mask plus Laplace noise scaled by the
// rate-dependent budget); evaluation uses hard Bernoulli masks and real
// noise. Gradients reach the rate logits along two routes: the soft mask and
// the noise scale 1/eps'(w).

#ifndef DPMLD_TRAINER_HPP_
#define DPMLD_TRAINER_HPP_

#include <array>
#include <cstdint>
#include <vector>

#include "dpmld/data.hpp"
#include "dpmld/gumbel.hpp"
#include "dpmld/model.hpp"
#include "dpmld/privacy.hpp"

namespace dpmld::trainer {

struct TrainConfig {
  privacy::PrivacyBudget epsilon{1.0};
  bool non_private = false;  // identity release: no mask, no noise, no w-step
  double init_rate = 0.5;    // every feature's starting drop rate
  // Keep rates fixed at init_rate (no rate steps). With init_rate = mu this
  // is the uniform-rate baseline scheme under the same total budget.
  bool freeze_rates = false;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_p = 1e-2;
  double lr_w = 1e-3;
  double momentum = 0.9;
  std::size_t model_steps_per_batch = 1;
  std::size_t rate_steps_per_batch = 1;
  gumbel::GumbelConfig gumbel;
  double train_frac = 0.7;
  std::uint64_t seed = 42;
  model::ModelConfig model;
  ExecPolicy policy{1};
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_acc = 0.0, test_acc = 0.0;
  double train_loss = 0.0, test_loss = 0.0;
  double macro_f1 = 0.0;
  // Feature blocks in concat order: EEG, OM, cross-modal.
  std::array<double, 3> mean_rate{};
  std::array<double, 3> mean_scale{};  // 1/eps'(w); zeros when non-private
};

// Fixed per-batch randomness: two Gumbel draws and one unit Laplace draw per
// (sample, feature), each array laid out row-major [batch x features].
struct DrawSet {
  std::vector<double> g1, g2, t;
};

DrawSet sample_draws(std::size_t n, RandomStream& rng);

// Which gradient routes into the rate logits stay live; disabling one
// replaces that term with a constant of the same value.
struct StepRatesOptions {
  bool mask_path = true;
  bool noise_path = true;
};

struct TrainerState {
  model::ModelState model;
  privacy::DropoutRates rates;
  std::vector<double> vel_p;  // momentum buffer over the flat param store
  std::vector<double> vel_w;  // momentum buffer over the rate logits
};

TrainerState make_trainer_state(model::ModelState st);

struct StepStats {
  double loss = 0.0;
  std::size_t correct = 0;
};

// Head input scales 1/sqrt(1 + 2 b_j^2) for the current rates. Released
// features divided by their own noise standard deviation keep the head
// well conditioned at any budget; the scales are public constants derived
// from (w, eps), so applying them is post-processing and costs no privacy.
std::vector<double> feature_scales(const privacy::DropoutRates& rates,
                                   const privacy::PrivacyBudget& eps);

// Relaxed forward + backward into model parameters only; applies one
// momentum update. Throws on non-finite loss. Refreshes the model's
// head_scale from the committed rates before building the graph.
StepStats step_model(const std::vector<const data::ModalitySample*>& batch,
                     TrainerState& ts, const TrainConfig& cfg,
                     const DrawSet& draws, double tau);

// Same relaxed forward; backward into the rate logits only, then one
// momentum update and a clamp into [logit(w_min), logit(w_max)].
StepStats step_rates(const std::vector<const data::ModalitySample*>& batch,
                     TrainerState& ts, const TrainConfig& cfg,
                     const DrawSet& draws, double tau,
                     const StepRatesOptions& paths = {});

// Forward-only relaxed loss under fixed draws; the value the two step
// functions differentiate. Used by finite-difference checks.
double relaxed_loss(const std::vector<const data::ModalitySample*>& batch,
                    const model::ModelState& st,
                    const privacy::DropoutRates& rates, const TrainConfig& cfg,
                    const DrawSet& draws, double tau);

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double loss = 0.0;
  std::vector<int> predictions;
};

// Hard masks + real scaled noise per sample (identity release when
// non_private); model and rates are read-only.
EvalResult evaluate(const std::vector<data::ModalitySample>& split,
                    const model::ModelState& st,
                    const privacy::DropoutRates& rates,
                    const privacy::PrivacyBudget& eps, bool non_private,
                    RandomStream& rng, const ExecPolicy& policy);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
// Unweighted mean of per-class F1; empty precision/recall denominators
// contribute 0.
double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                int classes = 2);

struct TrainResult {
  model::ModelState model;
  privacy::DropoutRates rates;
  std::vector<EpochMetrics> metrics;
};

// Splits, initializes, and runs the two-step loop; deterministic in cfg.seed.
TrainResult train(const std::vector<data::ModalitySample>& dataset,
                  const TrainConfig& cfg);

struct AllocationReport {
  std::vector<double> w;           // per-feature drop rate
  std::vector<double> b;           // per-feature noise scale 1/eps'(w)
  std::vector<double> mean_abs_f;  // mean |normalized feature| over dataset
  std::array<double, 3> block_w{}, block_b{}, block_f{};
  std::size_t d_feat = 0;
};

AllocationReport allocation_report(
    const model::ModelState& st, const privacy::DropoutRates& rates,
    const privacy::PrivacyBudget& eps,
    const std::vector<data::ModalitySample>& dataset,
    const ExecPolicy& policy);

}  // namespace dpmld::trainer

#endif  // DPMLD_TRAINER_HPP_
