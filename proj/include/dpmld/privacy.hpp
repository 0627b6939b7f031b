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

// Budget algebra, Laplace mechanism, Bernoulli masking, and the element-wise
// Laplacian-dropout release.
//
// The mechanism releases a [0,1]-normalized feature vector f as
//     M(f) = f .* m + r,     m_i ~ Bernoulli(1 - w_i),  r_i ~ Lap(0, b_i),
// where the per-feature noise scales b_i = 1/eps_i' are calibrated from the
// drop rates w and a total per-release budget eps through
//     eps_i' = log((exp(eps) - w_i) / (1 - w_i)),
// which is exactly the split that makes the combined mask+noise release
// eps-differentially-private for vectors in [0,1]^k differing in one
// coordinate (per-coordinate sensitivity 1 after min-max normalization).

#ifndef DPMLD_PRIVACY_HPP_
#define DPMLD_PRIVACY_HPP_

#include <array>
#include <cstdint>
#include <vector>

#include "dpmld/random.hpp"

namespace dpmld::privacy {

// Total per-release privacy budget. Construction rejects eps <= 0.
class PrivacyBudget {
 public:
  explicit PrivacyBudget(double epsilon);
  double epsilon() const { return epsilon_; }

 private:
  double epsilon_;
};

// Per-feature drop probabilities with a trainable logit parameterization.
// rates() clamps sigmoid(logit) into [w_min, w_max] so the budget formula
// stays finite at both ends.
struct DropoutRates {
  std::vector<double> logits;
  double w_min = 1e-4;
  double w_max = 1.0 - 1e-4;

  static DropoutRates from_rates(const std::vector<double>& w);

  std::vector<double> rates() const;
  // Class probabilities pi_i = (drop, keep) = (w_i, 1 - w_i).
  std::array<double, 2> class_probs(std::size_t i) const;
  std::size_t size() const { return logits.size(); }
};

// Per-feature temporary budgets eps_i' and Laplace scales b_i = 1/eps_i'.
struct PerFeatureBudget {
  std::vector<double> eps_prime;
  std::vector<double> scales;
};

// Feature vector plus a flag recording that it went through normalize().
// release() refuses unnormalized inputs: without the [0,1] range the
// sensitivity-1 guarantee is void.
struct FeatureVector {
  std::vector<double> values;
  bool normalized = false;
};

// Per-feature min-max bounds. Sensitivity after mapping is the constant 1.
class NormalizationSpec {
 public:
  NormalizationSpec(std::vector<double> lo, std::vector<double> hi);
  const std::vector<double>& lo() const { return lo_; }
  const std::vector<double>& hi() const { return hi_; }
  static constexpr double kSensitivity = 1.0;

 private:
  std::vector<double> lo_, hi_;
};

// Bernoulli keep/drop mask; entries are exactly 0 (dropped) or 1 (kept).
struct MaskVector {
  std::vector<std::uint8_t> bits;
};

// Unit Laplace draws and their per-feature scaled counterparts.
struct NoiseDraw {
  std::vector<double> unit_noise;
  std::vector<double> scaled_noise;
};

// Classical uniform scheme: one drop rate mu and one temporary budget eps'
// shared by every feature.
struct BaselineConfig {
  double mu = 0.5;
  double eps_prime_uniform = 1.0;
};

// eps_i' = log((exp(eps) - w_i)/(1 - w_i)), evaluated as
// log1p(expm1(eps)/(1 - w_i)) so small budgets and small rates keep full
// precision; w_i = 0 returns eps exactly. Domain: w_i in [0, 1), finite.
PerFeatureBudget allocate_budget(const std::vector<double>& w,
                                 const PrivacyBudget& eps);
PerFeatureBudget allocate_budget(const DropoutRates& w,
                                 const PrivacyBudget& eps);

// d eps_i'/d w_i = (exp(eps) - 1) / ((exp(eps) - w_i) (1 - w_i)); > 0.
std::vector<double> budget_gradient(const std::vector<double>& w,
                                    const PrivacyBudget& eps);

// Inverse-CDF transform of a uniform(0,1) draw to a standard Laplace draw:
// x = -sgn(u - 1/2) * ln(1 - 2|u - 1/2|).
double laplace_from_uniform(double u);

std::vector<double> sample_unit_laplace(std::size_t n, RandomStream& rng);

// r_i = b_i * t_i; scaling a unit Laplace draw by b yields a Lap(b) draw.
std::vector<double> scale_noise(const std::vector<double>& unit_noise,
                                const PerFeatureBudget& budget);

// m_i = 0 with probability w_i, independently per feature.
MaskVector sample_mask(const DropoutRates& w, RandomStream& rng);

// out_i = clamp((f_i - lo_i)/(hi_i - lo_i), 0, 1).
FeatureVector normalize(const std::vector<double>& f,
                        const NormalizationSpec& spec);

// Full release f .* m + r with one fresh mask and one fresh noise draw per
// call (no caching; each invocation spends its own budget).
std::vector<double> release(const FeatureVector& f, const DropoutRates& w,
                            const PrivacyBudget& eps, RandomStream& rng);

// Total budget of the uniform scheme: ln[(1 - mu) exp(eps') + mu].
PrivacyBudget baseline_total_budget(const BaselineConfig& cfg);

// Uniform-rate mask plus uniform-scale (1/eps') Laplace noise.
std::vector<double> baseline_release(const FeatureVector& f,
                                     const BaselineConfig& cfg,
                                     RandomStream& rng);

}  // namespace dpmld::privacy

#endif  // DPMLD_PRIVACY_HPP_
