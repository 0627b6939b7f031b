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

// Two-class Gumbel-Max (hard) and Gumbel-Softmax (relaxed) sampling of the
// per-feature drop/keep category. Class probabilities are ordered
// (drop, keep) = (w, 1 - w); the mask value is the second component, so a
// hard sample yields a {0,1} mask and a soft sample a relaxed mask in [0,1].

#ifndef DPMLD_GUMBEL_HPP_
#define DPMLD_GUMBEL_HPP_

#include <array>
#include <vector>

#include "dpmld/random.hpp"

namespace dpmld::gumbel {

// Temperature schedule: tau(epoch) = max(tau_floor, tau_start * decay^epoch).
struct GumbelConfig {
  double tau_start = 1.0;
  double decay_per_epoch = 0.95;
  double tau_floor = 0.1;
};

// A drop/keep categorical sample. soft entries sum to 1; a hard sample is
// one-hot with the flag set.
struct CategoricalPair {
  std::array<double, 2> v{0.0, 0.0};
  bool hard = false;
};

// g = -log(-log u) for u in (0, 1).
double gumbel_from_uniform(double u);

std::vector<double> sample_gumbel(std::size_t n, RandomStream& rng);

// One-hot at argmax_j [g_j + log pi_j]; ties break toward the lower index.
CategoricalPair hard_from(double g1, double g2, const std::array<double, 2>& pi);

// v_j = exp((g_j + log pi_j)/tau) / sum_k exp((g_k + log pi_k)/tau),
// computed with max subtraction so tiny temperatures stay finite.
CategoricalPair soft_from(double g1, double g2, const std::array<double, 2>& pi,
                          double tau);

CategoricalPair sample_hard(const std::array<double, 2>& pi, RandomStream& rng);
CategoricalPair sample_soft(const std::array<double, 2>& pi, double tau,
                            RandomStream& rng);

// Projects onto the keep weight (second component).
double mask_from_categorical(const CategoricalPair& v);

double anneal(const GumbelConfig& cfg, int epoch);

}  // namespace dpmld::gumbel

#endif  // DPMLD_GUMBEL_HPP_
