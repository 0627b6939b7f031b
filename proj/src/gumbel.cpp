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

#include "dpmld/gumbel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dpmld/errors.hpp"

namespace dpmld::gumbel {

namespace {

void check_pi(const std::array<double, 2>& pi) {
  for (double p : pi) {
    if (!std::isfinite(p) || p <= 0.0 || p >= 1.0) {
      throw ConfigError("class probability out of (0,1): " + std::to_string(p));
    }
  }
}

}  // namespace

double gumbel_from_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw ConfigError("uniform draw outside (0,1): " + std::to_string(u));
  }
  return -std::log(-std::log(u));
}

std::vector<double> sample_gumbel(std::size_t n, RandomStream& rng) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = gumbel_from_uniform(rng.uniform());
  return g;
}

CategoricalPair hard_from(double g1, double g2,
                          const std::array<double, 2>& pi) {
  check_pi(pi);
  const double a1 = g1 + std::log(pi[0]);
  const double a2 = g2 + std::log(pi[1]);
  CategoricalPair out;
  out.hard = true;
  if (a1 >= a2) {
    out.v = {1.0, 0.0};
  } else {
    out.v = {0.0, 1.0};
  }
  return out;
}

CategoricalPair soft_from(double g1, double g2, const std::array<double, 2>& pi,
                          double tau) {
  check_pi(pi);
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ConfigError("temperature must be positive: " + std::to_string(tau));
  }
  const double a1 = (g1 + std::log(pi[0])) / tau;
  const double a2 = (g2 + std::log(pi[1])) / tau;
  const double m = a1 > a2 ? a1 : a2;
  const double e1 = std::exp(a1 - m);
  const double e2 = std::exp(a2 - m);
  const double z = e1 + e2;
  CategoricalPair out;
  out.v = {e1 / z, e2 / z};
  return out;
}

CategoricalPair sample_hard(const std::array<double, 2>& pi,
                            RandomStream& rng) {
  const double g1 = gumbel_from_uniform(rng.uniform());
  const double g2 = gumbel_from_uniform(rng.uniform());
  return hard_from(g1, g2, pi);
}

CategoricalPair sample_soft(const std::array<double, 2>& pi, double tau,
                            RandomStream& rng) {
  const double g1 = gumbel_from_uniform(rng.uniform());
  const double g2 = gumbel_from_uniform(rng.uniform());
  return soft_from(g1, g2, pi, tau);
}

double mask_from_categorical(const CategoricalPair& v) { return v.v[1]; }

double anneal(const GumbelConfig& cfg, int epoch) {
  if (!(cfg.tau_floor > 0.0) || !(cfg.tau_start >= cfg.tau_floor)) {
    throw ConfigError("require tau_start >= tau_floor > 0");
  }
  if (!(cfg.decay_per_epoch > 0.0) || cfg.decay_per_epoch > 1.0) {
    throw ConfigError("decay_per_epoch must be in (0,1]");
  }
  if (epoch < 0) throw ConfigError("epoch must be non-negative");
  const double tau = cfg.tau_start * std::pow(cfg.decay_per_epoch, epoch);
  return tau < cfg.tau_floor ? cfg.tau_floor : tau;
}

}  // namespace dpmld::gumbel
