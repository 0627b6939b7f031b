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

#include "dpmld/privacy.hpp"

#include <cmath>
#include "dpmld/errors.hpp"
#include <string>

namespace dpmld::privacy {

namespace {

double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

void check_rate(double w) {
  if (!std::isfinite(w) || w < 0.0 || w >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1), got " +
                                std::to_string(w));
  }
}

}  // namespace

PrivacyBudget::PrivacyBudget(double epsilon) : epsilon_(epsilon) {
  if (!std::isfinite(epsilon) || epsilon <= 0.0) {
    throw ConfigError(
        "privacy budget epsilon must be positive and finite");
  }
}

DropoutRates DropoutRates::from_rates(const std::vector<double>& w) {
  DropoutRates r;
  r.logits.reserve(w.size());
  for (double wi : w) {
    check_rate(wi);
    double c = clampd(wi, r.w_min, r.w_max);
    r.logits.push_back(std::log(c / (1.0 - c)));
  }
  return r;
}

std::vector<double> DropoutRates::rates() const {
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = clampd(1.0 / (1.0 + std::exp(-logits[i])), w_min, w_max);
  }
  return w;
}

std::array<double, 2> DropoutRates::class_probs(std::size_t i) const {
  double w = clampd(1.0 / (1.0 + std::exp(-logits.at(i))), w_min, w_max);
  return {w, 1.0 - w};
}

PerFeatureBudget allocate_budget(const std::vector<double>& w,
                                 const PrivacyBudget& eps) {
  PerFeatureBudget out;
  out.eps_prime.resize(w.size());
  out.scales.resize(w.size());
  const double em1 = std::expm1(eps.epsilon());
  for (std::size_t i = 0; i < w.size(); ++i) {
    check_rate(w[i]);
    double ep = w[i] == 0.0 ? eps.epsilon() : std::log1p(em1 / (1.0 - w[i]));
    out.eps_prime[i] = ep;
    out.scales[i] = 1.0 / ep;
  }
  return out;
}

PerFeatureBudget allocate_budget(const DropoutRates& w,
                                 const PrivacyBudget& eps) {
  return allocate_budget(w.rates(), eps);
}

std::vector<double> budget_gradient(const std::vector<double>& w,
                                    const PrivacyBudget& eps) {
  std::vector<double> g(w.size());
  const double ee = std::exp(eps.epsilon());
  const double em1 = std::expm1(eps.epsilon());
  for (std::size_t i = 0; i < w.size(); ++i) {
    check_rate(w[i]);
    g[i] = em1 / ((ee - w[i]) * (1.0 - w[i]));
  }
  return g;
}

double laplace_from_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw ConfigError("uniform draw must lie strictly in (0, 1)");
  }
  double d = u - 0.5;
  double mag = -std::log1p(-2.0 * std::fabs(d));
  return d < 0.0 ? -mag : (d > 0.0 ? mag : 0.0);
}

std::vector<double> sample_unit_laplace(std::size_t n, RandomStream& rng) {
  if (n == 0) throw ConfigError("need at least one draw");
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = laplace_from_uniform(rng.uniform());
  return t;
}

std::vector<double> scale_noise(const std::vector<double>& unit_noise,
                                const PerFeatureBudget& budget) {
  if (unit_noise.size() != budget.scales.size()) {
    throw ConfigError("noise/scale length mismatch: " +
                                std::to_string(unit_noise.size()) + " vs " +
                                std::to_string(budget.scales.size()));
  }
  std::vector<double> r(unit_noise.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = budget.scales[i] * unit_noise[i];
  }
  return r;
}

MaskVector sample_mask(const DropoutRates& w, RandomStream& rng) {
  std::vector<double> rates = w.rates();
  MaskVector m;
  m.bits.resize(rates.size());
  for (std::size_t i = 0; i < rates.size(); ++i) {
    m.bits[i] = rng.uniform() < rates[i] ? 0 : 1;
  }
  return m;
}

NormalizationSpec::NormalizationSpec(std::vector<double> lo,
                                     std::vector<double> hi)
    : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size()) {
    throw ConfigError("normalization bounds length mismatch");
  }
  for (std::size_t i = 0; i < lo_.size(); ++i) {
    if (!std::isfinite(lo_[i]) || !std::isfinite(hi_[i]) || hi_[i] <= lo_[i]) {
      throw ConfigError(
          "normalization bounds require hi > lo at index " + std::to_string(i));
    }
  }
}

FeatureVector normalize(const std::vector<double>& f,
                        const NormalizationSpec& spec) {
  if (f.size() != spec.lo().size()) {
    throw ConfigError("feature/bounds length mismatch");
  }
  FeatureVector out;
  out.values.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!std::isfinite(f[i])) {
      throw ConfigError("non-finite feature at index " +
                                  std::to_string(i));
    }
    out.values[i] =
        clampd((f[i] - spec.lo()[i]) / (spec.hi()[i] - spec.lo()[i]), 0.0, 1.0);
  }
  out.normalized = true;
  return out;
}

std::vector<double> release(const FeatureVector& f, const DropoutRates& w,
                            const PrivacyBudget& eps, RandomStream& rng) {
  if (!f.normalized) {
    throw ConfigError(
        "release requires a normalized feature vector; the sensitivity "
        "guarantee does not hold outside [0, 1]");
  }
  if (f.values.size() != w.size()) {
    throw ConfigError("feature/rate length mismatch");
  }
  // Draw order is part of the reproducibility contract: mask first, noise
  // second, one fresh draw of each per invocation.
  MaskVector m = sample_mask(w, rng);
  PerFeatureBudget budget = allocate_budget(w, eps);
  std::vector<double> t = sample_unit_laplace(f.values.size(), rng);
  std::vector<double> r = scale_noise(t, budget);
  std::vector<double> out(f.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = f.values[i] * static_cast<double>(m.bits[i]) + r[i];
  }
  return out;
}

PrivacyBudget baseline_total_budget(const BaselineConfig& cfg) {
  if (!std::isfinite(cfg.mu) || cfg.mu <= 0.0 || cfg.mu >= 1.0) {
    throw ConfigError("baseline mu must lie in (0, 1)");
  }
  if (!std::isfinite(cfg.eps_prime_uniform) || cfg.eps_prime_uniform <= 0.0) {
    throw ConfigError("baseline eps' must be positive");
  }
  // ln[(1-mu) e^{eps'} + mu], written as eps' + ln[(1-mu) + mu e^{-eps'}]
  // so large eps' cannot overflow.
  double ep = cfg.eps_prime_uniform;
  return PrivacyBudget(ep +
                       std::log((1.0 - cfg.mu) + cfg.mu * std::exp(-ep)));
}

std::vector<double> baseline_release(const FeatureVector& f,
                                     const BaselineConfig& cfg,
                                     RandomStream& rng) {
  if (!f.normalized) {
    throw ConfigError(
        "baseline_release requires a normalized feature vector");
  }
  baseline_total_budget(cfg);  // validates cfg
  std::size_t k = f.values.size();
  double b = 1.0 / cfg.eps_prime_uniform;
  std::vector<double> out(k);
  std::vector<std::uint8_t> mask(k);
  for (std::size_t i = 0; i < k; ++i) {
    mask[i] = rng.uniform() < cfg.mu ? 0 : 1;
  }
  for (std::size_t i = 0; i < k; ++i) {
    double t = laplace_from_uniform(rng.uniform());
    out[i] = f.values[i] * static_cast<double>(mask[i]) + b * t;
  }
  return out;
}

}  // namespace dpmld::privacy
