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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dpmld/errors.hpp"
#include "dpmld/gumbel.hpp"
#include "dpmld/random.hpp"
#include "test_support.hpp"

using namespace dpmld;
using namespace dpmld::gumbel;

namespace {

constexpr double kGumbelAtHalf = 0.3665129205816643270124392;  // -ln ln 2
constexpr double kEulerGamma = 0.5772156649015328606065121;
constexpr double kDecay50 = 0.07694497527671332927;            // 0.95^50

}  // namespace

TEST_CASE("gumbel inverse transform hits known points") {
  CHECK(gumbel_from_uniform(0.5) ==
        doctest::Approx(kGumbelAtHalf).epsilon(1e-13));
  CHECK(gumbel_from_uniform(1.0 / std::exp(1.0)) ==
        doctest::Approx(0.0).epsilon(1e-13));
  CHECK_THROWS_AS(gumbel_from_uniform(0.0), ConfigError);
  CHECK_THROWS_AS(gumbel_from_uniform(1.0), ConfigError);
}

TEST_CASE("gumbel draws pass goodness of fit and mean check") {
  RandomStream rng(42);
  const auto g = sample_gumbel(100000, rng);
  const double d = testsup::ks_statistic(
      g, [](double x) { return testsup::gumbel_cdf(x); });
  CHECK(d < testsup::ks_crit_001(g.size()));
  CHECK(testsup::mean_of(g) == doctest::Approx(kEulerGamma).epsilon(0.02));
}

TEST_CASE("hard sampling frequencies match the class probabilities") {
  RandomStream rng(42);
  const int n = 100000;

  SUBCASE("near-degenerate keeps") {
    int keep = 0;
    for (int i = 0; i < n; ++i) {
      const auto s = sample_hard({1e-4, 1.0 - 1e-4}, rng);
      CHECK(s.hard);
      CHECK(s.v[0] + s.v[1] == 1.0);
      if (s.v[1] == 1.0) ++keep;
    }
    CHECK(static_cast<double>(keep) / n >= 0.999);
  }
  SUBCASE("symmetric") {
    int first = 0;
    for (int i = 0; i < n; ++i) {
      if (sample_hard({0.5, 0.5}, rng).v[0] == 1.0) ++first;
    }
    CHECK(static_cast<double>(first) / n == doctest::Approx(0.5).epsilon(0.02));
  }
  SUBCASE("asymmetric matches a direct categorical sampler") {
    int first = 0;
    for (int i = 0; i < n; ++i) {
      if (sample_hard({0.3, 0.7}, rng).v[0] == 1.0) ++first;
    }
    // Oracle: inverse-CDF categorical sampling with the same law.
    RandomStream oracle_rng(43);
    int ofirst = 0;
    for (int i = 0; i < n; ++i) {
      if (oracle_rng.uniform() < 0.3) ++ofirst;
    }
    CHECK(static_cast<double>(first) / n == doctest::Approx(0.3).epsilon(0.04));
    CHECK(std::fabs(first - ofirst) < 0.01 * n);
  }
}

TEST_CASE("ties break toward the lower index") {
  // Equal probabilities and equal Gumbel draws give equal arguments.
  const auto s = hard_from(0.7, 0.7, {0.5, 0.5});
  CHECK(s.v[0] == 1.0);
  CHECK(s.v[1] == 0.0);
}

TEST_CASE("soft samples form a probability pair") {
  RandomStream rng(42);
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_soft({0.3, 0.7}, 0.5, rng);
    CHECK(!s.hard);
    CHECK(s.v[0] >= 0.0);
    CHECK(s.v[1] >= 0.0);
    CHECK(std::fabs(s.v[0] + s.v[1] - 1.0) <= 1e-12);
  }
}

TEST_CASE("symmetric logits with equal draws give a half/half soft sample") {
  for (double tau : {0.1, 0.5, 1.0, 4.0}) {
    const auto s = soft_from(0.0, 0.0, {0.5, 0.5}, tau);
    CHECK(s.v[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.v[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("small temperature drives soft samples to the hard argmax") {
  RandomStream rng(42);
  int agree = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double g1 = gumbel_from_uniform(rng.uniform());
    const double g2 = gumbel_from_uniform(rng.uniform());
    const auto soft = soft_from(g1, g2, {0.3, 0.7}, 0.05);
    const auto hard = hard_from(g1, g2, {0.3, 0.7});
    const int soft_arg = soft.v[0] >= soft.v[1] ? 0 : 1;
    const int hard_arg = hard.v[0] == 1.0 ? 0 : 1;
    if (soft_arg == hard_arg) ++agree;
  }
  CHECK(agree == n);
}

TEST_CASE("soft argmax frequencies match the categorical law at tau=0.1") {
  RandomStream rng(42);
  const int n = 100000;
  int second = 0;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_soft({0.3, 0.7}, 0.1, rng);
    if (s.v[1] > s.v[0]) ++second;
  }
  CHECK(static_cast<double>(second) / n ==
        doctest::Approx(0.7).epsilon(0.03));
}

TEST_CASE("mask projection returns the keep component") {
  CategoricalPair drop;
  drop.v = {1.0, 0.0};
  drop.hard = true;
  CHECK(mask_from_categorical(drop) == 0.0);
  CategoricalPair keep;
  keep.v = {0.0, 1.0};
  keep.hard = true;
  CHECK(mask_from_categorical(keep) == 1.0);
  CategoricalPair soft;
  soft.v = {0.2, 0.8};
  CHECK(mask_from_categorical(soft) == 0.8);
}

TEST_CASE("annealing schedule decays to the floor") {
  const GumbelConfig cfg{1.0, 0.95, 0.1};
  CHECK(anneal(cfg, 0) == 1.0);
  CHECK(anneal(cfg, 1) == doctest::Approx(0.95).epsilon(1e-12));
  CHECK(anneal(cfg, 50) == 0.1);  // 0.95^50 ~= 0.0769 < floor
  CHECK(kDecay50 < 0.1);
  const GumbelConfig constant{0.5, 1.0, 0.1};
  CHECK(anneal(constant, 100) == 0.5);
  double prev = 1e9;
  for (int e = 0; e < 200; ++e) {
    const double tau = anneal(cfg, e);
    CHECK(tau <= prev);
    CHECK(tau >= cfg.tau_floor);
    prev = tau;
  }
  CHECK_THROWS_AS(anneal(cfg, -1), ConfigError);
  CHECK_THROWS_AS(anneal(GumbelConfig{1.0, 0.95, 0.0}, 0), ConfigError);
}

TEST_CASE("gumbel-softmax gradient in log pi matches finite differences") {
  // d v2 / d logit where v2 = sigmoid((g2 - g1 - logit)/tau): check the
  // closed form soft_from uses against a central difference in w space.
  const double g1 = 0.4, g2 = -0.3, tau = 0.7, w = 0.35;
  const double h = 1e-6;
  const auto up = soft_from(g1, g2, {w + h, 1.0 - w - h}, tau);
  const auto dn = soft_from(g1, g2, {w - h, 1.0 - w + h}, tau);
  const double fd = (up.v[1] - dn.v[1]) / (2.0 * h);
  // Analytic: v2 = sigmoid((g2 - g1 - logit(w))/tau), dlogit/dw = 1/(w(1-w)).
  const auto mid = soft_from(g1, g2, {w, 1.0 - w}, tau);
  const double an =
      -mid.v[1] * mid.v[0] / tau / (w * (1.0 - w));
  CHECK(fd == doctest::Approx(an).epsilon(1e-5));
}

TEST_CASE("hard and soft sampling validate their inputs") {
  RandomStream rng(1);
  CHECK_THROWS_AS(sample_hard({0.0, 1.0}, rng), ConfigError);
  CHECK_THROWS_AS(sample_hard({1.0, 0.0}, rng), ConfigError);
  CHECK_THROWS_AS(sample_soft({0.5, 0.5}, 0.0, rng), ConfigError);
}
