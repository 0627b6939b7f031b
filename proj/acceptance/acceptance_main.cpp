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

// End-to-end acceptance gate. Runs ten independent checks spanning the budget
// algebra, the mechanism audit, the samplers, the gradient machinery, the
// training trend, and the CLI, printing one PASS/FAIL line per check.
// Exit code 0 only when every check passes.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpmld/audit.hpp"
#include "dpmld/autodiff.hpp"
#include "dpmld/data.hpp"
#include "dpmld/gumbel.hpp"
#include "dpmld/model.hpp"
#include "dpmld/parallel.hpp"
#include "dpmld/privacy.hpp"
#include "dpmld/random.hpp"
#include "dpmld/trainer.hpp"
#include "test_support.hpp"

namespace {

namespace fs = std::filesystem;
using dpmld::ExecPolicy;
using dpmld::RandomStream;
namespace ad = dpmld::ad;
namespace audit = dpmld::audit;
namespace data = dpmld::data;
namespace gumbel = dpmld::gumbel;
namespace model = dpmld::model;
namespace privacy = dpmld::privacy;
namespace trainer = dpmld::trainer;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Budget identity: w + (1 - w) e^{eps'} = e^{eps}.

Outcome budget_identity() {
  RandomStream rng(123);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double w = 0.999 * rng.uniform();
    const double eps =
        std::exp(std::log(1e-3) + rng.uniform() * std::log(5.0 / 1e-3));
    const privacy::PerFeatureBudget pfb =
        privacy::allocate_budget(std::vector<double>{w},
                                 privacy::PrivacyBudget(eps));
    const double lhs = w + (1.0 - w) * std::exp(pfb.eps_prime[0]);
    const double rhs = std::exp(eps);
    worst = std::max(worst, std::fabs(lhs - rhs) / rhs);
  }
  return {worst <= 1e-9,
          "max relative error " + fmt(worst) + " over 10000 pairs"};
}

// ---------------------------------------------------------------------------
// 2. Worst-case log-ratio tightness: sup at (1,0) equals the claimed budget,
// and no pair on a 0.05 grid exceeds it.

Outcome tightness() {
  const std::array<double, 3> eps_list{0.01, 0.1, 1.0};
  double worst_eq = 0.0;
  for (const double eps : eps_list) {
    for (int wi = 1; wi <= 9; ++wi) {
      const double w = 0.1 * wi;
      const audit::SupResult sr = audit::sup_log_ratio(
          {1.0, 0.0, w, privacy::PrivacyBudget(eps)});
      worst_eq = std::max(worst_eq, std::fabs(sr.value - eps));
    }
  }
  if (worst_eq > 1e-9) {
    return {false, "sup at (1,0) off the claimed budget by " + fmt(worst_eq)};
  }
  double worst_excess = -1e300;
  for (const double eps : eps_list) {
    for (int wi = 1; wi <= 9; ++wi) {
      const double w = 0.1 * wi;
      const double b =
          privacy::allocate_budget(std::vector<double>{w},
                                   privacy::PrivacyBudget(eps))
              .scales[0];
      for (int i = 0; i <= 20; ++i) {
        for (int j = 0; j <= 20; ++j) {
          const double f1 = 0.05 * i, f2 = 0.05 * j;
          const double sup =
              audit::sup_log_ratio_scaled(f1, f2, w, b).value;
          worst_excess = std::max(worst_excess, sup - eps);
        }
      }
    }
  }
  return {worst_excess <= 1e-6,
          "sup at (1,0) exact to " + fmt(worst_eq) +
              ", max grid excess " + fmt(worst_excess)};
}

// ---------------------------------------------------------------------------
// 3. Monte Carlo estimate agrees with the binned analytic sup.

Outcome mc_agreement() {
  const audit::AdjacentPair pair{1.0, 0.0, 0.5, privacy::PrivacyBudget(1.0)};
  const std::size_t n = 1000000, bins = 2000;
  const audit::McResult mc = audit::monte_carlo_ratio(pair, n, bins, 42);
  const double oracle = audit::binned_analytic_ratio(pair, n, bins);
  const double err = std::fabs(mc.estimate - oracle);
  return {mc.width > 0.0 && err <= mc.width,
          "estimate " + fmt(mc.estimate) + " vs analytic " + fmt(oracle) +
              ", |diff| " + fmt(err) + " <= width " + fmt(mc.width)};
}

// ---------------------------------------------------------------------------
// 4. Sampler goodness of fit and the scaling property.

Outcome samplers() {
  const std::size_t n = 100000;
  std::string detail;

  RandomStream r1(11);
  const std::vector<double> lap = privacy::sample_unit_laplace(n, r1);
  const double d_lap = testsup::ks_statistic(
      lap, [](double x) { return testsup::laplace_cdf(x, 0.0, 1.0); });
  if (d_lap >= testsup::ks_crit_001(n)) {
    return {false, "unit Laplace KS " + fmt(d_lap)};
  }
  detail += "laplace KS " + fmt(d_lap);

  RandomStream r2(12);
  const std::vector<double> gum = gumbel::sample_gumbel(n, r2);
  const double d_gum = testsup::ks_statistic(
      gum, [](double x) { return testsup::gumbel_cdf(x); });
  if (d_gum >= testsup::ks_crit_001(n)) {
    return {false, "Gumbel KS " + fmt(d_gum)};
  }
  detail += ", gumbel KS " + fmt(d_gum);

  // Scaling: b * Lap(1) must be distributed as Lap(b) with b from the
  // budget rule.
  const privacy::PerFeatureBudget pfb = privacy::allocate_budget(
      std::vector<double>(n, 0.3), privacy::PrivacyBudget(0.8));
  RandomStream r3(13);
  const std::vector<double> unit = privacy::sample_unit_laplace(n, r3);
  const std::vector<double> scaled = privacy::scale_noise(unit, pfb);
  const double b = pfb.scales[0];
  const double d_sc = testsup::ks_statistic(
      scaled, [b](double x) { return testsup::laplace_cdf(x, 0.0, b); });
  if (d_sc >= testsup::ks_crit_001(n)) {
    return {false, "scaled-noise KS " + fmt(d_sc)};
  }
  detail += ", scaled KS " + fmt(d_sc);

  // Hard categorical frequencies.
  const std::array<double, 2> pi{0.3, 0.7};
  RandomStream r4(14);
  std::size_t keep = 0;
  for (std::size_t i = 0; i < n; ++i) {
    keep += gumbel::sample_hard(pi, r4).v[1] == 1.0 ? 1 : 0;
  }
  const double freq = static_cast<double>(keep) / static_cast<double>(n);
  detail += ", hard keep freq " + fmt(freq);
  return {std::fabs(freq - pi[1]) < 0.01, detail};
}

// ---------------------------------------------------------------------------
// 5. Relaxed sampling converges to the hard sampler as tau -> 0.

Outcome gumbel_softmax_limit() {
  const std::array<double, 2> pi{0.35, 0.65};
  RandomStream rng(7);
  std::size_t agree = 0;
  const std::size_t trials = 10000;
  for (std::size_t i = 0; i < trials; ++i) {
    const std::vector<double> g = gumbel::sample_gumbel(2, rng);
    const gumbel::CategoricalPair soft =
        gumbel::soft_from(g[0], g[1], pi, 0.05);
    const gumbel::CategoricalPair hard = gumbel::hard_from(g[0], g[1], pi);
    if ((soft.v[1] > soft.v[0]) == (hard.v[1] == 1.0)) ++agree;
  }
  if (agree != trials) {
    return {false, "soft/hard argmax agreement " +
                       std::to_string(agree) + "/" + std::to_string(trials)};
  }

  const std::array<double, 2> pi2{0.3, 0.7};
  RandomStream rng2(8);
  const std::size_t n = 100000;
  std::size_t keep = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const gumbel::CategoricalPair s = gumbel::sample_soft(pi2, 0.1, rng2);
    keep += s.v[1] > s.v[0] ? 1 : 0;
  }
  const double tv =
      std::fabs(static_cast<double>(keep) / static_cast<double>(n) - pi2[1]);
  return {tv <= 0.02, "argmax agreement 10000/10000, tau=0.1 TV " + fmt(tv)};
}

// ---------------------------------------------------------------------------
// 6. Gradient checks: every op, the full relaxed loss, and both rate routes.

struct FdProbe {
  std::string name;
  double max_rel = 0.0;
};

// Relative mismatch with a floor: tiny gradients are compared absolutely so
// noise below 1e-9 never divides by itself.
bool fd_close(double fd, double g, double* rel) {
  const double diff = std::fabs(fd - g);
  const double denom = std::max(std::fabs(fd), std::fabs(g));
  *rel = denom > 1e-6 ? diff / denom : 0.0;
  return diff <= 1e-4 * denom || diff <= 1e-9;
}

// Generic per-op check: loss = sum(out .* W) for a fixed random W, gradient
// of every input entry against central differences.
struct OpCheck {
  std::string name;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::function<ad::Tensor(ad::Tape&, std::vector<ad::Tensor>&)> build;
  // Entry generator; defaults to uniform in [-1.5, 1.5].
  std::function<double(RandomStream&)> gen;
};

Outcome op_gradients(std::vector<FdProbe>* probes) {
  auto uni = [](RandomStream& r) { return 3.0 * r.uniform() - 1.5; };
  auto pos = [](RandomStream& r) { return 0.5 + 2.0 * r.uniform(); };
  // Clamp test values stay strictly inside (lo, hi) = (-1, 1) or outside by
  // a wide margin, so finite differences never straddle the kink.
  auto clampsafe = [](RandomStream& r) {
    const double u = 3.0 * r.uniform() - 1.5;
    if (std::fabs(u) < 0.05) return u + 0.1;
    if (std::fabs(std::fabs(u) - 1.0) < 0.05) return u * 1.2;
    return u;
  };

  const std::vector<int> embed_ids{0, 3, 3, 1};
  const std::vector<int> ce_labels{0, 2, 1, 0};

  std::vector<OpCheck> checks;
  checks.push_back({"add", {{3, 4}, {3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::add(in[0], in[1]);
                    },
                    uni});
  checks.push_back({"sub", {{3, 4}, {3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::sub(in[0], in[1]);
                    },
                    uni});
  checks.push_back({"mul", {{3, 4}, {3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::mul(in[0], in[1]);
                    },
                    uni});
  checks.push_back({"div", {{3, 4}, {3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::div(in[0], in[1]);
                    },
                    pos});
  checks.push_back({"add_scalar", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::add_scalar(in[0], 0.7);
                    },
                    uni});
  checks.push_back({"mul_scalar", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::mul_scalar(in[0], -1.3);
                    },
                    uni});
  checks.push_back({"add_rowvec", {{3, 4}, {1, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::add_rowvec(in[0], in[1]);
                    },
                    uni});
  checks.push_back({"exp", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::exp(in[0]);
                    },
                    uni});
  checks.push_back({"log", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::log(in[0]);
                    },
                    pos});
  checks.push_back({"sigmoid", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::sigmoid(in[0]);
                    },
                    uni});
  checks.push_back({"tanh", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::tanh(in[0]);
                    },
                    uni});
  checks.push_back({"clamp", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::clamp(in[0], -1.0, 1.0);
                    },
                    clampsafe});
  checks.push_back({"matmul", {{3, 4}, {4, 2}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::matmul(in[0], in[1]);
                    },
                    uni});
  checks.push_back({"transpose", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::transpose(in[0]);
                    },
                    uni});
  checks.push_back({"reshape", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::reshape(in[0], 2, 6);
                    },
                    uni});
  checks.push_back({"concat_rows", {{2, 3}, {1, 3}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::concat({in[0], in[1]}, 0);
                    },
                    uni});
  checks.push_back({"concat_cols", {{3, 2}, {3, 1}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::concat({in[0], in[1]}, 1);
                    },
                    uni});
  checks.push_back({"slice", {{4, 5}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::slice(in[0], 1, 3, 0, 4);
                    },
                    uni});
  checks.push_back({"softmax_rows", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::softmax(in[0], 1);
                    },
                    uni});
  checks.push_back({"softmax_cols", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::softmax(in[0], 0);
                    },
                    uni});
  checks.push_back({"layer_normalize", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::layer_normalize(in[0]);
                    },
                    uni});
  checks.push_back({"sum", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::sum(in[0]);
                    },
                    uni});
  checks.push_back({"mean", {{3, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::mean(in[0]);
                    },
                    uni});
  checks.push_back({"block_mean_rows", {{6, 3}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::block_mean_rows(in[0], 2);
                    },
                    uni});
  checks.push_back({"embed", {{5, 3}},
                    [embed_ids](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::embed(in[0], embed_ids);
                    },
                    uni});
  checks.push_back({"grouped_attn_scores", {{4, 4}, {6, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::grouped_attn_scores(in[0], in[1], 2, 3);
                    },
                    uni});
  checks.push_back({"grouped_attn_apply", {{4, 3}, {6, 4}},
                    [](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::grouped_attn_apply(in[0], in[1], 2, 3);
                    },
                    uni});
  checks.push_back({"cross_entropy", {{4, 3}},
                    [ce_labels](ad::Tape&, std::vector<ad::Tensor>& in) {
                      return ad::cross_entropy(in[0], ce_labels);
                    },
                    uni});

  for (const OpCheck& c : checks) {
    RandomStream rng(991);
    std::vector<std::vector<double>> vals;
    for (const auto& [r, cc] : c.shapes) {
      std::vector<double> v(r * cc);
      for (double& x : v) x = c.gen(rng);
      vals.push_back(std::move(v));
    }
    // Fixed random mixing weights make the loss a scalar sensitive to every
    // output entry.
    RandomStream wrng(992);
    std::vector<double> wmix;

    const auto eval = [&](const std::vector<std::vector<double>>& v,
                          bool want_grads,
                          std::vector<std::vector<double>>* grads) {
      ad::Tape tape(ExecPolicy{1});
      std::vector<ad::Tensor> in;
      for (std::size_t i = 0; i < c.shapes.size(); ++i) {
        in.push_back(tape.leaf(c.shapes[i].first, c.shapes[i].second, v[i],
                               want_grads));
      }
      ad::Tensor out = c.build(tape, in);
      if (wmix.empty()) {
        wmix.resize(out.size());
        for (double& x : wmix) x = 2.0 * wrng.uniform() - 1.0;
      }
      ad::Tensor w = tape.leaf(out.rows(), out.cols(), wmix, false);
      ad::Tensor loss = ad::sum(ad::mul(out, w));
      if (want_grads) {
        tape.backward(loss);
        grads->clear();
        for (const ad::Tensor& t : in) grads->push_back(t.grad());
      }
      return loss.item();
    };

    std::vector<std::vector<double>> grads;
    eval(vals, true, &grads);
    FdProbe probe{c.name, 0.0};
    for (std::size_t t = 0; t < vals.size(); ++t) {
      for (std::size_t e = 0; e < vals[t].size(); ++e) {
        const double x = vals[t][e];
        const double h = 1e-5 * std::max(1.0, std::fabs(x));
        auto up = vals, dn = vals;
        up[t][e] = x + h;
        dn[t][e] = x - h;
        const double fd =
            (eval(up, false, nullptr) - eval(dn, false, nullptr)) / (2.0 * h);
        double rel = 0.0;
        if (!fd_close(fd, grads[t][e], &rel)) {
          probes->push_back({c.name, rel});
          return {false, c.name + " input " + std::to_string(t) + " entry " +
                             std::to_string(e) + ": fd " + fmt(fd) +
                             " vs grad " + fmt(grads[t][e])};
        }
        probe.max_rel = std::max(probe.max_rel, rel);
      }
    }
    probes->push_back(probe);
  }
  return {true, std::to_string(checks.size()) + " ops"};
}

struct TrendFixture {
  std::vector<data::ModalitySample> dataset;
  trainer::TrainConfig cfg;
  std::vector<const data::ModalitySample*> batch;
};

// Small private-training fixture with a batch whose normalized features sit
// strictly inside (0,1): min-max bounds put the extremal samples exactly on
// the clamp kink, where a finite difference would straddle two slopes.
TrendFixture make_fd_fixture() {
  TrendFixture fx;
  data::GeneratorConfig g;
  g.n_samples = 60;
  g.eeg_channels = 2;
  g.om_dims = 2;
  g.timesteps = 8;
  g.noise_sd = 0.05;
  g.seed = 9;
  fx.dataset = data::generate(g);

  fx.cfg.model.d_model = 8;
  fx.cfg.model.d_k = 8;
  fx.cfg.model.d_feat = 4;
  fx.cfg.model.d_ff = 8;
  fx.cfg.model.encoder_layers = 1;
  fx.cfg.model.decoder_layers = 1;
  fx.cfg.model.vocab_bins = 4;
  fx.cfg.model.patch = 2;
  fx.cfg.model.image_hw = 4;
  fx.cfg.model.cls_hidden = 8;
  fx.cfg.epsilon = privacy::PrivacyBudget(1.0);
  fx.cfg.batch_size = 8;
  fx.cfg.momentum = 0.9;
  fx.cfg.policy = ExecPolicy{1};
  return fx;
}

std::vector<const data::ModalitySample*> interior_batch(
    const std::vector<data::ModalitySample>& ds, const model::ModelState& st,
    std::size_t want) {
  std::vector<const data::ModalitySample*> batch;
  for (const data::ModalitySample& s : ds) {
    const model::Embeddings emb = model::forward_features(s, st);
    bool interior = true;
    for (std::size_t j = 0; j < emb.f.size(); ++j) {
      const double lo = st.norm.lo[j], hi = st.norm.hi[j];
      const double z = (emb.f[j] - lo) / (hi - lo);
      if (z < 1e-3 || z > 1.0 - 1e-3) {
        interior = false;
        break;
      }
    }
    if (interior) batch.push_back(&s);
    if (batch.size() == want) break;
  }
  return batch;
}

Outcome gradient_suite(std::string* extra) {
  std::vector<FdProbe> probes;
  const Outcome ops = op_gradients(&probes);
  if (!ops.pass) return ops;
  double worst_op = 0.0;
  for (const FdProbe& p : probes) worst_op = std::max(worst_op, p.max_rel);

  TrendFixture fx = make_fd_fixture();
  model::ModelState st =
      model::init_model(fx.cfg.model, fx.dataset[0].eeg_channels, 5);
  st.tokenizer = model::fit_tokenizer(fx.dataset, fx.cfg.model.vocab_bins);
  st.norm = model::fit_norm_bounds(fx.dataset, st, fx.cfg.policy);
  fx.batch = interior_batch(fx.dataset, st, fx.cfg.batch_size);
  if (fx.batch.size() < fx.cfg.batch_size) {
    return {false, "could not assemble an interior batch"};
  }
  const std::size_t k = fx.cfg.model.feature_dim();
  const double tau = 0.7;

  // Full relaxed loss into model parameters.
  trainer::TrainerState ts;
  {
    model::ModelState copy = st;
    ts = trainer::make_trainer_state(std::move(copy));
  }
  RandomStream drng(33);
  const trainer::DrawSet draws =
      trainer::sample_draws(fx.batch.size() * k, drng);
  const std::vector<double> p0 = ts.model.params;
  fx.cfg.lr_p = 1e-3;
  trainer::step_model(fx.batch, ts, fx.cfg, draws, tau);
  const model::ModelState st_after = ts.model;  // head_scale refreshed
  RandomStream pick(77);
  double worst_model = 0.0;
  for (int probe = 0; probe < 24; ++probe) {
    const std::size_t j = static_cast<std::size_t>(
        pick.uniform() * static_cast<double>(p0.size()));
    const double g = (p0[j] - ts.model.params[j]) / fx.cfg.lr_p;
    const double h = 1e-5 * std::max(1.0, std::fabs(p0[j]));
    model::ModelState up = st_after, dn = st_after;
    up.params = p0;
    dn.params = p0;
    up.params[j] += h;
    dn.params[j] -= h;
    const double fd =
        (trainer::relaxed_loss(fx.batch, up, ts.rates, fx.cfg, draws, tau) -
         trainer::relaxed_loss(fx.batch, dn, ts.rates, fx.cfg, draws, tau)) /
        (2.0 * h);
    double rel = 0.0;
    if (!fd_close(fd, g, &rel)) {
      return {false, "model param " + std::to_string(j) + ": fd " + fmt(fd) +
                         " vs grad " + fmt(g)};
    }
    worst_model = std::max(worst_model, rel);
  }

  // Rate-logit gradients. Three drawsets isolate the routes: general draws
  // exercise both, zero Laplace draws leave only the mask route alive, and
  // saturating Gumbel draws (the sigmoid underflows to an exact constant)
  // leave only the noise-scale route.
  const auto rate_grad = [&](const trainer::DrawSet& d,
                             const trainer::StepRatesOptions& paths) {
    trainer::TrainerState rs;
    {
      model::ModelState copy = st;
      rs = trainer::make_trainer_state(std::move(copy));
    }
    rs.model.params = p0;
    trainer::TrainConfig cfg = fx.cfg;
    cfg.lr_w = 1e-4;
    const std::vector<double> w0 = rs.rates.logits;
    trainer::step_rates(fx.batch, rs, cfg, d, tau, paths);
    std::vector<double> g(k);
    for (std::size_t j = 0; j < k; ++j) {
      g[j] = (w0[j] - rs.rates.logits[j]) / cfg.lr_w;
    }
    return g;
  };
  const auto rate_fd = [&](const trainer::DrawSet& d,
                           const model::ModelState& at) {
    std::vector<double> fd(k);
    trainer::TrainConfig cfg = fx.cfg;
    model::ModelState base = at;
    base.params = p0;
    privacy::DropoutRates r0;
    r0.logits.assign(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double h = 1e-5;
      privacy::DropoutRates up = r0, dn = r0;
      up.logits[j] += h;
      dn.logits[j] -= h;
      fd[j] =
          (trainer::relaxed_loss(fx.batch, base, up, cfg, d, tau) -
           trainer::relaxed_loss(fx.batch, base, dn, cfg, d, tau)) /
          (2.0 * h);
    }
    return fd;
  };
  // The stored head scale at the committed rates; relaxed_loss keeps it
  // frozen, matching the step's view.
  model::ModelState st_scaled = st;
  {
    privacy::DropoutRates r0;
    r0.logits.assign(k, 0.0);
    st_scaled.head_scale = trainer::feature_scales(r0, fx.cfg.epsilon);
  }

  double worst_rate = 0.0;
  const auto compare = [&](const std::vector<double>& g,
                           const std::vector<double>& fd,
                           const char* route) -> Outcome {
    for (std::size_t j = 0; j < k; ++j) {
      double rel = 0.0;
      if (!fd_close(fd[j], g[j], &rel)) {
        return {false, std::string(route) + " logit " + std::to_string(j) +
                           ": fd " + fmt(fd[j]) + " vs grad " + fmt(g[j])};
      }
      worst_rate = std::max(worst_rate, rel);
    }
    return {true, ""};
  };

  const std::vector<double> g_full = rate_grad(draws, {true, true});
  Outcome oc = compare(g_full, rate_fd(draws, st_scaled), "full");
  if (!oc.pass) return oc;

  trainer::DrawSet mask_only = draws;
  mask_only.t.assign(mask_only.t.size(), 0.0);
  const std::vector<double> g_mask = rate_grad(mask_only, {true, false});
  oc = compare(g_mask, rate_fd(mask_only, st_scaled), "mask route");
  if (!oc.pass) return oc;

  trainer::DrawSet noise_only = draws;
  noise_only.g1.assign(noise_only.g1.size(), 0.0);
  noise_only.g2.assign(noise_only.g2.size(), 60.0);
  const std::vector<double> g_noise = rate_grad(noise_only, {false, true});
  oc = compare(g_noise, rate_fd(noise_only, st_scaled), "noise route");
  if (!oc.pass) return oc;

  // The two routes partition the full gradient: the release is additive in
  // the mask and noise terms, so route gradients must sum exactly.
  const std::vector<double> g_m2 = rate_grad(draws, {true, false});
  const std::vector<double> g_n2 = rate_grad(draws, {false, true});
  for (std::size_t j = 0; j < k; ++j) {
    if (std::fabs(g_m2[j] + g_n2[j] - g_full[j]) >
        1e-10 * std::max(1.0, std::fabs(g_full[j]))) {
      return {false, "route decomposition broken at logit " +
                         std::to_string(j)};
    }
  }

  *extra = "max rel: ops " + fmt(worst_op) + ", model " + fmt(worst_model) +
           ", rates " + fmt(worst_rate);
  return {true, ""};
}

// ---------------------------------------------------------------------------
// 7. Privacy/utility trend across budgets.

Outcome trend(std::string* extra) {
  data::GeneratorConfig g;
  g.n_samples = 3000;
  g.eeg_channels = 2;
  g.om_dims = 2;
  g.timesteps = 16;
  g.noise_sd = 0.02;
  g.seed = 42;
  const std::vector<data::ModalitySample> dataset = data::generate(g);

  trainer::TrainConfig base;
  base.model.d_model = 8;
  base.model.d_k = 8;
  base.model.d_feat = 32;
  base.model.d_ff = 16;
  base.model.encoder_layers = 1;
  base.model.decoder_layers = 1;
  base.model.vocab_bins = 8;
  base.model.patch = 2;
  base.model.image_hw = 4;
  base.model.cls_hidden = 32;
  base.epochs = 30;
  base.batch_size = 32;
  base.model_steps_per_batch = 6;
  base.policy = ExecPolicy{1};

  const auto run_mean = [&](double eps, bool np) {
    double sum = 0.0;
    for (std::uint64_t s = 1; s <= 5; ++s) {
      trainer::TrainConfig cfg = base;
      cfg.non_private = np;
      if (!np) cfg.epsilon = privacy::PrivacyBudget(eps);
      cfg.seed = s;
      const trainer::TrainResult res = trainer::train(dataset, cfg);
      double best = 0.0;
      for (const trainer::EpochMetrics& m : res.metrics) {
        best = std::max(best, m.test_acc);
      }
      sum += best;
    }
    return sum / 5.0;
  };

  const double acc_np = run_mean(0.0, true);
  const double acc_1 = run_mean(1.0, false);
  const double acc_01 = run_mean(0.1, false);
  const double acc_001 = run_mean(0.01, false);
  *extra = "mean best acc: np " + fmt(acc_np) + ", eps=1 " + fmt(acc_1) +
           ", eps=0.1 " + fmt(acc_01) + ", eps=0.01 " + fmt(acc_001);
  const bool ordered = acc_1 >= acc_01 && acc_01 >= acc_001;
  const bool np_ok = acc_np >= acc_1 - 0.01;
  return {ordered && np_ok, ""};
}

// ---------------------------------------------------------------------------
// 8. Uniform baseline round-trips through the element-wise formula.

Outcome uniform_roundtrip() {
  double worst = 0.0;
  for (int mi = 1; mi <= 9; ++mi) {
    const double mu = 0.1 * mi;
    for (const double ep : {0.25, 1.0, 2.0}) {
      const privacy::PrivacyBudget total =
          privacy::baseline_total_budget({mu, ep});
      // Element-wise allocation at w_i = mu must give back eps' everywhere.
      const privacy::PerFeatureBudget pfb = privacy::allocate_budget(
          std::vector<double>(7, mu), total);
      for (const double e : pfb.eps_prime) {
        worst = std::max(worst, std::fabs(e - ep));
      }
      // And the audited worst-case pair realizes exactly the total budget.
      const double sup =
          audit::sup_log_ratio_scaled(1.0, 0.0, mu, 1.0 / ep).value;
      worst = std::max(worst, std::fabs(sup - total.epsilon()));
    }
  }
  return {worst <= 1e-9, "max deviation " + fmt(worst)};
}

// ---------------------------------------------------------------------------
// 9. Two identical CLI train runs produce byte-identical metrics.

std::string slurp_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome reproducibility() {
  const fs::path dir =
      fs::temp_directory_path() / "dpmld_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = DPMLD_CLI_PATH;
  const std::string log = (dir / "log.txt").string();

  const auto run = [&](const std::string& args) {
    const std::string cmd =
        "\"" + cli + "\" " + args + " >> \"" + log + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    return rc == 0;
  };

  if (!run("gen-data --out \"" + (dir / "d.jsonl").string() +
           "\" --n 80 --channels 2 --om-dims 2 --timesteps 8 "
           "--noise-sd 0.05 --seed 3")) {
    return {false, "gen-data failed, see " + log};
  }
  const std::string train_flags =
      " --epsilon 1.0 --seed 11 --epochs 3 --batch-size 16 --d-model 8"
      " --d-feat 4 --d-ff 8 --enc-layers 1 --dec-layers 1 --bins 4"
      " --patch 2 --image-hw 4 --cls-hidden 8";
  for (const char* tag : {"rA", "rB"}) {
    if (!run("train --data \"" + (dir / "d.jsonl").string() + "\" --out \"" +
             (dir / tag).string() + "\"" + train_flags)) {
      return {false, std::string("train ") + tag + " failed, see " + log};
    }
  }
  const std::string a = slurp_file(dir / "rA" / "metrics.jsonl");
  const std::string b = slurp_file(dir / "rB" / "metrics.jsonl");
  if (a.empty() || a != b) {
    return {false, "metrics.jsonl differs between identical runs"};
  }
  const std::string ra = slurp_file(dir / "rA" / "rates.csv");
  const std::string rb = slurp_file(dir / "rB" / "rates.csv");
  return {!ra.empty() && ra == rb,
          "metrics and learned rates byte-identical"};
}

// ---------------------------------------------------------------------------
// 10. Metrics match the hand-computed confusion matrix exactly.

Outcome metric_correctness() {
  const std::vector<int> preds{0, 1, 1, 0};
  const std::vector<int> labels{0, 1, 0, 0};
  const double acc = trainer::accuracy(preds, labels);
  const double f1 = trainer::macro_f1(preds, labels, 2);
  const bool ok = acc == 0.75 && f1 == 11.0 / 15.0;
  return {ok, "accuracy " + fmt(acc) + ", macro-F1 " + fmt(f1)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double time_limit_s;  // 0 = unconstrained
    std::function<Outcome(std::string*)> fn;
  };

  const std::vector<Criterion> criteria{
      {"budget identity", 1.0,
       [](std::string*) { return budget_identity(); }},
      {"worst-case log-ratio tightness", 10.0,
       [](std::string*) { return tightness(); }},
      {"monte carlo vs analytic audit", 30.0,
       [](std::string*) { return mc_agreement(); }},
      {"sampler goodness of fit", 0.0,
       [](std::string*) { return samplers(); }},
      {"relaxed sampler hard limit", 0.0,
       [](std::string*) { return gumbel_softmax_limit(); }},
      {"gradient checks", 60.0,
       [](std::string* e) { return gradient_suite(e); }},
      {"privacy/utility trend", 600.0,
       [](std::string* e) { return trend(e); }},
      {"uniform baseline round-trip", 0.0,
       [](std::string*) { return uniform_roundtrip(); }},
      {"bitwise train reproducibility", 0.0,
       [](std::string*) { return reproducibility(); }},
      {"metric correctness", 0.0,
       [](std::string*) { return metric_correctness(); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const Criterion& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome oc;
    std::string extra;
    try {
      oc = c.fn(&extra);
    } catch (const std::exception& e) {
      oc = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (oc.pass && c.time_limit_s > 0.0 && secs > c.time_limit_s) {
      oc.pass = false;
      oc.detail += (oc.detail.empty() ? "" : "; ") + std::string("over ") +
                   fmt(c.time_limit_s) + "s budget";
    }
    if (!oc.pass) ++failed;
    std::string detail = oc.detail;
    if (!extra.empty()) {
      detail += detail.empty() ? extra : "; " + extra;
    }
    std::printf("[%2zu/10] %s  %7.2fs  %s%s%s\n", i + 1,
                oc.pass ? "PASS" : "FAIL", secs, c.name,
                detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/10 criteria passed\n",
              static_cast<int>(criteria.size()) - failed);
  return failed == 0 ? 0 : 1;
}
