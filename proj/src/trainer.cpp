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

#include "dpmld/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "dpmld/errors.hpp"

namespace dpmld::trainer {

namespace {

double logit_of(double w) { return std::log(w / (1.0 - w)); }

double sigmoid_num(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<int> batch_labels(
    const std::vector<const data::ModalitySample*>& batch) {
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const auto* s : batch) labels.push_back(s->label);
  return labels;
}

std::size_t count_correct(const ad::Tensor& logits,
                          const std::vector<int>& labels) {
  const auto& v = logits.value();
  const std::size_t n = logits.rows(), c = logits.cols();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return correct;
}

struct ForwardOut {
  ad::Tensor loss;
  std::size_t correct = 0;
  model::GraphModel gm;
  ad::Tensor w_leaf;
  bool has_w_leaf = false;
};

// One relaxed forward pass. param_grad/w_grad select which leaves collect
// gradients; the release term built from whichever inputs do not need
// gradients is folded into constants of identical value.
ForwardOut build_forward(ad::Tape& tape,
                         const std::vector<const data::ModalitySample*>& batch,
                         const model::ModelState& st,
                         const privacy::DropoutRates& rates,
                         const TrainConfig& cfg, const DrawSet& draws,
                         double tau, bool param_grad, bool w_grad,
                         const StepRatesOptions& paths) {
  const std::size_t b_n = batch.size();
  const std::size_t k = st.cfg.feature_dim();
  ForwardOut fo;
  fo.gm = model::bind_params(tape, st, param_grad);
  model::FeatureGraph fg = model::build_feature_graph(tape, fo.gm, batch);
  ad::Tensor fnorm = model::apply_norm_graph(tape, fg.raw, st.norm);
  ad::Tensor released = fnorm;

  if (!cfg.non_private) {
    if (rates.size() != k) {
      throw ConfigError("rates sized " + std::to_string(rates.size()) +
                        " for " + std::to_string(k) + " features");
    }
    if (draws.g1.size() != b_n * k || draws.g2.size() != b_n * k ||
        draws.t.size() != b_n * k) {
      throw ConfigError("draw set does not match batch x features");
    }
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    if (w_grad) {
      fo.w_leaf = tape.leaf(1, k, rates.logits, true);
      fo.has_w_leaf = true;
    }
    std::vector<double> gdiff(b_n * k);
    for (std::size_t i = 0; i < gdiff.size(); ++i) {
      gdiff[i] = draws.g2[i] - draws.g1[i];
    }

    // Soft keep-mask: sigmoid((g2 - g1 - logit_j) / tau), the keep component
    // of the two-class Gumbel-Softmax over (drop, keep) = (w, 1-w).
    ad::Tensor mask;
    if (w_grad && paths.mask_path) {
      ad::Tensor arg = ad::add_rowvec(tape.leaf(b_n, k, gdiff, false),
                                      ad::mul_scalar(fo.w_leaf, -1.0));
      mask = ad::sigmoid(ad::mul_scalar(arg, 1.0 / tau));
    } else {
      const double inv_tau = 1.0 / tau;
      std::vector<double> mv(b_n * k);
      for (std::size_t i = 0; i < b_n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          mv[i * k + j] =
              sigmoid_num((gdiff[i * k + j] + -rates.logits[j]) * inv_tau);
        }
      }
      mask = tape.leaf(b_n, k, mv, false);
    }

    // Noise scaled by b(w) = 1/eps'(w); the unit draws are constants, the
    // scale is a function of w (Property 1 reparameterization).
    ad::Tensor noise;
    if (w_grad && paths.noise_path) {
      const double em1 = std::expm1(cfg.epsilon.epsilon());
      ad::Tensor w_row = ad::sigmoid(fo.w_leaf);
      ad::Tensor one_m_w = ad::add_scalar(ad::mul_scalar(w_row, -1.0), 1.0);
      ad::Tensor ratio = ad::div(tape.constant(1, k, em1), one_m_w);
      ad::Tensor epsp = ad::log(ad::add_scalar(ratio, 1.0));
      ad::Tensor b_row = ad::div(tape.constant(1, k, 1.0), epsp);
      ad::Tensor b_bcast = ad::add_rowvec(tape.constant(b_n, k, 0.0), b_row);
      noise = ad::mul(tape.leaf(b_n, k, draws.t, false), b_bcast);
    } else {
      const auto pfb = privacy::allocate_budget(rates, cfg.epsilon);
      std::vector<double> nv(b_n * k);
      for (std::size_t i = 0; i < b_n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          nv[i * k + j] = draws.t[i * k + j] * pfb.scales[j];
        }
      }
      noise = tape.leaf(b_n, k, nv, false);
    }
    released = ad::add(ad::mul(fnorm, mask), noise);
  }

  ad::Tensor logits = model::classify_graph(tape, fo.gm, released);
  const std::vector<int> labels = batch_labels(batch);
  fo.loss = ad::cross_entropy(logits, labels);
  fo.correct = count_correct(logits, labels);
  return fo;
}

std::array<double, 3> block_means(const std::vector<double>& v,
                                  std::size_t d_feat) {
  std::array<double, 3> out{};
  for (std::size_t blk = 0; blk < 3; ++blk) {
    double s = 0.0;
    for (std::size_t j = 0; j < d_feat; ++j) s += v[blk * d_feat + j];
    out[blk] = s / static_cast<double>(d_feat);
  }
  return out;
}

void validate_cfg(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(cfg.lr_p >= 0.0) || !(cfg.lr_w >= 0.0)) {
    throw ConfigError("learning rates must be >= 0");
  }
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw ConfigError("momentum must be in [0,1)");
  }
  if (cfg.model_steps_per_batch == 0 || cfg.rate_steps_per_batch == 0) {
    throw ConfigError("alternation step counts must be positive");
  }
  const privacy::DropoutRates bounds;
  if (!(cfg.init_rate >= bounds.w_min && cfg.init_rate <= bounds.w_max)) {
    throw ConfigError("init_rate must lie in [w_min, w_max]");
  }
}

}  // namespace

DrawSet sample_draws(std::size_t n, RandomStream& rng) {
  DrawSet d;
  d.g1 = gumbel::sample_gumbel(n, rng);
  d.g2 = gumbel::sample_gumbel(n, rng);
  d.t = privacy::sample_unit_laplace(n, rng);
  return d;
}

TrainerState make_trainer_state(model::ModelState st) {
  TrainerState ts;
  const std::size_t k = st.cfg.feature_dim();
  ts.vel_p.assign(st.params.size(), 0.0);
  ts.vel_w.assign(k, 0.0);
  ts.rates.logits.assign(k, 0.0);  // w = 0.5 start
  ts.model = std::move(st);
  return ts;
}

std::vector<double> feature_scales(const privacy::DropoutRates& rates,
                                   const privacy::PrivacyBudget& eps) {
  const auto pfb = privacy::allocate_budget(rates, eps);
  std::vector<double> s(pfb.scales.size());
  for (std::size_t j = 0; j < s.size(); ++j) {
    s[j] = 1.0 / std::sqrt(1.0 + 2.0 * pfb.scales[j] * pfb.scales[j]);
  }
  return s;
}

StepStats step_model(const std::vector<const data::ModalitySample*>& batch,
                     TrainerState& ts, const TrainConfig& cfg,
                     const DrawSet& draws, double tau) {
  validate_cfg(cfg);
  if (!cfg.non_private) {
    ts.model.head_scale = feature_scales(ts.rates, cfg.epsilon);
  }
  ad::Tape tape(cfg.policy);
  ForwardOut fo = build_forward(tape, batch, ts.model, ts.rates, cfg, draws,
                                tau, true, false, {});
  const double loss = fo.loss.item();
  if (!std::isfinite(loss)) {
    throw std::runtime_error("step_model: non-finite loss, training diverged");
  }
  tape.backward(fo.loss);
  auto& params = ts.model.params;
  if (ts.vel_p.size() != params.size()) {
    throw ConfigError("trainer state does not match model layout");
  }
  const auto& named = ts.model.layout.named;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& span = named[i].second;
    const auto& g = fo.gm.leaves[i].grad();
    for (std::size_t j = 0; j < span.size(); ++j) {
      const std::size_t ix = span.offset + j;
      ts.vel_p[ix] = cfg.momentum * ts.vel_p[ix] + g[j];
      params[ix] -= cfg.lr_p * ts.vel_p[ix];
    }
  }
  return {loss, fo.correct};
}

StepStats step_rates(const std::vector<const data::ModalitySample*>& batch,
                     TrainerState& ts, const TrainConfig& cfg,
                     const DrawSet& draws, double tau,
                     const StepRatesOptions& paths) {
  validate_cfg(cfg);
  if (cfg.non_private) {
    throw ConfigError("step_rates has no effect in non-private mode");
  }
  // Entry refresh only: the scales stay frozen statistics inside this step,
  // so the loss differentiated here never depends on them through w.
  ts.model.head_scale = feature_scales(ts.rates, cfg.epsilon);
  ad::Tape tape(cfg.policy);
  ForwardOut fo = build_forward(tape, batch, ts.model, ts.rates, cfg, draws,
                                tau, false, true, paths);
  const double loss = fo.loss.item();
  if (!std::isfinite(loss)) {
    throw std::runtime_error("step_rates: non-finite loss, training diverged");
  }
  tape.backward(fo.loss);
  const auto& g = fo.w_leaf.grad();
  auto& logits = ts.rates.logits;
  const double lo = logit_of(ts.rates.w_min);
  const double hi = logit_of(ts.rates.w_max);
  for (std::size_t j = 0; j < logits.size(); ++j) {
    ts.vel_w[j] = cfg.momentum * ts.vel_w[j] + g[j];
    logits[j] -= cfg.lr_w * ts.vel_w[j];
    logits[j] = std::min(hi, std::max(lo, logits[j]));
  }
  return {loss, fo.correct};
}

double relaxed_loss(const std::vector<const data::ModalitySample*>& batch,
                    const model::ModelState& st,
                    const privacy::DropoutRates& rates, const TrainConfig& cfg,
                    const DrawSet& draws, double tau) {
  ad::Tape tape(cfg.policy);
  ForwardOut fo =
      build_forward(tape, batch, st, rates, cfg, draws, tau, false, false, {});
  return fo.loss.item();
}

EvalResult evaluate(const std::vector<data::ModalitySample>& split,
                    const model::ModelState& st,
                    const privacy::DropoutRates& rates,
                    const privacy::PrivacyBudget& eps, bool non_private,
                    RandomStream& rng, const ExecPolicy& policy) {
  if (split.empty()) throw DataError("evaluate: empty split");
  const std::size_t k = st.cfg.feature_dim();
  std::vector<int> preds, labels;
  preds.reserve(split.size());
  labels.reserve(split.size());
  double loss_sum = 0.0;
  const std::size_t chunk = 64;
  for (std::size_t base = 0; base < split.size(); base += chunk) {
    const std::size_t end = std::min(base + chunk, split.size());
    std::vector<const data::ModalitySample*> batch;
    batch.reserve(end - base);
    for (std::size_t i = base; i < end; ++i) batch.push_back(&split[i]);
    ad::Tape tape(policy);
    model::GraphModel gm = model::bind_params(tape, st, false);
    model::FeatureGraph fg = model::build_feature_graph(tape, gm, batch);
    ad::Tensor fnorm = model::apply_norm_graph(tape, fg.raw, st.norm);
    const auto& fv = fnorm.value();
    std::vector<double> released(fv.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
      std::vector<double> row(fv.begin() + r * k, fv.begin() + (r + 1) * k);
      if (!non_private) {
        privacy::FeatureVector f{std::move(row), true};
        row = privacy::release(f, rates, eps, rng);
      }
      std::copy(row.begin(), row.end(), released.begin() + r * k);
    }
    ad::Tensor rel = tape.leaf(batch.size(), k, released, false);
    ad::Tensor logits = model::classify_graph(tape, gm, rel);
    const std::vector<int> chunk_labels = batch_labels(batch);
    loss_sum += ad::cross_entropy(logits, chunk_labels).item() *
                static_cast<double>(batch.size());
    const auto& lv = logits.value();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (lv[r * logits.cols() + j] > lv[r * logits.cols() + best]) best = j;
      }
      preds.push_back(static_cast<int>(best));
      labels.push_back(chunk_labels[r]);
    }
  }
  EvalResult ev;
  ev.accuracy = accuracy(preds, labels);
  ev.macro_f1 = macro_f1(preds, labels,
                         static_cast<int>(st.cfg.classes));
  ev.loss = loss_sum / static_cast<double>(split.size());
  ev.predictions = std::move(preds);
  return ev;
}

double accuracy(const std::vector<int>& preds,
                const std::vector<int>& labels) {
  if (preds.empty() || preds.size() != labels.size()) {
    throw ConfigError("accuracy: prediction/label size mismatch");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                int classes) {
  if (preds.empty() || preds.size() != labels.size() || classes < 2) {
    throw ConfigError("macro_f1: invalid inputs");
  }
  double f1_sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] < 0 || preds[i] >= classes || labels[i] < 0 ||
          labels[i] >= classes) {
        throw ConfigError("macro_f1: class index out of range");
      }
      if (preds[i] == c && labels[i] == c) ++tp;
      if (preds[i] == c && labels[i] != c) ++fp;
      if (preds[i] != c && labels[i] == c) ++fn;
    }
    const double prec =
        tp + fp == 0 ? 0.0
                     : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double rec =
        tp + fn == 0 ? 0.0
                     : static_cast<double>(tp) / static_cast<double>(tp + fn);
    f1_sum += prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
  }
  return f1_sum / static_cast<double>(classes);
}

TrainResult train(const std::vector<data::ModalitySample>& dataset,
                  const TrainConfig& cfg) {
  validate_cfg(cfg);
  RandomStream master(cfg.seed);
  auto [train_set, test_set] =
      data::split(dataset, cfg.train_frac, master.fork(101).seed());
  model::ModelState st = model::init_model(
      cfg.model, train_set[0].eeg_channels, master.fork(202).seed());
  st.tokenizer = model::fit_tokenizer(train_set, cfg.model.vocab_bins);
  TrainerState ts = make_trainer_state(std::move(st));
  ts.rates.logits.assign(ts.rates.size(), logit_of(cfg.init_rate));
  if (!cfg.non_private) {
    ts.model.head_scale = feature_scales(ts.rates, cfg.epsilon);
  }
  // Fit bounds up front so a zero-epoch run still returns a usable model.
  ts.model.norm = model::fit_norm_bounds(train_set, ts.model, cfg.policy);
  const std::size_t k = cfg.model.feature_dim();

  TrainResult out;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    // Bounds are refit from the current parameters, then frozen for the epoch.
    ts.model.norm = model::fit_norm_bounds(train_set, ts.model, cfg.policy);
    const double tau = gumbel::anneal(cfg.gumbel, static_cast<int>(e));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    RandomStream srng = master.fork(1000 + e);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(srng.uniform() *
                                               static_cast<double>(i + 1));
      j = std::min(j, i);
      std::swap(order[i], order[j]);
    }
    RandomStream drng = master.fork(5000 + e);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t base = 0; base < order.size();
         base += cfg.batch_size) {
      const std::size_t end =
          std::min(base + cfg.batch_size, order.size());
      std::vector<const data::ModalitySample*> batch;
      batch.reserve(end - base);
      for (std::size_t i = base; i < end; ++i) {
        batch.push_back(&train_set[order[i]]);
      }
      for (std::size_t s = 0; s < cfg.model_steps_per_batch; ++s) {
        DrawSet d;
        if (!cfg.non_private) d = sample_draws(batch.size() * k, drng);
        const StepStats ss = step_model(batch, ts, cfg, d, tau);
        loss_sum += ss.loss * static_cast<double>(batch.size());
        correct += ss.correct;
        seen += batch.size();
      }
      if (!cfg.non_private && !cfg.freeze_rates) {
        for (std::size_t s = 0; s < cfg.rate_steps_per_batch; ++s) {
          DrawSet d = sample_draws(batch.size() * k, drng);
          step_rates(batch, ts, cfg, d, tau);
        }
      }
    }
    RandomStream erng = master.fork(9000 + e);
    if (!cfg.non_private) {
      ts.model.head_scale = feature_scales(ts.rates, cfg.epsilon);
    }
    const EvalResult ev = evaluate(test_set, ts.model, ts.rates, cfg.epsilon,
                                   cfg.non_private, erng, cfg.policy);
    EpochMetrics m;
    m.epoch = e;
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.test_acc = ev.accuracy;
    m.test_loss = ev.loss;
    m.macro_f1 = ev.macro_f1;
    m.mean_rate = block_means(ts.rates.rates(), cfg.model.d_feat);
    if (cfg.non_private) {
      m.mean_scale = {0.0, 0.0, 0.0};
    } else {
      m.mean_scale = block_means(
          privacy::allocate_budget(ts.rates, cfg.epsilon).scales,
          cfg.model.d_feat);
    }
    out.metrics.push_back(m);
  }
  out.model = std::move(ts.model);
  out.rates = std::move(ts.rates);
  return out;
}

AllocationReport allocation_report(
    const model::ModelState& st, const privacy::DropoutRates& rates,
    const privacy::PrivacyBudget& eps,
    const std::vector<data::ModalitySample>& dataset,
    const ExecPolicy& policy) {
  const std::size_t k = st.cfg.feature_dim();
  if (rates.size() != k) {
    throw ConfigError("allocation_report: rates do not match feature count");
  }
  if (dataset.empty()) throw DataError("allocation_report: empty dataset");
  AllocationReport rep;
  rep.d_feat = st.cfg.d_feat;
  rep.w = rates.rates();
  rep.b = privacy::allocate_budget(rates, eps).scales;
  rep.mean_abs_f.assign(k, 0.0);
  const std::size_t chunk = 64;
  for (std::size_t base = 0; base < dataset.size(); base += chunk) {
    const std::size_t end = std::min(base + chunk, dataset.size());
    std::vector<const data::ModalitySample*> batch;
    for (std::size_t i = base; i < end; ++i) batch.push_back(&dataset[i]);
    ad::Tape tape(policy);
    model::GraphModel gm = model::bind_params(tape, st, false);
    model::FeatureGraph fg = model::build_feature_graph(tape, gm, batch);
    ad::Tensor fnorm = model::apply_norm_graph(tape, fg.raw, st.norm);
    const auto& v = fnorm.value();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      for (std::size_t j = 0; j < k; ++j) {
        rep.mean_abs_f[j] += std::fabs(v[r * k + j]);
      }
    }
  }
  for (double& x : rep.mean_abs_f) x /= static_cast<double>(dataset.size());
  rep.block_w = block_means(rep.w, rep.d_feat);
  rep.block_b = block_means(rep.b, rep.d_feat);
  rep.block_f = block_means(rep.mean_abs_f, rep.d_feat);
  return rep;
}

}  // namespace dpmld::trainer
