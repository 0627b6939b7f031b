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

#include "dpmld/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dpmld/errors.hpp"
#include "dpmld/random.hpp"

namespace dpmld::model {

namespace {

void validate_config(const ModelConfig& cfg) {
  if (cfg.d_model == 0 || cfg.d_feat == 0 || cfg.d_ff == 0 ||
      cfg.cls_hidden == 0) {
    throw ConfigError("model dims must be positive");
  }
  if (cfg.d_k != cfg.d_model) {
    throw ConfigError(
        "d_k must equal d_model (attention output feeds a residual)");
  }
  if (cfg.decoder_layers == 0 || cfg.encoder_layers == 0) {
    throw ConfigError("layer counts must be >= 1");
  }
  if (cfg.vocab_bins < 2) throw ConfigError("vocab_bins must be >= 2");
  if (cfg.patch == 0 || cfg.image_hw % cfg.patch != 0) {
    throw ConfigError("image_hw " + std::to_string(cfg.image_hw) +
                      " is not divisible by patch " +
                      std::to_string(cfg.patch));
  }
  if (cfg.classes < 2) throw ConfigError("classes must be >= 2");
}

struct LayoutBuilder {
  ModelLayout* layout;
  std::size_t off = 0;
  ParamSpan add(const std::string& name, std::size_t r, std::size_t c) {
    ParamSpan s{off, r, c, static_cast<int>(layout->named.size())};
    off += r * c;
    layout->named.emplace_back(name, s);
    return s;
  }
  AttentionBlockSpans add_block(const std::string& prefix,
                                const ModelConfig& cfg) {
    AttentionBlockSpans b;
    b.wq = add(prefix + ".wq", cfg.d_model, cfg.d_k);
    b.wk = add(prefix + ".wk", cfg.d_model, cfg.d_k);
    b.wv = add(prefix + ".wv", cfg.d_model, cfg.d_k);
    b.w1 = add(prefix + ".w1", cfg.d_model, cfg.d_ff);
    b.b1 = add(prefix + ".b1", 1, cfg.d_ff);
    b.w2 = add(prefix + ".w2", cfg.d_ff, cfg.d_model);
    b.b2 = add(prefix + ".b2", 1, cfg.d_model);
    return b;
  }
};

std::vector<double> positional_encoding(std::size_t t_len, std::size_t d) {
  std::vector<double> pe(t_len * d);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const double expo =
          static_cast<double>(j - j % 2) / static_cast<double>(d);
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, expo);
      pe[t * d + j] = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Matrix mat_of(const ad::Tensor& t) {
  return Matrix{t.rows(), t.cols(), t.value()};
}

std::vector<double> row_of(const ad::Tensor& t, std::size_t r) {
  const auto& v = t.value();
  const std::size_t m = t.cols();
  return std::vector<double>(v.begin() + r * m, v.begin() + (r + 1) * m);
}

ad::Tensor attn_core_graph(const GraphModel& gm, const AttentionBlockSpans& b,
                           const ad::Tensor& q_src, const ad::Tensor& kv_src,
                           std::size_t q_len, std::size_t k_len) {
  const double scale =
      1.0 / std::sqrt(static_cast<double>(gm.state->cfg.d_k));
  ad::Tensor q = ad::matmul(q_src, gm.leaf(b.wq));
  ad::Tensor k = ad::matmul(kv_src, gm.leaf(b.wk));
  ad::Tensor v = ad::matmul(kv_src, gm.leaf(b.wv));
  ad::Tensor s = ad::mul_scalar(ad::grouped_attn_scores(q, k, q_len, k_len),
                                scale);
  ad::Tensor w = ad::softmax(s, 1);
  return ad::grouped_attn_apply(w, v, q_len, k_len);
}

ad::Tensor ffn_graph(const GraphModel& gm, const AttentionBlockSpans& b,
                     const ad::Tensor& x) {
  ad::Tensor h =
      ad::tanh(ad::add_rowvec(ad::matmul(x, gm.leaf(b.w1)), gm.leaf(b.b1)));
  return ad::add_rowvec(ad::matmul(h, gm.leaf(b.w2)), gm.leaf(b.b2));
}

// Self-attention block without a residual around the attention core, so
// zeroed value projections make the output token-independent.
ad::Tensor encoder_block(const GraphModel& gm, const AttentionBlockSpans& b,
                         const ad::Tensor& x, std::size_t t_len) {
  ad::Tensor a = attn_core_graph(gm, b, x, x, t_len, t_len);
  return ad::layer_normalize(ad::add(a, ffn_graph(gm, b, a)));
}

ad::Tensor decoder_block(const GraphModel& gm, const AttentionBlockSpans& b,
                         const ad::Tensor& q, const ad::Tensor& kv,
                         std::size_t q_len, std::size_t k_len) {
  ad::Tensor a = attn_core_graph(gm, b, q, kv, q_len, k_len);
  ad::Tensor h1 = ad::layer_normalize(ad::add(q, a));
  return ad::layer_normalize(ad::add(h1, ffn_graph(gm, b, h1)));
}

ad::Tensor project_feat(const GraphModel& gm, const ad::Tensor& pooled,
                        const ParamSpan& w, const ParamSpan& bias) {
  return ad::tanh(
      ad::add_rowvec(ad::matmul(pooled, gm.leaf(w)), gm.leaf(bias)));
}

struct Pieces {
  ad::Tensor h_e;  // [B*T x d_model] embedded EEG tokens (+ positions)
  ad::Tensor h_o;  // [B*np x d_model] patch embeddings
  FeatureGraph fg;
};

Pieces build_pieces(ad::Tape& tape, const GraphModel& gm,
                    const std::vector<const data::ModalitySample*>& batch) {
  const ModelState& st = *gm.state;
  const ModelConfig& cfg = st.cfg;
  if (batch.empty()) throw ConfigError("empty batch");
  const std::size_t b_n = batch.size();
  const std::size_t t_n = batch[0]->timesteps;
  const std::size_t c_n = batch[0]->eeg_channels;
  for (const auto* s : batch) {
    if (s->timesteps != t_n || s->eeg_channels != c_n ||
        s->om_dims != batch[0]->om_dims) {
      throw DataError("batch mixes sample shapes");
    }
  }
  if (c_n != st.eeg_channels) {
    throw DataError("sample has " + std::to_string(c_n) +
                    " channels, model expects " +
                    std::to_string(st.eeg_channels));
  }
  if (st.tokenizer.lo.size() != c_n) {
    throw ConfigError("tokenizer not fitted for this model");
  }

  // EEG: per-channel token embeddings summed per timestep, plus positions.
  std::vector<std::vector<int>> ids(c_n, std::vector<int>(b_n * t_n));
  for (std::size_t b = 0; b < b_n; ++b) {
    const auto tok = tokenize(*batch[b], st.tokenizer);
    for (std::size_t c = 0; c < c_n; ++c) {
      for (std::size_t t = 0; t < t_n; ++t) {
        ids[c][b * t_n + t] = tok[c * t_n + t];
      }
    }
  }
  ad::Tensor h = ad::embed(gm.leaf(st.layout.embed_table), ids[0]);
  for (std::size_t c = 1; c < c_n; ++c) {
    h = ad::add(h, ad::embed(gm.leaf(st.layout.embed_table), ids[c]));
  }
  const std::vector<double> pe = positional_encoding(t_n, cfg.d_model);
  std::vector<double> pe_tiled(b_n * t_n * cfg.d_model);
  for (std::size_t b = 0; b < b_n; ++b) {
    std::copy(pe.begin(), pe.end(),
              pe_tiled.begin() + b * t_n * cfg.d_model);
  }
  ad::Tensor h_e =
      ad::add(h, tape.leaf(b_n * t_n, cfg.d_model, pe_tiled, false));

  ad::Tensor x = h_e;
  for (const auto& blk : st.layout.encoder) {
    x = encoder_block(gm, blk, x, t_n);
  }
  ad::Tensor f_e = project_feat(gm, ad::block_mean_rows(x, t_n),
                                st.layout.proj_e_w, st.layout.proj_e_b);

  // OM: image -> patches -> per-patch perceptron.
  const std::size_t grid = cfg.image_hw / cfg.patch;
  const std::size_t np = grid * grid;
  const std::size_t pp = cfg.patch * cfg.patch;
  std::vector<double> pv(b_n * np * pp);
  for (std::size_t b = 0; b < b_n; ++b) {
    const Matrix img = transform_om(*batch[b], cfg);
    const Matrix pats = patchify(img, cfg.patch);
    std::copy(pats.v.begin(), pats.v.end(), pv.begin() + b * np * pp);
  }
  ad::Tensor patches = tape.leaf(b_n * np, pp, pv, false);
  // SiLU rather than tanh: an odd activation maps a zero-mean variance
  // shift to nothing once patches are mean-pooled, while SiLU's asymmetry
  // turns extra variance into a mean offset the pooled feature keeps.
  const ad::Tensor pre1 = ad::add_rowvec(
      ad::matmul(patches, gm.leaf(st.layout.patch_w1)),
      gm.leaf(st.layout.patch_b1));
  ad::Tensor pm1 = ad::mul(pre1, ad::sigmoid(pre1));
  ad::Tensor h_o = ad::tanh(ad::add_rowvec(
      ad::matmul(pm1, gm.leaf(st.layout.patch_w2)),
      gm.leaf(st.layout.patch_b2)));
  ad::Tensor f_o = project_feat(gm, ad::block_mean_rows(h_o, np),
                                st.layout.proj_o_w, st.layout.proj_o_b);

  // Cross-attention decoder: OM patches query EEG token embeddings.
  ad::Tensor q = h_o;
  for (const auto& blk : st.layout.decoder) {
    q = decoder_block(gm, blk, q, h_e, np, t_n);
  }
  ad::Tensor f_c = project_feat(gm, ad::block_mean_rows(q, np),
                                st.layout.proj_c_w, st.layout.proj_c_b);

  FeatureGraph fg{f_e, f_o, f_c, ad::concat({f_e, f_o, f_c}, 1)};
  return Pieces{h_e, h_o, fg};
}

}  // namespace

TokenizerSpec fit_tokenizer(const std::vector<data::ModalitySample>& train,
                            std::size_t bins) {
  if (train.empty()) throw DataError("fit_tokenizer: empty training split");
  if (bins < 2) throw ConfigError("fit_tokenizer: need at least 2 bins");
  const std::size_t c_n = train[0].eeg_channels;
  TokenizerSpec spec;
  spec.bins = bins;
  spec.lo.assign(c_n, std::numeric_limits<double>::infinity());
  spec.hi.assign(c_n, -std::numeric_limits<double>::infinity());
  for (const auto& s : train) {
    if (s.eeg_channels != c_n) throw DataError("fit_tokenizer: mixed shapes");
    for (std::size_t c = 0; c < c_n; ++c) {
      for (std::size_t t = 0; t < s.timesteps; ++t) {
        const double v = s.eeg[c * s.timesteps + t];
        spec.lo[c] = std::min(spec.lo[c], v);
        spec.hi[c] = std::max(spec.hi[c], v);
      }
    }
  }
  return spec;
}

std::vector<int> tokenize(const data::ModalitySample& s,
                          const TokenizerSpec& spec) {
  if (spec.lo.size() != s.eeg_channels) {
    throw ConfigError("tokenize: tokenizer fitted for " +
                      std::to_string(spec.lo.size()) + " channels, sample has " +
                      std::to_string(s.eeg_channels));
  }
  const double v_bins = static_cast<double>(spec.bins);
  std::vector<int> out(s.eeg_channels * s.timesteps);
  for (std::size_t c = 0; c < s.eeg_channels; ++c) {
    const double lo = spec.lo[c];
    const double range = spec.hi[c] - lo;
    for (std::size_t t = 0; t < s.timesteps; ++t) {
      int bin = 0;
      if (range >= 1e-12) {
        const double pos = (s.eeg[c * s.timesteps + t] - lo) / range * v_bins;
        bin = static_cast<int>(std::floor(pos));
        bin = std::max(0, std::min(bin, static_cast<int>(spec.bins) - 1));
      }
      out[c * s.timesteps + t] = static_cast<int>(c * spec.bins) + bin;
    }
  }
  return out;
}

ModelLayout make_layout(const ModelConfig& cfg, std::size_t eeg_channels) {
  validate_config(cfg);
  if (eeg_channels == 0) throw ConfigError("need at least one EEG channel");
  ModelLayout layout;
  LayoutBuilder b{&layout};
  layout.embed_table =
      b.add("embed_table", eeg_channels * cfg.vocab_bins, cfg.d_model);
  for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
    layout.encoder.push_back(b.add_block("enc" + std::to_string(i), cfg));
  }
  layout.patch_w1 = b.add("patch.w1", cfg.patch * cfg.patch, cfg.d_ff);
  layout.patch_b1 = b.add("patch.b1", 1, cfg.d_ff);
  layout.patch_w2 = b.add("patch.w2", cfg.d_ff, cfg.d_model);
  layout.patch_b2 = b.add("patch.b2", 1, cfg.d_model);
  for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
    layout.decoder.push_back(b.add_block("dec" + std::to_string(i), cfg));
  }
  layout.proj_e_w = b.add("proj_e.w", cfg.d_model, cfg.d_feat);
  layout.proj_e_b = b.add("proj_e.b", 1, cfg.d_feat);
  layout.proj_o_w = b.add("proj_o.w", cfg.d_model, cfg.d_feat);
  layout.proj_o_b = b.add("proj_o.b", 1, cfg.d_feat);
  layout.proj_c_w = b.add("proj_c.w", cfg.d_model, cfg.d_feat);
  layout.proj_c_b = b.add("proj_c.b", 1, cfg.d_feat);
  layout.cls_w1 = b.add("cls.w1", cfg.feature_dim(), cfg.cls_hidden);
  layout.cls_b1 = b.add("cls.b1", 1, cfg.cls_hidden);
  layout.cls_w2 = b.add("cls.w2", cfg.cls_hidden, cfg.classes);
  layout.cls_b2 = b.add("cls.b2", 1, cfg.classes);
  layout.total = b.off;
  return layout;
}

ModelState init_model(const ModelConfig& cfg, std::size_t eeg_channels,
                      std::uint64_t seed) {
  ModelState st;
  st.cfg = cfg;
  st.eeg_channels = eeg_channels;
  st.layout = make_layout(cfg, eeg_channels);
  st.params.assign(st.layout.total, 0.0);
  RandomStream rng(seed);
  for (const auto& [name, span] : st.layout.named) {
    if (span.rows == 1) continue;  // biases start at zero
    double a;
    if (name == "embed_table") {
      a = std::sqrt(3.0 / static_cast<double>(cfg.d_model));
    } else {
      a = std::sqrt(6.0 / static_cast<double>(span.rows + span.cols));
    }
    for (std::size_t i = 0; i < span.size(); ++i) {
      st.params[span.offset + i] = a * (2.0 * rng.uniform() - 1.0);
    }
  }
  st.head_scale.assign(cfg.feature_dim(), 1.0);
  return st;
}

GraphModel bind_params(ad::Tape& tape, const ModelState& state,
                       bool needs_grad) {
  GraphModel gm;
  gm.state = &state;
  gm.leaves.reserve(state.layout.named.size());
  for (const auto& [name, span] : state.layout.named) {
    (void)name;
    gm.leaves.push_back(tape.leaf(span.rows, span.cols,
                                  state.params.data() + span.offset,
                                  needs_grad));
  }
  return gm;
}

FeatureGraph build_feature_graph(
    ad::Tape& tape, const GraphModel& gm,
    const std::vector<const data::ModalitySample*>& batch) {
  return build_pieces(tape, gm, batch).fg;
}

ad::Tensor apply_norm_graph(ad::Tape& tape, const ad::Tensor& raw,
                            const NormBounds& norm) {
  const std::size_t k = raw.cols();
  if (norm.lo.size() != k || norm.hi.size() != k) {
    throw ConfigError("normalization bounds not fitted for " +
                      std::to_string(k) + " features");
  }
  std::vector<double> neg_lo(k), inv(k);
  for (std::size_t i = 0; i < k; ++i) {
    neg_lo[i] = -norm.lo[i];
    const double range = norm.hi[i] - norm.lo[i];
    inv[i] = range < 1e-12 ? 0.0 : 1.0 / range;
  }
  ad::Tensor shifted = ad::add_rowvec(raw, tape.leaf(1, k, neg_lo, false));
  ad::Tensor inv_b = ad::add_rowvec(tape.constant(raw.rows(), k, 0.0),
                                    tape.leaf(1, k, inv, false));
  return ad::clamp(ad::mul(shifted, inv_b), 0.0, 1.0);
}

ad::Tensor classify_graph(ad::Tape& tape, const GraphModel& gm,
                          const ad::Tensor& released) {
  const ModelState& st = *gm.state;
  const std::size_t k = st.cfg.feature_dim();
  if (released.cols() != k) {
    throw ConfigError("classify: expected " + std::to_string(k) +
                      " features, got " + std::to_string(released.cols()));
  }
  if (!st.head_scale.empty() && st.head_scale.size() != k) {
    throw ConfigError("head_scale sized " +
                      std::to_string(st.head_scale.size()) + " for " +
                      std::to_string(k) + " features");
  }
  ad::Tensor x = released;
  if (!st.head_scale.empty()) {
    ad::Tensor s_row = tape.leaf(1, k, st.head_scale, false);
    x = ad::mul(released,
                ad::add_rowvec(tape.constant(released.rows(), k, 0.0), s_row));
  }
  // SiLU keeps head gradients alive when large noise pushes pre-activations
  // far from zero, where tanh would saturate.
  const ad::Tensor pre =
      ad::add_rowvec(ad::matmul(x, gm.leaf(st.layout.cls_w1)),
                     gm.leaf(st.layout.cls_b1));
  const ad::Tensor h = ad::mul(pre, ad::sigmoid(pre));
  return ad::add_rowvec(ad::matmul(h, gm.leaf(st.layout.cls_w2)),
                        gm.leaf(st.layout.cls_b2));
}

NormBounds fit_norm_bounds(const std::vector<data::ModalitySample>& train,
                           const ModelState& state, const ExecPolicy& policy) {
  if (train.empty()) throw DataError("fit_norm_bounds: empty split");
  const std::size_t k = state.cfg.feature_dim();
  NormBounds nb;
  nb.lo.assign(k, std::numeric_limits<double>::infinity());
  nb.hi.assign(k, -std::numeric_limits<double>::infinity());
  const std::size_t chunk = 64;
  for (std::size_t base = 0; base < train.size(); base += chunk) {
    const std::size_t end = std::min(base + chunk, train.size());
    std::vector<const data::ModalitySample*> batch;
    batch.reserve(end - base);
    for (std::size_t i = base; i < end; ++i) batch.push_back(&train[i]);
    ad::Tape tape(policy);
    GraphModel gm = bind_params(tape, state, false);
    FeatureGraph fg = build_feature_graph(tape, gm, batch);
    const auto& v = fg.raw.value();
    for (std::size_t r = 0; r < fg.raw.rows(); ++r) {
      for (std::size_t j = 0; j < k; ++j) {
        nb.lo[j] = std::min(nb.lo[j], v[r * k + j]);
        nb.hi[j] = std::max(nb.hi[j], v[r * k + j]);
      }
    }
  }
  return nb;
}

Matrix transform_eeg(const data::ModalitySample& s, const ModelState& st) {
  if (s.eeg.empty()) throw DataError("transform_eeg: empty input");
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  Pieces p = build_pieces(tape, gm, {&s});
  return mat_of(p.h_e);
}

std::vector<double> encode_eeg(const Matrix& token_embeddings,
                               const ModelState& st) {
  if (token_embeddings.rows == 0) {
    throw DataError("encode_eeg: empty token sequence");
  }
  if (token_embeddings.cols != st.cfg.d_model) {
    throw ConfigError("encode_eeg: embeddings must have d_model columns");
  }
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  ad::Tensor x = tape.leaf(token_embeddings.rows, token_embeddings.cols,
                           token_embeddings.v, false);
  for (const auto& blk : st.layout.encoder) {
    x = encoder_block(gm, blk, x, token_embeddings.rows);
  }
  ad::Tensor f_e =
      project_feat(gm, ad::block_mean_rows(x, token_embeddings.rows),
                   st.layout.proj_e_w, st.layout.proj_e_b);
  return row_of(f_e, 0);
}

Matrix transform_om(const data::ModalitySample& s, const ModelConfig& cfg) {
  if (s.om.empty()) throw DataError("transform_om: empty input");
  const std::size_t h = cfg.image_hw, w = cfg.image_hw;
  const std::size_t d_n = s.om_dims, t_n = s.timesteps;
  if (h % d_n != 0) {
    throw ConfigError("image height " + std::to_string(h) +
                      " is not divisible by " + std::to_string(d_n) +
                      " OM dims");
  }
  const std::size_t rows_per = h / d_n;
  Matrix img{h, w, std::vector<double>(h * w)};
  for (std::size_t d = 0; d < d_n; ++d) {
    for (std::size_t j = 0; j < w; ++j) {
      double v;
      if (t_n == 1 || w == 1) {
        v = s.om[d * t_n];
      } else {
        const double p = static_cast<double>(j) *
                         static_cast<double>(t_n - 1) /
                         static_cast<double>(w - 1);
        const std::size_t i0 =
            std::min(static_cast<std::size_t>(p), t_n - 2);
        const double frac = p - static_cast<double>(i0);
        v = (1.0 - frac) * s.om[d * t_n + i0] + frac * s.om[d * t_n + i0 + 1];
      }
      for (std::size_t r = d * rows_per; r < (d + 1) * rows_per; ++r) {
        img.v[r * w + j] = v;
      }
    }
  }
  return img;
}

Matrix patchify(const Matrix& img, std::size_t patch) {
  if (patch == 0 || img.rows % patch != 0 || img.cols % patch != 0) {
    throw ConfigError("patchify: " + std::to_string(img.rows) + "x" +
                      std::to_string(img.cols) +
                      " image is not divisible into " +
                      std::to_string(patch) + "-patches");
  }
  const std::size_t gr = img.rows / patch, gc = img.cols / patch;
  Matrix out{gr * gc, patch * patch,
             std::vector<double>(gr * gc * patch * patch)};
  for (std::size_t by = 0; by < gr; ++by) {
    for (std::size_t bx = 0; bx < gc; ++bx) {
      const std::size_t pi = by * gc + bx;
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          out.v[pi * patch * patch + py * patch + px] =
              img.v[(by * patch + py) * img.cols + bx * patch + px];
        }
      }
    }
  }
  return out;
}

Matrix om_patch_embed(const data::ModalitySample& s, const ModelState& st) {
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  Pieces p = build_pieces(tape, gm, {&s});
  return mat_of(p.h_o);
}

std::vector<double> encode_om(const data::ModalitySample& s,
                              const ModelState& st) {
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  Pieces p = build_pieces(tape, gm, {&s});
  return row_of(p.fg.f_o, 0);
}

namespace {

struct CorePieces {
  ad::Tensor weights;
  ad::Tensor core;
};

CorePieces attention_pieces(ad::Tape& tape, const Matrix& q_src,
                            const Matrix& kv_src, const ModelState& st,
                            std::size_t layer) {
  if (layer >= st.layout.decoder.size()) {
    throw ConfigError("decoder layer " + std::to_string(layer) +
                      " out of range");
  }
  if (q_src.cols != st.cfg.d_model || kv_src.cols != st.cfg.d_model) {
    throw ConfigError("attention inputs must have d_model columns, got " +
                      std::to_string(q_src.cols) + " and " +
                      std::to_string(kv_src.cols));
  }
  GraphModel gm = bind_params(tape, st, false);
  const auto& b = st.layout.decoder[layer];
  ad::Tensor ql = tape.leaf(q_src.rows, q_src.cols, q_src.v, false);
  ad::Tensor kl = tape.leaf(kv_src.rows, kv_src.cols, kv_src.v, false);
  ad::Tensor q = ad::matmul(ql, gm.leaf(b.wq));
  ad::Tensor k = ad::matmul(kl, gm.leaf(b.wk));
  ad::Tensor v = ad::matmul(kl, gm.leaf(b.wv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(st.cfg.d_k));
  ad::Tensor s = ad::mul_scalar(
      ad::grouped_attn_scores(q, k, q_src.rows, kv_src.rows), scale);
  ad::Tensor w = ad::softmax(s, 1);
  return CorePieces{w, ad::grouped_attn_apply(w, v, q_src.rows, kv_src.rows)};
}

}  // namespace

Matrix attention_core(const Matrix& q_src, const Matrix& kv_src,
                      const ModelState& st, std::size_t layer) {
  ad::Tape tape;
  return mat_of(attention_pieces(tape, q_src, kv_src, st, layer).core);
}

Matrix attention_weights(const Matrix& q_src, const Matrix& kv_src,
                         const ModelState& st, std::size_t layer) {
  ad::Tape tape;
  return mat_of(attention_pieces(tape, q_src, kv_src, st, layer).weights);
}

Matrix cross_attention_layer(const Matrix& q_src, const Matrix& kv_src,
                             const ModelState& st, std::size_t layer) {
  if (layer >= st.layout.decoder.size()) {
    throw ConfigError("decoder layer " + std::to_string(layer) +
                      " out of range");
  }
  if (q_src.cols != st.cfg.d_model || kv_src.cols != st.cfg.d_model) {
    throw ConfigError("cross_attention_layer: inputs must have d_model cols");
  }
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  ad::Tensor ql = tape.leaf(q_src.rows, q_src.cols, q_src.v, false);
  ad::Tensor kl = tape.leaf(kv_src.rows, kv_src.cols, kv_src.v, false);
  ad::Tensor out = decoder_block(gm, st.layout.decoder[layer], ql, kl,
                                 q_src.rows, kv_src.rows);
  return mat_of(out);
}

std::vector<double> extract_cross_modal(const data::ModalitySample& s,
                                        const ModelState& st) {
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  Pieces p = build_pieces(tape, gm, {&s});
  return row_of(p.fg.f_c, 0);
}

Embeddings forward_features(const data::ModalitySample& s,
                            const ModelState& st) {
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  Pieces p = build_pieces(tape, gm, {&s});
  ad::Tensor f = apply_norm_graph(tape, p.fg.raw, st.norm);
  Embeddings e;
  e.f_e = row_of(p.fg.f_e, 0);
  e.f_o = row_of(p.fg.f_o, 0);
  e.f_c = row_of(p.fg.f_c, 0);
  e.f = row_of(f, 0);
  return e;
}

std::vector<double> classify(const std::vector<double>& f_released,
                             const ModelState& st) {
  if (f_released.size() != st.cfg.feature_dim()) {
    throw ConfigError("classify: expected " +
                      std::to_string(st.cfg.feature_dim()) +
                      " features, got " + std::to_string(f_released.size()));
  }
  ad::Tape tape;
  GraphModel gm = bind_params(tape, st, false);
  ad::Tensor f = tape.leaf(1, f_released.size(), f_released, false);
  return row_of(classify_graph(tape, gm, f), 0);
}

}  // namespace dpmld::model
