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

// Toy two-modality classifier. The EEG-like signal is amplitude-binned into
// per-channel tokens, embedded, and passed through a small self-attention
// encoder; the other modality (OM) is resampled into an image, patch-encoded
// by a two-layer perceptron; a stack of cross-attention decoder blocks (OM
// patches as queries, EEG token embeddings as keys/values) yields cross-modal
// features. The three pooled feature blocks are concatenated and min-max
// normalized into [0,1] so the release mechanism's sensitivity is 1.
//
// Single-sample functions below are thin wrappers over the same batched graph
// builder used in training, so both paths produce identical values.

#ifndef DPMLD_MODEL_HPP_
#define DPMLD_MODEL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "dpmld/autodiff.hpp"
#include "dpmld/data.hpp"

namespace dpmld::model {

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t d_k = 32;  // must equal d_model (residual around attention)
  std::size_t d_feat = 16;
  std::size_t d_ff = 32;
  std::size_t decoder_layers = 3;
  std::size_t encoder_layers = 2;
  std::size_t vocab_bins = 32;  // amplitude bins per EEG channel
  std::size_t patch = 4;
  std::size_t image_hw = 8;  // H = W; divisible by patch and by om_dims
  std::size_t cls_hidden = 32;
  std::size_t classes = 2;
  std::size_t feature_dim() const { return 3 * d_feat; }
};

// Per-channel equal-width amplitude bins fitted on the training split.
struct TokenizerSpec {
  std::size_t bins = 0;
  std::vector<double> lo, hi;  // one entry per channel
};

TokenizerSpec fit_tokenizer(const std::vector<data::ModalitySample>& train,
                            std::size_t bins);

// Token id for (channel c, timestep t) is c*bins + bin(amplitude); values at
// or beyond a channel's fitted range clamp to the first/last bin. Returns
// row-major [channels x timesteps].
std::vector<int> tokenize(const data::ModalitySample& s,
                          const TokenizerSpec& spec);

struct ParamSpan {
  std::size_t offset = 0, rows = 0, cols = 0;
  int idx = -1;  // position in ModelLayout::named and in bound leaves
  std::size_t size() const { return rows * cols; }
};

struct AttentionBlockSpans {
  ParamSpan wq, wk, wv;      // [d_model x d_k]
  ParamSpan w1, b1, w2, b2;  // feed-forward d_model -> d_ff -> d_model
};

struct ModelLayout {
  ParamSpan embed_table;  // [channels*vocab_bins x d_model]
  std::vector<AttentionBlockSpans> encoder;
  ParamSpan patch_w1, patch_b1, patch_w2, patch_b2;
  std::vector<AttentionBlockSpans> decoder;
  ParamSpan proj_e_w, proj_e_b, proj_o_w, proj_o_b, proj_c_w, proj_c_b;
  ParamSpan cls_w1, cls_b1, cls_w2, cls_b2;
  std::vector<std::pair<std::string, ParamSpan>> named;
  std::size_t total = 0;
};

ModelLayout make_layout(const ModelConfig& cfg, std::size_t eeg_channels);

// Per-feature bounds for min-max normalization, frozen between refits. A
// feature with hi - lo below 1e-12 normalizes to 0.
struct NormBounds {
  std::vector<double> lo, hi;
};

struct ModelState {
  ModelConfig cfg;
  std::size_t eeg_channels = 0;
  ModelLayout layout;
  std::vector<double> params;  // flat store, spans per layout
  TokenizerSpec tokenizer;
  NormBounds norm;
  // Per-feature rescale applied to the released features before the head.
  // Non-trainable statistics in the spirit of batch-norm running stats: the
  // trainer refreshes them between steps so head inputs keep unit-order
  // variance whatever the noise scale, and gradients never flow through them.
  std::vector<double> head_scale;
};

// Xavier-uniform weights, zero biases; tokenizer and norm bounds must be
// fitted separately before any forward pass.
ModelState init_model(const ModelConfig& cfg, std::size_t eeg_channels,
                      std::uint64_t seed);

// Parameter leaves bound onto a tape, index-aligned with layout.named.
struct GraphModel {
  const ModelState* state = nullptr;
  std::vector<ad::Tensor> leaves;
  const ad::Tensor& leaf(const ParamSpan& s) const {
    return leaves[static_cast<std::size_t>(s.idx)];
  }
};

GraphModel bind_params(ad::Tape& tape, const ModelState& state,
                       bool needs_grad);

struct FeatureGraph {
  ad::Tensor f_e, f_o, f_c;  // each [B x d_feat]
  ad::Tensor raw;            // [B x 3*d_feat], pre-normalization
};

// Builds the full feature extractor for a batch; rows of `raw` follow batch
// order. All samples must share timesteps/channel counts.
FeatureGraph build_feature_graph(
    ad::Tape& tape, const GraphModel& gm,
    const std::vector<const data::ModalitySample*>& batch);

// clamp((raw - lo) / (hi - lo), 0, 1) with the state's frozen bounds.
ad::Tensor apply_norm_graph(ad::Tape& tape, const ad::Tensor& raw,
                            const NormBounds& norm);

// Hidden layer + linear head over released features [B x k] -> [B x classes].
ad::Tensor classify_graph(ad::Tape& tape, const GraphModel& gm,
                          const ad::Tensor& released);

// Raw (pre-normalization) feature min/max over a dataset split.
NormBounds fit_norm_bounds(const std::vector<data::ModalitySample>& train,
                           const ModelState& state, const ExecPolicy& policy);

// ---- Single-sample API (values only; built on the batched graph) ----

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;  // row-major
};

// Embedded token sequence with positional encodings, [timesteps x d_model].
Matrix transform_eeg(const data::ModalitySample& s, const ModelState& st);

// Encoder stack + mean pool + projection of a token embedding sequence.
std::vector<double> encode_eeg(const Matrix& token_embeddings,
                               const ModelState& st);

// Time-interpolated, channel-tiled [image_hw x image_hw] image.
Matrix transform_om(const data::ModalitySample& s, const ModelConfig& cfg);

// Non-overlapping patches of the OM image, [n_patches x patch*patch].
Matrix patchify(const Matrix& img, std::size_t patch);

// Patch perceptron output, [n_patches x d_model].
Matrix om_patch_embed(const data::ModalitySample& s, const ModelState& st);

// Patch encoder + mean pool + projection.
std::vector<double> encode_om(const data::ModalitySample& s,
                              const ModelState& st);

// softmax(Q K^T / sqrt(d_k)) V for one decoder layer's projections.
Matrix attention_core(const Matrix& q_src, const Matrix& kv_src,
                      const ModelState& st, std::size_t layer);
// The attention weight matrix itself, [q_rows x kv_rows].
Matrix attention_weights(const Matrix& q_src, const Matrix& kv_src,
                         const ModelState& st, std::size_t layer);
// Full decoder block: residual + layer norm around the core, then the
// feed-forward sublayer with its own residual + layer norm.
Matrix cross_attention_layer(const Matrix& q_src, const Matrix& kv_src,
                             const ModelState& st, std::size_t layer);

// Decoder stack over (OM patch queries, EEG token keys/values), pooled and
// projected to d_feat.
std::vector<double> extract_cross_modal(const data::ModalitySample& s,
                                        const ModelState& st);

struct Embeddings {
  std::vector<double> f_e, f_o, f_c;
  std::vector<double> f;  // normalized concat, in [0,1]^(3*d_feat)
};

Embeddings forward_features(const data::ModalitySample& s,
                            const ModelState& st);

// Released-feature classifier; input length must be feature_dim().
std::vector<double> classify(const std::vector<double>& f_released,
                             const ModelState& st);

}  // namespace dpmld::model

#endif  // DPMLD_MODEL_HPP_
