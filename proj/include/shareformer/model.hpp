// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder-decoder whose N layer positions per stack execute with
// one of M parameter blocks chosen by a LayerAssignment. Blocks are Tensor
// handles, so assigning one block to several positions aliases storage and
// the tape's += accumulation yields the tied gradient.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "shareformer/rng.hpp"
#include "shareformer/share_plan.hpp"
#include "shareformer/tensor.hpp"

namespace shareformer {

enum class LnPlacement { kPost, kPre };

inline const char* to_string(LnPlacement p) { return p == LnPlacement::kPost ? "post" : "pre"; }

inline LnPlacement ln_placement_from_string(const std::string& s) {
  if (s == "post") return LnPlacement::kPost;
  if (s == "pre") return LnPlacement::kPre;
  throw std::invalid_argument("unknown ln placement: '" + s + "' (expected post or pre)");
}

struct ModelConfig {
  int d_model = 512;
  int n_heads = 8;
  int d_ff = 2048;
  int vocab_size = 32768;
  int enc_layers = 6;   // N_enc
  int dec_layers = 6;   // N_dec
  int enc_blocks = 6;   // M_enc
  int dec_blocks = 6;   // M_dec
  ShareStrategy strategy = ShareStrategy::kCycle;
  LnPlacement ln_placement = LnPlacement::kPost;
  bool admin = false;
  bool tie_embeddings = true;
  double dropout = 0.1;
  int max_len = 512;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.d_model < 1 || c.n_heads < 1 || c.d_ff < 1 || c.vocab_size < 1 || c.max_len < 1) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (c.d_model % c.n_heads != 0) {
    throw std::invalid_argument("d_model=" + std::to_string(c.d_model) +
                                " not divisible by n_heads=" + std::to_string(c.n_heads));
  }
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (c.pad_id >= c.vocab_size || c.bos_id >= c.vocab_size || c.eos_id >= c.vocab_size) {
    throw std::invalid_argument("special token ids must fit the vocabulary");
  }
  // Throws on bad (M, N, strategy), including indivisible SEQUENCE plans.
  (void)build_assignment(c.enc_layers, c.enc_blocks, c.strategy);
  (void)build_assignment(c.dec_layers, c.dec_blocks, c.strategy);
}

// ---- parameter blocks ----

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct LnParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct EncoderBlock {
  AttentionParams<T> attn;
  Tensor<T> w1, b1, w2, b2;
  LnParams<T> ln1, ln2;
};

template <typename T>
struct DecoderBlock {
  AttentionParams<T> self_attn, cross_attn;
  Tensor<T> w1, b1, w2, b2;
  LnParams<T> ln1, ln2, ln3;
};

template <typename T>
struct ParameterStore {
  // tied mode uses `embedding` for source, target and the output projection
  Tensor<T> embedding;
  Tensor<T> src_embedding, tgt_embedding, out_proj, out_bias;  // untied mode
  std::vector<EncoderBlock<T>> enc_blocks;
  std::vector<DecoderBlock<T>> dec_blocks;
  LnParams<T> enc_final_ln, dec_final_ln;               // Pre-LN only
  std::vector<Tensor<T>> enc_admin_scales;              // 2 per encoder position
  std::vector<Tensor<T>> dec_admin_scales;              // 3 per decoder position

  // Visits every unique trainable tensor once, in a stable order.
  void for_each_param(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    auto attn = [&](const std::string& p, AttentionParams<T>& a) {
      fn(p + ".wq", a.wq); fn(p + ".bq", a.bq);
      fn(p + ".wk", a.wk); fn(p + ".bk", a.bk);
      fn(p + ".wv", a.wv); fn(p + ".bv", a.bv);
      fn(p + ".wo", a.wo); fn(p + ".bo", a.bo);
    };
    auto ln = [&](const std::string& p, LnParams<T>& l) {
      fn(p + ".gain", l.gain);
      fn(p + ".bias", l.bias);
    };
    if (embedding.defined()) fn("embedding", embedding);
    if (src_embedding.defined()) fn("src_embedding", src_embedding);
    if (tgt_embedding.defined()) fn("tgt_embedding", tgt_embedding);
    if (out_proj.defined()) fn("out_proj", out_proj);
    if (out_bias.defined()) fn("out_bias", out_bias);
    for (std::size_t b = 0; b < enc_blocks.size(); ++b) {
      const std::string p = "enc.block" + std::to_string(b + 1);
      auto& blk = enc_blocks[b];
      attn(p + ".attn", blk.attn);
      fn(p + ".ffn.w1", blk.w1); fn(p + ".ffn.b1", blk.b1);
      fn(p + ".ffn.w2", blk.w2); fn(p + ".ffn.b2", blk.b2);
      ln(p + ".ln1", blk.ln1);
      ln(p + ".ln2", blk.ln2);
    }
    for (std::size_t b = 0; b < dec_blocks.size(); ++b) {
      const std::string p = "dec.block" + std::to_string(b + 1);
      auto& blk = dec_blocks[b];
      attn(p + ".self", blk.self_attn);
      attn(p + ".cross", blk.cross_attn);
      fn(p + ".ffn.w1", blk.w1); fn(p + ".ffn.b1", blk.b1);
      fn(p + ".ffn.w2", blk.w2); fn(p + ".ffn.b2", blk.b2);
      ln(p + ".ln1", blk.ln1);
      ln(p + ".ln2", blk.ln2);
      ln(p + ".ln3", blk.ln3);
    }
    if (enc_final_ln.gain.defined()) ln("enc.final_ln", enc_final_ln);
    if (dec_final_ln.gain.defined()) ln("dec.final_ln", dec_final_ln);
    for (std::size_t i = 0; i < enc_admin_scales.size(); ++i) {
      const std::size_t pos = i / 2 + 1;
      fn("enc.admin.pos" + std::to_string(pos) + (i % 2 == 0 ? ".attn" : ".ffn"),
         enc_admin_scales[i]);
    }
    static const char* kDecBranch[3] = {".self", ".cross", ".ffn"};
    for (std::size_t i = 0; i < dec_admin_scales.size(); ++i) {
      const std::size_t pos = i / 3 + 1;
      fn("dec.admin.pos" + std::to_string(pos) + kDecBranch[i % 3], dec_admin_scales[i]);
    }
  }
};

// ---- parameter budget (closed form) ----

struct ParamBreakdown {
  std::int64_t embeddings = 0;
  std::int64_t encoder_blocks = 0;
  std::int64_t decoder_blocks = 0;
  std::int64_t final_layer_norms = 0;
  std::int64_t admin_scales = 0;
  std::int64_t total() const {
    return embeddings + encoder_blocks + decoder_blocks + final_layer_norms + admin_scales;
  }
};

inline ParamBreakdown param_breakdown(const ModelConfig& c) {
  const std::int64_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  const std::int64_t attn = 4 * (d * d + d);
  const std::int64_t ffn = d * f + f + f * d + d;
  const std::int64_t ln_pair = 2 * d;
  ParamBreakdown b;
  b.embeddings = c.tie_embeddings ? v * d : 3 * v * d + v;
  b.encoder_blocks = c.enc_blocks * (attn + ffn + 2 * ln_pair);
  b.decoder_blocks = c.dec_blocks * (2 * attn + ffn + 3 * ln_pair);
  b.final_layer_norms = c.ln_placement == LnPlacement::kPre ? 2 * ln_pair : 0;
  b.admin_scales = c.admin ? d * (2 * c.enc_layers + 3 * c.dec_layers) : 0;
  return b;
}

// Depends on N only through admin scales; with admin off the budget is a
// function of M and the dimensions alone.
inline std::int64_t param_count(const ModelConfig& c) { return param_breakdown(c).total(); }

// ---- dropout key stream ----

// One state per training step; each dropout call site consumes one key.
struct DropoutState {
  std::uint64_t step_key = 0;
  std::uint64_t site = 0;

  static DropoutState for_step(std::uint64_t seed, std::int64_t step) {
    return DropoutState{mix64(sub_seed(seed, "dropout"), static_cast<std::uint64_t>(step)), 0};
  }
  std::uint64_t next() { return mix64(step_key, site++); }
};

// Captures per-branch output variances during a profiling pass.
struct AdminProfiler {
  std::vector<double> enc_branch_var;
  std::vector<double> dec_branch_var;
};

// ---- the model ----

template <typename T>
struct Model {
  ModelConfig config;
  LayerAssignment enc_assignment, dec_assignment;
  ParameterStore<T> store;
  std::shared_ptr<std::vector<T>> pos_enc;  // [max_len, d_model], sinusoidal

  static constexpr T kLnEps = static_cast<T>(1e-5);

  // logits [B*T, V] for source tokens [B*S] and decoder input tokens [B*T]
  Tensor<T> forward(Tape<T>& tape, const std::vector<int>& src, std::int64_t batch,
                    std::int64_t src_len, const std::vector<int>& tgt_in, std::int64_t tgt_len,
                    DropoutState* drop = nullptr) const {
    Tensor<T> enc_out = encode(tape, src, batch, src_len, drop);
    return decode(tape, enc_out, src, batch, src_len, tgt_in, tgt_len, drop);
  }

  Tensor<T> encode(Tape<T>& tape, const std::vector<int>& src, std::int64_t batch,
                   std::int64_t src_len, DropoutState* drop = nullptr,
                   AdminProfiler* profiler = nullptr) const {
    check_tokens(src, batch, src_len, "source");
    const Tensor<T>& emb = config.tie_embeddings ? store.embedding : store.src_embedding;
    Tensor<T> x = embed_inputs(tape, src, emb, batch, src_len, drop);
    auto mask = key_pad_mask(src, batch, src_len, src_len, /*causal=*/false, nullptr);
    for (int pos = 0; pos < config.enc_layers; ++pos) {
      const EncoderBlock<T>& blk = store.enc_blocks[static_cast<std::size_t>(
          enc_assignment.blocks[static_cast<std::size_t>(pos)] - 1)];
      x = encoder_layer(tape, x, blk, mask, batch, src_len, pos, drop, profiler);
    }
    if (config.ln_placement == LnPlacement::kPre) {
      x = tape.layer_norm(x, store.enc_final_ln.gain, store.enc_final_ln.bias, kLnEps);
    }
    return x;
  }

  Tensor<T> decode(Tape<T>& tape, const Tensor<T>& enc_out, const std::vector<int>& src,
                   std::int64_t batch, std::int64_t src_len, const std::vector<int>& tgt_in,
                   std::int64_t tgt_len, DropoutState* drop = nullptr,
                   AdminProfiler* profiler = nullptr) const {
    check_tokens(tgt_in, batch, tgt_len, "target");
    const Tensor<T>& emb = config.tie_embeddings ? store.embedding : store.tgt_embedding;
    Tensor<T> x = embed_inputs(tape, tgt_in, emb, batch, tgt_len, drop);
    auto self_mask = key_pad_mask(tgt_in, batch, tgt_len, tgt_len, /*causal=*/true, nullptr);
    auto cross_mask = key_pad_mask(src, batch, src_len, src_len, /*causal=*/false, &tgt_len);
    for (int pos = 0; pos < config.dec_layers; ++pos) {
      const DecoderBlock<T>& blk = store.dec_blocks[static_cast<std::size_t>(
          dec_assignment.blocks[static_cast<std::size_t>(pos)] - 1)];
      x = decoder_layer(tape, x, enc_out, blk, self_mask, cross_mask, batch, tgt_len, src_len, pos,
                        drop, profiler);
    }
    if (config.ln_placement == LnPlacement::kPre) {
      x = tape.layer_norm(x, store.dec_final_ln.gain, store.dec_final_ln.bias, kLnEps);
    }
    // project onto the vocabulary
    if (config.tie_embeddings) {
      return tape.matmul_nt(x, store.embedding);
    }
    return tape.add_rowvec(tape.matmul_nt(x, store.out_proj), store.out_bias);
  }

  std::int64_t count_parameters() {
    std::int64_t n = 0;
    store.for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

 private:
  Tensor<T> embed_inputs(Tape<T>& tape, const std::vector<int>& ids, const Tensor<T>& table,
                         std::int64_t batch, std::int64_t len, DropoutState* drop) const {
    if (len > config.max_len) {
      throw std::invalid_argument("sequence length " + std::to_string(len) +
                                  " exceeds max_len " + std::to_string(config.max_len));
    }
    const std::int64_t d = config.d_model;
    Tensor<T> x = tape.scale(tape.embedding(ids, table),
                             static_cast<T>(std::sqrt(static_cast<double>(d))));
    Tensor<T> pe = Tensor<T>::zeros({batch * len, d});
    for (std::int64_t b = 0; b < batch; ++b)
      std::copy(pos_enc->begin(), pos_enc->begin() + len * d, pe.v() + b * len * d);
    x = tape.add(x, pe);
    return apply_dropout(tape, x, drop);
  }

  Tensor<T> apply_dropout(Tape<T>& tape, const Tensor<T>& x, DropoutState* drop) const {
    if (!drop || config.dropout <= 0.0) return x;
    return tape.dropout(x, config.dropout, drop->next());
  }

  // mask[b, q, k] = 1 where key k must be hidden from query q
  std::shared_ptr<const std::vector<std::uint8_t>> key_pad_mask(const std::vector<int>& key_ids,
                                                                std::int64_t batch,
                                                                std::int64_t key_len,
                                                                std::int64_t query_len_same,
                                                                bool causal,
                                                                const std::int64_t* query_len) const {
    const std::int64_t q_len = query_len ? *query_len : query_len_same;
    auto mask = std::make_shared<std::vector<std::uint8_t>>(
        static_cast<std::size_t>(batch * q_len * key_len), 0);
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t q = 0; q < q_len; ++q)
        for (std::int64_t k = 0; k < key_len; ++k) {
          const bool pad = key_ids[static_cast<std::size_t>(b * key_len + k)] == config.pad_id;
          const bool future = causal && k > q;
          (*mask)[static_cast<std::size_t>((b * q_len + q) * key_len + k)] =
              static_cast<std::uint8_t>(pad || future);
        }
    return mask;
  }

  Tensor<T> attention(Tape<T>& tape, const Tensor<T>& x_q, const Tensor<T>& x_kv,
                      const AttentionParams<T>& p,
                      const std::shared_ptr<const std::vector<std::uint8_t>>& mask,
                      std::int64_t batch, std::int64_t q_len, std::int64_t kv_len) const {
    const std::int64_t h = config.n_heads;
    const std::int64_t hd = config.d_model / h;
    Tensor<T> q = tape.add_rowvec(tape.matmul(x_q, p.wq), p.bq);
    Tensor<T> k = tape.add_rowvec(tape.matmul(x_kv, p.wk), p.bk);
    Tensor<T> v = tape.add_rowvec(tape.matmul(x_kv, p.wv), p.bv);
    Tensor<T> qh = tape.split_heads(q, batch, q_len, h);
    Tensor<T> kh = tape.split_heads(k, batch, kv_len, h);
    Tensor<T> vh = tape.split_heads(v, batch, kv_len, h);
    Tensor<T> scores = tape.scale(tape.bmm_nt(qh, kh),
                                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    scores = tape.mask_scores(scores, mask, h);
    Tensor<T> ctx = tape.bmm(tape.softmax_rows(scores), vh);
    Tensor<T> merged = tape.merge_heads(ctx, batch, q_len, h);
    return tape.add_rowvec(tape.matmul(merged, p.wo), p.bo);
  }

  Tensor<T> ffn(Tape<T>& tape, const Tensor<T>& x, const EncoderBlock<T>& b) const {
    return tape.add_rowvec(
        tape.matmul(tape.relu(tape.add_rowvec(tape.matmul(x, b.w1), b.b1)), b.w2), b.b2);
  }
  Tensor<T> ffn(Tape<T>& tape, const Tensor<T>& x, const DecoderBlock<T>& b) const {
    return tape.add_rowvec(
        tape.matmul(tape.relu(tape.add_rowvec(tape.matmul(x, b.w1), b.b1)), b.w2), b.b2);
  }

  // dropout -> admin scale -> (variance capture happens on the raw output)
  Tensor<T> finish_branch(Tape<T>& tape, Tensor<T> r, const Tensor<T>* admin_scale,
                          DropoutState* drop, std::vector<double>* profile_sink) const {
    if (profile_sink) profile_sink->push_back(tensor_variance(r));
    r = apply_dropout(tape, r, drop);
    if (config.admin && admin_scale) r = tape.mul_rowvec(r, *admin_scale);
    return r;
  }

  Tensor<T> encoder_layer(Tape<T>& tape, Tensor<T> x, const EncoderBlock<T>& blk,
                          const std::shared_ptr<const std::vector<std::uint8_t>>& mask,
                          std::int64_t batch, std::int64_t len, int pos, DropoutState* drop,
                          AdminProfiler* profiler) const {
    auto* sink = profiler ? &profiler->enc_branch_var : nullptr;
    const Tensor<T>* w_attn =
        config.admin ? &store.enc_admin_scales[static_cast<std::size_t>(2 * pos)] : nullptr;
    const Tensor<T>* w_ffn =
        config.admin ? &store.enc_admin_scales[static_cast<std::size_t>(2 * pos + 1)] : nullptr;
    if (config.ln_placement == LnPlacement::kPost) {
      Tensor<T> a = finish_branch(tape, attention(tape, x, x, blk.attn, mask, batch, len, len),
                                  w_attn, drop, sink);
      x = tape.layer_norm(tape.add(x, a), blk.ln1.gain, blk.ln1.bias, kLnEps);
      Tensor<T> f = finish_branch(tape, ffn(tape, x, blk), w_ffn, drop, sink);
      x = tape.layer_norm(tape.add(x, f), blk.ln2.gain, blk.ln2.bias, kLnEps);
    } else {
      Tensor<T> n1 = tape.layer_norm(x, blk.ln1.gain, blk.ln1.bias, kLnEps);
      x = tape.add(x, finish_branch(tape, attention(tape, n1, n1, blk.attn, mask, batch, len, len),
                                    w_attn, drop, sink));
      Tensor<T> n2 = tape.layer_norm(x, blk.ln2.gain, blk.ln2.bias, kLnEps);
      x = tape.add(x, finish_branch(tape, ffn(tape, n2, blk), w_ffn, drop, sink));
    }
    return x;
  }

  Tensor<T> decoder_layer(Tape<T>& tape, Tensor<T> x, const Tensor<T>& enc_out,
                          const DecoderBlock<T>& blk,
                          const std::shared_ptr<const std::vector<std::uint8_t>>& self_mask,
                          const std::shared_ptr<const std::vector<std::uint8_t>>& cross_mask,
                          std::int64_t batch, std::int64_t tgt_len, std::int64_t src_len, int pos,
                          DropoutState* drop, AdminProfiler* profiler) const {
    auto* sink = profiler ? &profiler->dec_branch_var : nullptr;
    const Tensor<T>* w_self =
        config.admin ? &store.dec_admin_scales[static_cast<std::size_t>(3 * pos)] : nullptr;
    const Tensor<T>* w_cross =
        config.admin ? &store.dec_admin_scales[static_cast<std::size_t>(3 * pos + 1)] : nullptr;
    const Tensor<T>* w_ffn =
        config.admin ? &store.dec_admin_scales[static_cast<std::size_t>(3 * pos + 2)] : nullptr;
    if (config.ln_placement == LnPlacement::kPost) {
      Tensor<T> a = finish_branch(
          tape, attention(tape, x, x, blk.self_attn, self_mask, batch, tgt_len, tgt_len), w_self,
          drop, sink);
      x = tape.layer_norm(tape.add(x, a), blk.ln1.gain, blk.ln1.bias, kLnEps);
      Tensor<T> c = finish_branch(
          tape, attention(tape, x, enc_out, blk.cross_attn, cross_mask, batch, tgt_len, src_len),
          w_cross, drop, sink);
      x = tape.layer_norm(tape.add(x, c), blk.ln2.gain, blk.ln2.bias, kLnEps);
      Tensor<T> f = finish_branch(tape, ffn(tape, x, blk), w_ffn, drop, sink);
      x = tape.layer_norm(tape.add(x, f), blk.ln3.gain, blk.ln3.bias, kLnEps);
    } else {
      Tensor<T> n1 = tape.layer_norm(x, blk.ln1.gain, blk.ln1.bias, kLnEps);
      x = tape.add(x, finish_branch(
                       tape, attention(tape, n1, n1, blk.self_attn, self_mask, batch, tgt_len, tgt_len),
                       w_self, drop, sink));
      Tensor<T> n2 = tape.layer_norm(x, blk.ln2.gain, blk.ln2.bias, kLnEps);
      x = tape.add(x, finish_branch(tape,
                                    attention(tape, n2, enc_out, blk.cross_attn, cross_mask, batch,
                                              tgt_len, src_len),
                                    w_cross, drop, sink));
      Tensor<T> n3 = tape.layer_norm(x, blk.ln3.gain, blk.ln3.bias, kLnEps);
      x = tape.add(x, finish_branch(tape, ffn(tape, n3, blk), w_ffn, drop, sink));
    }
    return x;
  }

  void check_tokens(const std::vector<int>& ids, std::int64_t batch, std::int64_t len,
                    const char* which) const {
    if (static_cast<std::int64_t>(ids.size()) != batch * len) {
      throw std::invalid_argument(std::string(which) + " token buffer does not match B*len");
    }
  }

  static double tensor_variance(const Tensor<T>& t) {
    double mean = 0;
    const T* v = t.v();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) mean += v[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double c = v[i] - mean;
      var += c * c;
    }
    return var / static_cast<double>(n);
  }

  template <typename U>
  friend void admin_profile_init(Model<U>& model, const std::vector<int>& src, std::int64_t batch,
                                 std::int64_t src_len, const std::vector<int>& tgt_in,
                                 std::int64_t tgt_len);
};

// ---- construction ----

namespace detail {

template <typename T>
Tensor<T> xavier(Shape shape, std::int64_t fan_in, std::int64_t fan_out, std::uint64_t seed) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
  RandomStream rs(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::int64_t i = 0, n = t.numel(); i < n; ++i)
    t.v()[i] = static_cast<T>(rs.uniform(-limit, limit));
  return t;
}

template <typename T>
Tensor<T> scaled_normal(Shape shape, double std_dev, std::uint64_t seed) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
  RandomStream rs(seed);
  for (std::int64_t i = 0, n = t.numel(); i < n; ++i)
    t.v()[i] = static_cast<T>(rs.gaussian() * std_dev);
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Model<T> m;
  m.config = config;
  m.enc_assignment = build_assignment(config.enc_layers, config.enc_blocks, config.strategy);
  m.dec_assignment = build_assignment(config.dec_layers, config.dec_blocks, config.strategy);

  const std::int64_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
  const std::uint64_t init_seed = sub_seed(seed, "init");
  auto named_seed = [&](const std::string& name) { return sub_seed(init_seed, name); };

  auto make_attn = [&](const std::string& p) {
    AttentionParams<T> a;
    a.wq = detail::xavier<T>({d, d}, d, d, named_seed(p + ".wq"));
    a.bq = Tensor<T>::zeros({d}, true);
    a.wk = detail::xavier<T>({d, d}, d, d, named_seed(p + ".wk"));
    a.bk = Tensor<T>::zeros({d}, true);
    a.wv = detail::xavier<T>({d, d}, d, d, named_seed(p + ".wv"));
    a.bv = Tensor<T>::zeros({d}, true);
    a.wo = detail::xavier<T>({d, d}, d, d, named_seed(p + ".wo"));
    a.bo = Tensor<T>::zeros({d}, true);
    return a;
  };
  auto make_ln = [&]() {
    return LnParams<T>{detail::constant_param<T>({d}, T(1)), Tensor<T>::zeros({d}, true)};
  };

  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  if (config.tie_embeddings) {
    m.store.embedding = detail::scaled_normal<T>({v, d}, emb_std, named_seed("embedding"));
  } else {
    m.store.src_embedding = detail::scaled_normal<T>({v, d}, emb_std, named_seed("src_embedding"));
    m.store.tgt_embedding = detail::scaled_normal<T>({v, d}, emb_std, named_seed("tgt_embedding"));
    m.store.out_proj = detail::scaled_normal<T>({v, d}, emb_std, named_seed("out_proj"));
    m.store.out_bias = Tensor<T>::zeros({v}, true);
  }

  for (int b = 1; b <= config.enc_blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    EncoderBlock<T> blk;
    blk.attn = make_attn(p + ".attn");
    blk.w1 = detail::xavier<T>({d, f}, d, f, named_seed(p + ".ffn.w1"));
    blk.b1 = Tensor<T>::zeros({f}, true);
    blk.w2 = detail::xavier<T>({f, d}, f, d, named_seed(p + ".ffn.w2"));
    blk.b2 = Tensor<T>::zeros({d}, true);
    blk.ln1 = make_ln();
    blk.ln2 = make_ln();
    m.store.enc_blocks.push_back(std::move(blk));
  }
  for (int b = 1; b <= config.dec_blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    DecoderBlock<T> blk;
    blk.self_attn = make_attn(p + ".self");
    blk.cross_attn = make_attn(p + ".cross");
    blk.w1 = detail::xavier<T>({d, f}, d, f, named_seed(p + ".ffn.w1"));
    blk.b1 = Tensor<T>::zeros({f}, true);
    blk.w2 = detail::xavier<T>({f, d}, f, d, named_seed(p + ".ffn.w2"));
    blk.b2 = Tensor<T>::zeros({d}, true);
    blk.ln1 = make_ln();
    blk.ln2 = make_ln();
    blk.ln3 = make_ln();
    m.store.dec_blocks.push_back(std::move(blk));
  }
  if (config.ln_placement == LnPlacement::kPre) {
    m.store.enc_final_ln = make_ln();
    m.store.dec_final_ln = make_ln();
  }
  if (config.admin) {
    for (int i = 0; i < 2 * config.enc_layers; ++i)
      m.store.enc_admin_scales.push_back(detail::constant_param<T>({d}, T(1)));
    for (int i = 0; i < 3 * config.dec_layers; ++i)
      m.store.dec_admin_scales.push_back(detail::constant_param<T>({d}, T(1)));
  }

  // sinusoidal positions, added once at the input
  m.pos_enc = std::make_shared<std::vector<T>>(static_cast<std::size_t>(config.max_len * d));
  for (std::int64_t pos = 0; pos < config.max_len; ++pos)
    for (std::int64_t i = 0; i < d; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      (*m.pos_enc)[static_cast<std::size_t>(pos * d + i)] =
          static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return m;
}

// ---- Admin profiling ----

// One profiling forward with dropout off and all scales at their initial 1.
// Each layer's branch scales are then set to 1/sqrt(1 + sum of the output
// variances of every branch in the layers below it (same stack)), so deeper
// branches are damped more.
template <typename T>
void admin_profile_init(Model<T>& model, const std::vector<int>& src, std::int64_t batch,
                        std::int64_t src_len, const std::vector<int>& tgt_in,
                        std::int64_t tgt_len) {
  if (!model.config.admin) {
    throw std::logic_error("admin_profile_init requires a model built with admin=true");
  }
  AdminProfiler prof;
  Tape<T> tape;
  Tensor<T> enc_out = model.encode(tape, src, batch, src_len, nullptr, &prof);
  (void)model.decode(tape, enc_out, src, batch, src_len, tgt_in, tgt_len, nullptr, &prof);

  auto assign = [](std::vector<Tensor<T>>& scales, const std::vector<double>& vars,
                   int branches_per_layer) {
    double acc = 0.0;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (i > 0 && i % static_cast<std::size_t>(branches_per_layer) == 0) {
        for (int b = 0; b < branches_per_layer; ++b)
          acc += vars[i - static_cast<std::size_t>(branches_per_layer) + static_cast<std::size_t>(b)];
      }
      const T w = static_cast<T>(1.0 / std::sqrt(1.0 + acc));
      std::fill(scales[i].data->begin(), scales[i].data->end(), w);
    }
  };
  assign(model.store.enc_admin_scales, prof.enc_branch_var, 2);
  assign(model.store.dec_admin_scales, prof.dec_branch_var, 3);
}

// ---- untied clone (sharing-semantics oracle) ----

// Value-copies every layer position's assigned block into its own fresh block
// (M = N per stack). Deterministic forward outputs match the original bitwise.
template <typename T>
Model<T> clone_untied(const Model<T>& model) {
  ModelConfig cfg = model.config;
  cfg.enc_blocks = cfg.enc_layers;
  cfg.dec_blocks = cfg.dec_layers;
  Model<T> clone = build_model<T>(cfg, /*seed=*/0);

  auto copy_into = [](Tensor<T>& dst, const Tensor<T>& src) {
    *dst.data = *src.data;
  };
  auto copy_attn = [&](AttentionParams<T>& dst, const AttentionParams<T>& src) {
    copy_into(dst.wq, src.wq); copy_into(dst.bq, src.bq);
    copy_into(dst.wk, src.wk); copy_into(dst.bk, src.bk);
    copy_into(dst.wv, src.wv); copy_into(dst.bv, src.bv);
    copy_into(dst.wo, src.wo); copy_into(dst.bo, src.bo);
  };
  auto copy_ln = [&](LnParams<T>& dst, const LnParams<T>& src) {
    copy_into(dst.gain, src.gain);
    copy_into(dst.bias, src.bias);
  };

  for (int pos = 0; pos < cfg.enc_layers; ++pos) {
    const EncoderBlock<T>& src_blk = model.store.enc_blocks[static_cast<std::size_t>(
        model.enc_assignment.blocks[static_cast<std::size_t>(pos)] - 1)];
    EncoderBlock<T>& dst_blk = clone.store.enc_blocks[static_cast<std::size_t>(pos)];
    copy_attn(dst_blk.attn, src_blk.attn);
    copy_into(dst_blk.w1, src_blk.w1); copy_into(dst_blk.b1, src_blk.b1);
    copy_into(dst_blk.w2, src_blk.w2); copy_into(dst_blk.b2, src_blk.b2);
    copy_ln(dst_blk.ln1, src_blk.ln1);
    copy_ln(dst_blk.ln2, src_blk.ln2);
  }
  for (int pos = 0; pos < cfg.dec_layers; ++pos) {
    const DecoderBlock<T>& src_blk = model.store.dec_blocks[static_cast<std::size_t>(
        model.dec_assignment.blocks[static_cast<std::size_t>(pos)] - 1)];
    DecoderBlock<T>& dst_blk = clone.store.dec_blocks[static_cast<std::size_t>(pos)];
    copy_attn(dst_blk.self_attn, src_blk.self_attn);
    copy_attn(dst_blk.cross_attn, src_blk.cross_attn);
    copy_into(dst_blk.w1, src_blk.w1); copy_into(dst_blk.b1, src_blk.b1);
    copy_into(dst_blk.w2, src_blk.w2); copy_into(dst_blk.b2, src_blk.b2);
    copy_ln(dst_blk.ln1, src_blk.ln1);
    copy_ln(dst_blk.ln2, src_blk.ln2);
    copy_ln(dst_blk.ln3, src_blk.ln3);
  }
  if (cfg.tie_embeddings) {
    copy_into(clone.store.embedding, model.store.embedding);
  } else {
    copy_into(clone.store.src_embedding, model.store.src_embedding);
    copy_into(clone.store.tgt_embedding, model.store.tgt_embedding);
    copy_into(clone.store.out_proj, model.store.out_proj);
    copy_into(clone.store.out_bias, model.store.out_bias);
  }
  if (cfg.ln_placement == LnPlacement::kPre) {
    copy_ln(clone.store.enc_final_ln, model.store.enc_final_ln);
    copy_ln(clone.store.dec_final_ln, model.store.dec_final_ln);
  }
  for (std::size_t i = 0; i < model.store.enc_admin_scales.size(); ++i)
    copy_into(clone.store.enc_admin_scales[i], model.store.enc_admin_scales[i]);
  for (std::size_t i = 0; i < model.store.dec_admin_scales.size(); ++i)
    copy_into(clone.store.dec_admin_scales[i], model.store.dec_admin_scales[i]);
  return clone;
}

}  // namespace shareformer
