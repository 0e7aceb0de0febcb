// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Micro decoder-only transformer: pre-norm residual blocks, learned positional
// embeddings, weight-tied output head. Every pass is recorded on a Tape so the
// same code serves training and analysis.

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geolan/autodiff.hpp"
#include "geolan/error.hpp"
#include "geolan/rng.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t max_seq = 128;
  std::size_t ffn_mult = 4;

  void validate() const {
    auto pos = [](std::size_t v, const char* name) {
      if (v < 1) throw InputError(std::string("model.") + name + " must be >= 1");
    };
    pos(vocab_size, "vocab_size");
    pos(d_model, "d_model");
    pos(n_layers, "n_layers");
    pos(n_heads, "n_heads");
    pos(d_head, "d_head");
    pos(max_seq, "max_seq");
    pos(ffn_mult, "ffn_mult");
    if (d_model != n_heads * d_head)
      throw InputError("model.d_model must equal n_heads * d_head (" + std::to_string(d_model) +
                       " != " + std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }

  std::size_t d_ffn() const { return ffn_mult * d_model; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameter tensors in a fixed order.
struct Params {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t index(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw InputError("unknown parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const { return tensors[index(name)]; }
  Tensor& at(const std::string& name) { return tensors[index(name)]; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  void add(std::string name, Tensor t) {
    lookup_[name] = names.size();
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
  }

 private:
  std::map<std::string, std::size_t> lookup_;
};

inline std::string layer_param(std::size_t l, const char* what) {
  return "layers." + std::to_string(l) + "." + what;
}

/// Parameter layout for a config, with shapes and initial values: weights
/// N(0, 0.02), biases zero, normalization gains one.
inline Params init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Params p;
  p.config = cfg;
  const std::size_t d = cfg.d_model, f = cfg.d_ffn();
  auto gauss = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = 0.02 * rng.normal();
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor(Shape{n}, 1.0); };
  auto zeros = [](std::size_t n) { return Tensor(Shape{n}, 0.0); };

  p.add("tok_emb", gauss({cfg.vocab_size, d}));
  p.add("pos_emb", gauss({cfg.max_seq, d}));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    p.add(layer_param(l, "ln1.g"), ones(d));
    p.add(layer_param(l, "ln1.b"), zeros(d));
    p.add(layer_param(l, "attn.wq"), gauss({d, d}));
    p.add(layer_param(l, "attn.bq"), zeros(d));
    p.add(layer_param(l, "attn.wk"), gauss({d, d}));
    p.add(layer_param(l, "attn.bk"), zeros(d));
    p.add(layer_param(l, "attn.wv"), gauss({d, d}));
    p.add(layer_param(l, "attn.bv"), zeros(d));
    p.add(layer_param(l, "attn.wo"), gauss({d, d}));
    p.add(layer_param(l, "attn.bo"), zeros(d));
    p.add(layer_param(l, "ln2.g"), ones(d));
    p.add(layer_param(l, "ln2.b"), zeros(d));
    p.add(layer_param(l, "ffn.w1"), gauss({d, f}));
    p.add(layer_param(l, "ffn.b1"), zeros(f));
    p.add(layer_param(l, "ffn.w2"), gauss({f, d}));
    p.add(layer_param(l, "ffn.b2"), zeros(d));
  }
  p.add("lnf.g", ones(d));
  p.add("lnf.b", zeros(d));
  return p;
}

/// Rebuild a Params object from names/tensors read from disk, checking every
/// shape against the config.
inline Params params_from(const ModelConfig& cfg, const std::vector<std::string>& names,
                          std::vector<Tensor> tensors) {
  Rng rng(0);
  Params ref = init_params(cfg, rng);
  if (names != ref.names) throw CorruptDataError("parameter names do not match the model layout");
  Params p;
  p.config = cfg;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (tensors[i].shape() != ref.tensors[i].shape())
      throw CorruptDataError("parameter " + names[i] + " has shape " + shape_str(tensors[i].shape()) +
                             ", expected " + shape_str(ref.tensors[i].shape()));
    p.add(names[i], std::move(tensors[i]));
  }
  return p;
}

/// B sequences of equal length N, flattened row-major (row b*N + i).
struct TokenBatch {
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;

  static TokenBatch single(std::vector<std::size_t> tokens) {
    TokenBatch b;
    b.n_seq = 1;
    b.seq_len = tokens.size();
    b.ids = std::move(tokens);
    return b;
  }

  std::span<const std::size_t> sequence(std::size_t b) const {
    return std::span<const std::size_t>(ids).subspan(b * seq_len, seq_len);
  }
};

/// Rows of hidden[layer] to overwrite before later layers run.
struct PatchSpec {
  std::size_t layer = 0;
  std::vector<std::size_t> rows;
  Tensor donor;
};

/// Tape-level outputs of one pass.
struct Graph {
  std::vector<Var> hidden;     // L+1 entries, (B*N) x d; hidden[0] = token + position embedding
  std::vector<Var> attention;  // L entries, (B*H) x N x N
  std::vector<Var> queries;    // L entries, (B*N) x d, head h in columns [h*d_k, (h+1)*d_k)
  Var logits;                  // (B*N) x vocab
};

/// Tensor copies of a pass, for analysis.
struct ForwardTrace {
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::vector<Tensor> hidden;
  std::vector<Tensor> attention;
  std::vector<Tensor> queries;
  Tensor logits;

  /// Attention matrix of (layer, sequence b, head h) as an N x N tensor.
  Tensor head(std::size_t layer, std::size_t b, std::size_t h) const {
    const std::size_t H = attention.at(layer).dim(0) / n_seq;
    return attention[layer].slice(b * H + h);
  }
};

inline void check_tokens(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.n_seq == 0 || batch.seq_len == 0) throw InputError("empty token batch");
  if (batch.ids.size() != batch.n_seq * batch.seq_len) throw InputError("token batch size mismatch");
  if (batch.seq_len > cfg.max_seq)
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  for (std::size_t i = 0; i < batch.ids.size(); ++i)
    if (batch.ids[i] >= cfg.vocab_size)
      throw InputError("token id " + std::to_string(batch.ids[i]) + " at position " + std::to_string(i) +
                       " is out of range for vocab " + std::to_string(cfg.vocab_size));
}

namespace detail {

inline Var embed(Tape& tape, const Params& p, std::span<const Var> w, const TokenBatch& batch) {
  (void)tape;
  Var tok = gather_rows(w[p.index("tok_emb")], batch.ids);
  std::vector<std::size_t> pos(batch.ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % batch.seq_len;
  Var pe = gather_rows(w[p.index("pos_emb")], std::move(pos));
  return add(tok, pe);
}

struct BlockOut {
  Var out;
  Var attn;
  Var queries;
};

inline BlockOut block(const Params& p, std::span<const Var> w, std::size_t l, Var z, HeadLayout lay) {
  auto W = [&](const char* name) { return w[p.index(layer_param(l, name))]; };
  Var h = layer_norm(z, W("ln1.g"), W("ln1.b"));
  Var q = add_bias(matmul(h, W("attn.wq")), W("attn.bq"));
  Var k = add_bias(matmul(h, W("attn.wk")), W("attn.bk"));
  Var v = add_bias(matmul(h, W("attn.wv")), W("attn.bv"));
  Var a = attention_probs(q, k, lay);
  Var ctx = attention_apply(a, v, lay);
  Var z1 = add(z, add_bias(matmul(ctx, W("attn.wo")), W("attn.bo")));
  Var h2 = layer_norm(z1, W("ln2.g"), W("ln2.b"));
  Var ff = add_bias(matmul(gelu(add_bias(matmul(h2, W("ffn.w1")), W("ffn.b1"))), W("ffn.w2")), W("ffn.b2"));
  return {add(z1, ff), a, q};
}

inline Var head_logits(const Params& p, std::span<const Var> w, Var z) {
  Var h = layer_norm(z, w[p.index("lnf.g")], w[p.index("lnf.b")]);
  return matmul_nt(h, w[p.index("tok_emb")]);
}

}  // namespace detail

/// Record a full pass on `tape`. `w` holds one Var per parameter, in Params order.
inline Graph build_graph(Tape& tape, const Params& p, std::span<const Var> w, const TokenBatch& batch,
                         const PatchSpec* patch = nullptr) {
  const ModelConfig& cfg = p.config;
  check_tokens(cfg, batch);
  detail::require(w.size() == p.tensors.size(), "build_graph: parameter count mismatch");
  if (patch && patch->layer > cfg.n_layers)
    throw InputError("patch layer " + std::to_string(patch->layer) + " exceeds n_layers " +
                     std::to_string(cfg.n_layers));
  const HeadLayout lay{batch.n_seq, batch.seq_len, cfg.n_heads, cfg.d_head};
  Graph g;
  Var z = detail::embed(tape, p, w, batch);
  auto maybe_patch = [&](std::size_t l) {
    if (patch && patch->layer == l) z = overwrite_rows(z, patch->rows, patch->donor);
  };
  maybe_patch(0);
  g.hidden.push_back(z);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    detail::BlockOut b = detail::block(p, w, l, z, lay);
    z = b.out;
    maybe_patch(l + 1);
    g.hidden.push_back(z);
    g.attention.push_back(b.attn);
    g.queries.push_back(b.queries);
  }
  g.logits = detail::head_logits(p, w, z);
  return g;
}

/// Parameter leaves on `tape`, one per tensor.
inline std::vector<Var> param_leaves(Tape& tape, const Params& p, bool requires_grad) {
  std::vector<Var> w;
  w.reserve(p.tensors.size());
  for (const auto& t : p.tensors) w.push_back(tape.leaf(t, requires_grad));
  return w;
}

inline ForwardTrace to_trace(const Graph& g, const TokenBatch& batch) {
  ForwardTrace t;
  t.n_seq = batch.n_seq;
  t.seq_len = batch.seq_len;
  for (Var v : g.hidden) t.hidden.push_back(v.value());
  for (Var v : g.attention) t.attention.push_back(v.value());
  for (Var v : g.queries) t.queries.push_back(v.value());
  t.logits = g.logits.value();
  return t;
}

inline ForwardTrace forward(const Params& p, const TokenBatch& batch) {
  Tape tape;
  auto w = param_leaves(tape, p, false);
  return to_trace(build_graph(tape, p, w, batch), batch);
}

inline ForwardTrace forward(const Params& p, const std::vector<std::size_t>& tokens) {
  return forward(p, TokenBatch::single(tokens));
}

/// Forward pass with hidden[layer] rows in `token_set` replaced by `donor_states`.
inline ForwardTrace patch_forward(const Params& p, const TokenBatch& batch, std::size_t layer,
                                  const std::vector<std::size_t>& token_set, const Tensor& donor_states) {
  for (std::size_t r : token_set)
    if (r >= batch.ids.size())
      throw InputError("patch token index " + std::to_string(r) + " out of range");
  PatchSpec spec{layer, token_set, donor_states};
  Tape tape;
  auto w = param_leaves(tape, p, false);
  return to_trace(build_graph(tape, p, w, batch, &spec), batch);
}

/// Mean next-token negative log-likelihood; targets align with logits rows.
inline Var loss_ce(const Graph& g, const std::vector<std::size_t>& targets) {
  return cross_entropy(g.logits, targets);
}

/// Same quantity on plain tensors.
inline double cross_entropy_value(const Tensor& logits, const std::vector<std::size_t>& targets) {
  Tape tape;
  return cross_entropy(tape.constant(logits), targets).value().item();
}

/// The residual update of block `layer` applied to states z (rows = B*N tokens).
inline Tensor layer_update(const Params& p, std::size_t layer, const Tensor& z, std::size_t n_seq,
                           std::size_t seq_len) {
  detail::require(layer < p.config.n_layers, "layer_update: layer out of range");
  Tape tape;
  auto w = param_leaves(tape, p, false);
  const HeadLayout lay{n_seq, seq_len, p.config.n_heads, p.config.d_head};
  Var zin = tape.constant(z);
  detail::BlockOut b = detail::block(p, w, layer, zin, lay);
  return b.out.value() - z;
}

/// Output map from final hidden states to logits.
inline Tensor output_map(const Params& p, const Tensor& z) {
  Tape tape;
  auto w = param_leaves(tape, p, false);
  return detail::head_logits(p, w, tape.constant(z)).value();
}

/// Replace each position after the first with a uniform vocabulary id with
/// probability `rate`.
inline std::vector<std::size_t> perturb_tokens(const std::vector<std::size_t>& tokens, double rate,
                                               std::size_t vocab_size, Rng& rng) {
  detail::require(rate >= 0.0 && rate <= 1.0, "perturb_tokens: rate must lie in [0, 1]");
  std::vector<std::size_t> out = tokens;
  for (std::size_t i = 1; i < out.size(); ++i)
    if (rng.bernoulli(rate)) out[i] = static_cast<std::size_t>(rng.below(vocab_size));
  return out;
}

}  // namespace geolan
