// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mtpdraft/autograd.hpp"
#include "mtpdraft/error.hpp"
#include "mtpdraft/tensor.hpp"

namespace mtpdraft {

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t model_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 128;
  double rope_base = 10000.0;
  double rms_eps = 1e-6;
  std::uint64_t seed = 0;
  std::size_t ffn_mult = 4;

  std::size_t ffn_dim() const { return ffn_mult * model_dim; }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (model_dim < 1) throw ConfigError("model: model_dim must be >= 1");
    if (n_heads < 1 || model_dim % n_heads != 0) {
      throw ConfigError("model: model_dim must be divisible by n_heads");
    }
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (max_seq_len < 8) throw ConfigError("model: max_seq_len must be >= 8");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
    if (!(rms_eps > 0.0)) throw ConfigError("model: rms_eps must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Pre-norm transformer block: attention and SiLU MLP, both residual.
struct BlockWeights {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor mlp_norm, w_up, w_down;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct NamedConstTensor {
  std::string name;
  const Tensor* tensor;
};

// The frozen backbone. The output head is tied to the embedding table, so
// `embed` doubles as W in logits = W * norm(h).
struct MainModel {
  ModelConfig config;
  Tensor embed;
  std::vector<BlockWeights> blocks;
  Tensor final_norm;

  const Tensor& output_head() const { return embed; }
};

// Single shared-weight MTP head. It owns no output projection: logits always
// go through the main model's W.
struct MTPHead {
  ModelConfig config;
  Tensor hidden_norm;
  Tensor embed_norm;
  Tensor combine;  // [d x 2d] over [norm(h); norm(embed(token))]
  BlockWeights block;
  Tensor out_norm;
};

namespace detail {

template <typename Fn>
void for_each_block_tensor(const std::string& prefix, BlockWeights& b, Fn&& fn) {
  fn(prefix + "attn_norm", b.attn_norm);
  fn(prefix + "wq", b.wq);
  fn(prefix + "wk", b.wk);
  fn(prefix + "wv", b.wv);
  fn(prefix + "wo", b.wo);
  fn(prefix + "mlp_norm", b.mlp_norm);
  fn(prefix + "w_up", b.w_up);
  fn(prefix + "w_down", b.w_down);
}

}  // namespace detail

inline std::vector<NamedTensor> named_parameters(MainModel& m) {
  std::vector<NamedTensor> out;
  auto add = [&](std::string name, Tensor& t) { out.push_back({std::move(name), &t}); };
  add("embed", m.embed);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    detail::for_each_block_tensor("blocks." + std::to_string(l) + ".", m.blocks[l], add);
  }
  add("final_norm", m.final_norm);
  return out;
}

inline std::vector<NamedTensor> named_parameters(MTPHead& h) {
  std::vector<NamedTensor> out;
  auto add = [&](std::string name, Tensor& t) { out.push_back({std::move(name), &t}); };
  add("hidden_norm", h.hidden_norm);
  add("embed_norm", h.embed_norm);
  add("combine", h.combine);
  detail::for_each_block_tensor("block.", h.block, add);
  add("out_norm", h.out_norm);
  return out;
}

template <typename Module>
std::vector<NamedConstTensor> named_parameters(const Module& m) {
  std::vector<NamedConstTensor> out;
  for (auto& nt : named_parameters(const_cast<Module&>(m))) out.push_back({nt.name, nt.tensor});
  return out;
}

template <typename Module>
std::vector<Tensor*> parameter_list(Module& m) {
  std::vector<Tensor*> out;
  for (auto& nt : named_parameters(m)) out.push_back(nt.tensor);
  return out;
}

template <typename Module>
std::size_t parameter_count(const Module& m) {
  std::size_t n = 0;
  for (auto& nt : named_parameters(m)) n += nt.tensor->size();
  return n;
}

// Closed-form counts used to cross-check parameter_count().
inline std::size_t block_parameter_formula(const ModelConfig& c) {
  const std::size_t d = c.model_dim, f = c.ffn_dim();
  return 2 * d + 4 * d * d + 2 * f * d;
}
inline std::size_t main_parameter_formula(const ModelConfig& c) {
  return c.vocab_size * c.model_dim + c.n_layers * block_parameter_formula(c) + c.model_dim;
}
inline std::size_t head_parameter_formula(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  return 2 * d + 2 * d * d + block_parameter_formula(c) + d;
}

// Per-layer key/value storage with a shared length counter.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t layers, std::size_t capacity, std::size_t dim)
      : capacity_(capacity), dim_(dim), k_(layers, std::vector<double>(capacity * dim)),
        v_(layers, std::vector<double>(capacity * dim)) {}

  static KVCache for_main(const ModelConfig& c) { return KVCache(c.n_layers, c.max_seq_len, c.model_dim); }
  static KVCache for_head(const ModelConfig& c) { return KVCache(1, c.max_seq_len, c.model_dim); }

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t layers() const { return k_.size(); }
  std::size_t dim() const { return dim_; }

  void ensure_room(std::size_t n) const {
    if (length_ + n > capacity_) {
      throw CapacityError("kv cache: " + std::to_string(length_) + " + " + std::to_string(n) +
                          " exceeds capacity " + std::to_string(capacity_));
    }
  }

  // Rollback to a verified prefix.
  void truncate(std::size_t n) {
    if (n > length_) throw StateError("kv cache: cannot truncate to a longer length");
    length_ = n;
  }

  void clear() { length_ = 0; }

  detail::PastKV past(std::size_t layer) const { return {k_[layer].data(), v_[layer].data(), length_}; }

  // Writes rows [length, length + n) of one layer; commit() publishes them.
  void stage(std::size_t layer, const Tensor& k, const Tensor& v) {
    const std::size_t n = k.rows();
    ensure_room(n);
    std::copy_n(k.ptr(), n * dim_, k_[layer].data() + length_ * dim_);
    std::copy_n(v.ptr(), n * dim_, v_[layer].data() + length_ * dim_);
  }
  void commit(std::size_t n) {
    ensure_room(n);
    length_ += n;
  }

  std::span<const double> keys(std::size_t layer) const { return {k_[layer].data(), length_ * dim_}; }
  std::span<const double> values(std::size_t layer) const { return {v_[layer].data(), length_ * dim_}; }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> k_;
  std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// Forward passes. Templated on module constness: const modules bind their
// weights as constants, mutable ones as trainable parameters.

template <typename B>
  requires std::is_same_v<std::remove_const_t<B>, BlockWeights>
Var block_forward(Tape& tape, B& w, Var x, const ModelConfig& c, std::size_t start_pos, KVCache* cache,
                  std::size_t layer) {
  const std::size_t heads = c.n_heads;
  Var a = ops::rms_norm(tape, x, tape.bind(w.attn_norm), c.rms_eps);
  Var q = ops::rope(tape, ops::linear(tape, a, tape.bind(w.wq)), heads, start_pos, c.rope_base);
  Var k = ops::rope(tape, ops::linear(tape, a, tape.bind(w.wk)), heads, start_pos, c.rope_base);
  Var v = ops::linear(tape, a, tape.bind(w.wv));
  detail::PastKV past = cache ? cache->past(layer) : detail::PastKV{};
  Var att = ops::attention(tape, q, k, v, heads, past);
  if (cache) cache->stage(layer, tape.value(k), tape.value(v));
  x = ops::add(tape, x, ops::linear(tape, att, tape.bind(w.wo)));
  Var b = ops::rms_norm(tape, x, tape.bind(w.mlp_norm), c.rms_eps);
  Var up = ops::silu(tape, ops::linear(tape, b, tape.bind(w.w_up)));
  return ops::add(tape, x, ops::linear(tape, up, tape.bind(w.w_down)));
}

template <typename M>
  requires std::is_same_v<std::remove_const_t<M>, MainModel>
Var main_hidden(Tape& tape, M& model, std::span<const TokenId> tokens, KVCache* cache) {
  const ModelConfig& c = model.config;
  const std::size_t start = cache ? cache->length() : 0;
  if (cache) cache->ensure_room(tokens.size());
  else if (tokens.size() > c.max_seq_len) throw CapacityError("main model: sequence exceeds max_seq_len");
  Var x = ops::embedding(tape, tape.bind(model.embed), tokens);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    x = block_forward(tape, model.blocks[l], x, c, start, cache, l);
  }
  if (cache) cache->commit(tokens.size());
  return x;
}

template <typename M>
  requires std::is_same_v<std::remove_const_t<M>, MainModel>
Var main_logits(Tape& tape, M& model, Var hidden) {
  Var n = ops::rms_norm(tape, hidden, tape.bind(model.final_norm), model.config.rms_eps);
  return ops::linear(tape, n, tape.bind(model.embed));
}

// One head pass over m stream entries; entry i pairs h_prev[i] with the
// embedding of tokens[i]. Stream positions start at start_pos. Returns the
// block output (the hidden chain carried to the next step).
template <typename H>
  requires std::is_same_v<std::remove_const_t<H>, MTPHead>
Var head_hidden(Tape& tape, H& head, const MainModel& main, Var h_prev, std::span<const TokenId> tokens,
                std::size_t start_pos, KVCache* cache) {
  const ModelConfig& c = head.config;
  const Tensor& hp = tape.value(h_prev);
  require(hp.rows() == tokens.size(),
          "mtp_step: h_prev has " + std::to_string(hp.rows()) + " rows but " +
              std::to_string(tokens.size()) + " tokens");
  require(hp.cols() == c.model_dim, "mtp_step: hidden width mismatch");
  if (cache) cache->ensure_room(tokens.size());
  Var hn = ops::rms_norm(tape, h_prev, tape.bind(head.hidden_norm), c.rms_eps);
  Var e = ops::embedding(tape, tape.bind(main.embed), tokens);
  Var en = ops::rms_norm(tape, e, tape.bind(head.embed_norm), c.rms_eps);
  Var x = ops::linear(tape, ops::concat_cols(tape, hn, en), tape.bind(head.combine));
  Var y = block_forward(tape, head.block, x, c, start_pos, cache, 0);
  if (cache) cache->commit(tokens.size());
  return y;
}

template <typename H>
  requires std::is_same_v<std::remove_const_t<H>, MTPHead>
Var head_pre_logits(Tape& tape, H& head, Var hidden) {
  return ops::rms_norm(tape, hidden, tape.bind(head.out_norm), head.config.rms_eps);
}

// ---------------------------------------------------------------------------
// Inference entry points.

struct MainOutput {
  Tensor hidden;  // [n x d], last block output before the final norm
  Tensor logits;  // [n x V], or [1 x V] when only the last row was requested
};

inline MainOutput main_forward(const MainModel& model, std::span<const TokenId> tokens, KVCache& cache,
                               bool last_logits_only = false) {
  if (tokens.empty()) throw DimensionError("main_forward: empty token list");
  Tape tape(false);
  Var h = main_hidden(tape, model, tokens, &cache);
  MainOutput out;
  out.hidden = tape.value(h);
  if (last_logits_only) {
    const std::size_t d = model.config.model_dim;
    Tensor last({1, d}, std::vector<double>(out.hidden.ptr() + (tokens.size() - 1) * d,
                                            out.hidden.ptr() + tokens.size() * d));
    out.logits = tape.value(main_logits(tape, model, tape.constant(std::move(last))));
  } else {
    out.logits = tape.value(main_logits(tape, model, h));
  }
  return out;
}

struct MtpStepOutput {
  Tensor hidden;     // [m x d], fed to the next draft step
  Tensor pre_logit;  // [m x d], project through W (or a compressed view) for logits
};

// The head's stream entry e pairs main hidden h_e with the token at absolute
// position e + 1, so stream positions are shifted by one.
inline MtpStepOutput mtp_step(const MTPHead& head, const MainModel& main, const Tensor& h_prev,
                              std::span<const TokenId> shifted_tokens, KVCache& cache) {
  Tape tape(false);
  Var hp = tape.constant_ref(h_prev);
  Var h = head_hidden(tape, head, main, hp, shifted_tokens, cache.length() + 1, &cache);
  MtpStepOutput out;
  out.hidden = tape.value(h);
  out.pre_logit = tape.value(head_pre_logits(tape, head, h));
  return out;
}

// Full-vocabulary logits for pre-logit states through the shared W.
inline Tensor project_logits(const MainModel& main, const Tensor& pre_logit) {
  const Tensor& w = main.output_head();
  Tensor out({pre_logit.rows(), w.rows()});
  kernels::linear(pre_logit.ptr(), pre_logit.rows(), pre_logit.cols(), w.ptr(), w.rows(), out.ptr());
  return out;
}

// Index of the largest logit; ties go to the lowest index.
inline TokenId greedy_argmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("greedy_argmax: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericError("greedy_argmax: non-finite logit");
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

// ---------------------------------------------------------------------------
// Initialization.

namespace detail {

inline Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : t.data()) x = dist(rng);
  return t;
}

inline Tensor ones(std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0)); }

inline BlockWeights init_block(const ModelConfig& c, std::mt19937_64& rng, double out_scale) {
  const std::size_t d = c.model_dim, f = c.ffn_dim();
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  BlockWeights b;
  b.attn_norm = ones(d);
  b.wq = normal_tensor({d, d}, s, rng);
  b.wk = normal_tensor({d, d}, s, rng);
  b.wv = normal_tensor({d, d}, s, rng);
  b.wo = normal_tensor({d, d}, s * out_scale, rng);
  b.mlp_norm = ones(d);
  b.w_up = normal_tensor({f, d}, s, rng);
  b.w_down = normal_tensor({d, f}, out_scale / std::sqrt(static_cast<double>(f)), rng);
  return b;
}

}  // namespace detail

struct ModelPair {
  MainModel main;
  MTPHead head;
};

inline MTPHead init_head(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed ^ 0x6d74702d68656164ULL);
  const std::size_t d = config.model_dim;
  MTPHead h;
  h.config = config;
  h.hidden_norm = detail::ones(d);
  h.embed_norm = detail::ones(d);
  h.combine = detail::normal_tensor({d, 2 * d}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng);
  h.block = detail::init_block(config, rng, std::sqrt(0.5));
  h.out_norm = detail::ones(d);
  return h;
}

inline MainModel init_main(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  MainModel m;
  m.config = config;
  m.embed = detail::normal_tensor({config.vocab_size, config.model_dim}, 0.1, rng);
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (std::size_t l = 0; l < config.n_layers; ++l) m.blocks.push_back(detail::init_block(config, rng, out_scale));
  m.final_norm = detail::ones(config.model_dim);
  return m;
}

// Allocates and seeds both modules. Training happens elsewhere.
inline ModelPair init_model(const ModelConfig& config) {
  return {init_main(config), init_head(config, config.seed)};
}

}  // namespace mtpdraft
