// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mtpdraft/autograd.hpp"
#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/sampling.hpp"

namespace mtpdraft {

struct TrainingExample {
  TokenSequence prompt;
  TokenSequence response;
  std::string lang;
  std::string source;
  bool truncated = false;

  std::size_t length() const { return prompt.size() + response.size(); }

  TokenSequence sequence() const {
    TokenSequence s = prompt;
    s.insert(s.end(), response.begin(), response.end());
    return s;
  }

  bool operator==(const TrainingExample&) const = default;
};

struct TrainConfig {
  std::size_t K = 3;
  double beta = 0.6;
  double learning_rate = 2e-3;
  double warmup_ratio = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  bool response_only = true;

  void validate() const {
    if (K < 1) throw ConfigError("train: K must be >= 1");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("train: beta must lie in (0, 1]");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train: warmup_ratio must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("train: adam moment coefficients must lie in [0, 1)");
    }
  }
};

// alpha_k = beta^(k-1) / sum_j beta^(j-1), k = 1..K.
inline std::vector<double> step_weights(std::size_t K, double beta) {
  if (K < 1) throw ConfigError("step_weights: K must be >= 1");
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("step_weights: beta must lie in (0, 1]");
  std::vector<double> w(K);
  double p = 1.0, z = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    w[k] = p;
    z += p;
    p *= beta;
  }
  for (double& x : w) x /= z;
  return w;
}

struct LossReport {
  std::vector<double> step_losses;       // mean CE per draft step
  std::vector<std::size_t> step_counts;  // contributing positions per step
  std::vector<double> weights;
  double total = 0.0;                    // sum_k weights[k] * step_losses[k]
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  std::size_t skipped = 0;               // sequences shorter than K + 1
};

namespace detail {

// Position i (0-based) trains step k (1-based) against token i + k + 1 when
// i <= T - K - 1, that token exists, and it lies past the prompt.
inline bool mtp_position_counts(std::size_t T, std::size_t prompt_len, std::size_t K, std::size_t k,
                                std::size_t i, bool response_only) {
  if (i + K + 1 > T) return false;
  const std::size_t target = i + k + 1;
  if (target >= T) return false;
  return !response_only || target >= prompt_len;
}

inline Tensor frozen_hidden(const MainModel& main, std::span<const TokenId> seq) {
  Tape tape(false);
  return tape.value(main_hidden(tape, main, seq, nullptr));
}

// Adds one sequence's contribution to the batch loss: sum over steps of
// alpha_k / count_k * sum of contributing CE. Gradients land on the head.
inline void mtp_sequence_loss(const MainModel& main, MTPHead& head, std::span<const TokenId> seq,
                              std::size_t prompt_len, const Tensor& main_h, const TrainConfig& cfg,
                              std::span<const double> alphas, std::span<const std::size_t> counts,
                              std::vector<double>& step_sums, bool record) {
  const std::size_t T = seq.size(), K = cfg.K;
  Tape tape(record);
  Var h = tape.constant_ref(main_h);
  std::vector<Var> terms;
  for (std::size_t k = 1; k <= K; ++k) {
    const std::size_t n = T - k;  // entries (h_i, t_{i+k}), i = 0..T-k-1
    Var hp = ops::slice_rows(tape, h, 0, n);
    Var y = head_hidden(tape, head, main, hp, seq.subspan(k, n), k, nullptr);
    const std::size_t rows = T - k - 1;  // rows whose target exists
    if (rows > 0 && counts[k - 1] > 0) {
      Var pre = ops::slice_rows(tape, head_pre_logits(tape, head, y), 0, rows);
      Var logits = ops::linear(tape, pre, tape.bind(main.output_head()));
      std::vector<TokenId> targets(seq.begin() + static_cast<std::ptrdiff_t>(k + 1), seq.end());
      std::vector<double> w(rows, 0.0);
      const double scale = alphas[k - 1] / static_cast<double>(counts[k - 1]);
      for (std::size_t i = 0; i < rows; ++i) {
        if (mtp_position_counts(T, prompt_len, K, k, i, cfg.response_only)) w[i] = scale;
      }
      std::vector<double> row_ce;
      terms.push_back(ops::cross_entropy(tape, logits, targets, w, &row_ce));
      for (std::size_t i = 0; i < rows; ++i) {
        if (w[i] != 0.0) step_sums[k - 1] += row_ce[i];
      }
    }
    h = y;
  }
  if (record && !terms.empty()) {
    std::vector<double> ones(terms.size(), 1.0);
    tape.backward(ops::weighted_sum(tape, terms, ones));
  }
}

}  // namespace detail

// One frozen main-model pass per example, then K sequential head passes;
// step k consumes step k-1's hidden chain (step 1 consumes the main model's)
// and the embeddings of tokens shifted by k, and is scored against tokens
// shifted by k + 1. Gradients accumulate into the head only; the caller
// zeroes them. `main_hidden_cache`, when given, holds one frozen hidden
// tensor per example and skips the backbone pass.
inline LossReport mtp_training_loss(const MainModel& main, MTPHead& head, std::span<const TrainingExample> batch,
                                    const TrainConfig& cfg, const std::vector<const Tensor*>* main_hidden_cache = nullptr,
                                    bool compute_grad = true) {
  cfg.validate();
  const std::size_t K = cfg.K;
  LossReport rep;
  rep.weights = step_weights(K, cfg.beta);
  rep.step_losses.assign(K, 0.0);
  rep.step_counts.assign(K, 0);

  std::vector<TokenSequence> seqs;
  std::vector<std::size_t> used;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].length() < K + 1) {
      ++rep.skipped;
      continue;
    }
    seqs.push_back(batch[b].sequence());
    used.push_back(b);
    const std::size_t T = seqs.back().size();
    for (std::size_t k = 1; k <= K; ++k) {
      for (std::size_t i = 0; i + K + 1 <= T; ++i) {
        if (detail::mtp_position_counts(T, batch[b].prompt.size(), K, k, i, cfg.response_only)) {
          ++rep.step_counts[k - 1];
        }
      }
    }
    rep.tokens_seen += T;
  }

  std::vector<double> sums(K, 0.0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const std::size_t b = used[s];
    Tensor local;
    const Tensor* hidden = main_hidden_cache ? (*main_hidden_cache)[b] : nullptr;
    if (!hidden) {
      local = detail::frozen_hidden(main, seqs[s]);
      hidden = &local;
    }
    detail::mtp_sequence_loss(main, head, seqs[s], batch[b].prompt.size(), *hidden, cfg, rep.weights,
                              rep.step_counts, sums, compute_grad);
  }
  for (std::size_t k = 0; k < K; ++k) {
    rep.step_losses[k] = rep.step_counts[k] ? sums[k] / static_cast<double>(rep.step_counts[k]) : 0.0;
    rep.total += rep.weights[k] * rep.step_losses[k];
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Optimization.

// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0.
inline double cosine_lr(std::size_t step, std::size_t total, double base, double warmup_ratio) {
  if (total == 0) return base;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(total - warm, 1));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, double beta1, double beta2, double eps, double weight_decay)
      : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    for (Tensor* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  // Global L2 norm of all gradients.
  double grad_norm() const {
    double s = 0.0;
    for (Tensor* p : params_) {
      if (!p->has_grad()) continue;
      for (double g : p->grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  void step(double lr, double clip = 0.0) {
    ++t_;
    double scale = 1.0;
    if (clip > 0.0) {
      const double n = grad_norm();
      if (n > clip) scale = clip / n;
    }
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      if (!p.has_grad()) continue;
      auto g = std::as_const(p).grad();
      auto w = p.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * scale;
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
        const double mhat = m_[i][j] / c1, vhat = v_[i][j] / c2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[j]);
      }
    }
  }

  void zero_grad() {
    for (Tensor* p : params_) p->clear_grad();
  }

 private:
  std::vector<Tensor*> params_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
}

inline std::string loss_diagnostic(const LossReport& r) {
  std::ostringstream ss;
  ss << "step " << r.step << " per-step losses [";
  for (std::size_t k = 0; k < r.step_losses.size(); ++k) ss << (k ? ", " : "") << r.step_losses[k];
  ss << "]";
  return ss.str();
}

}  // namespace detail

struct HeadTrainResult {
  MTPHead head;
  std::vector<LossReport> history;          // one report per optimizer step
  std::vector<double> final_epoch_means;    // mean step loss per k over the last epoch
  std::size_t skipped = 0;
};

using TrainProgress = std::function<void(const LossReport&)>;

// Fine-tunes only the head; `main` is read-only throughout.
inline HeadTrainResult train_mtp_head(std::span<const TrainingExample> dataset, const MainModel& main, MTPHead head,
                                      const TrainConfig& cfg, const TrainProgress& progress = {}) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train_mtp_head: empty dataset");
  if (!(head.config == main.config)) throw ConfigError("train_mtp_head: head and main configs differ");

  std::vector<Tensor> hidden(dataset.size());
  std::vector<const Tensor*> hidden_ptr(dataset.size(), nullptr);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].length() < cfg.K + 1) continue;
    hidden[i] = detail::frozen_hidden(main, dataset[i].sequence());
    hidden_ptr[i] = &hidden[i];
  }

  HeadTrainResult res;
  auto params = parameter_list(head);
  AdamW opt(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  const std::size_t per_epoch = (dataset.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_indices(order, rng);
    std::vector<double> sums(cfg.K, 0.0);
    std::size_t reports = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(dataset.size(), lo + cfg.batch_size);
      std::vector<TrainingExample> batch;
      std::vector<const Tensor*> batch_hidden;
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(dataset[order[i]]);
        batch_hidden.push_back(hidden_ptr[order[i]]);
      }
      opt.zero_grad();
      LossReport rep = mtp_training_loss(main, head, batch, cfg, &batch_hidden);
      rep.step = opt.steps();
      res.skipped += rep.skipped;
      if (!std::isfinite(rep.total)) {
        throw NumericError("train_mtp_head: non-finite loss at " + detail::loss_diagnostic(rep));
      }
      if (rep.tokens_seen > 0) {
        opt.step(cosine_lr(opt.steps(), total, cfg.learning_rate, cfg.warmup_ratio), cfg.grad_clip);
        for (std::size_t k = 0; k < cfg.K; ++k) sums[k] += rep.step_losses[k];
        ++reports;
      }
      if (progress) progress(rep);
      res.history.push_back(std::move(rep));
    }
    res.final_epoch_means.assign(cfg.K, 0.0);
    for (std::size_t k = 0; k < cfg.K; ++k) res.final_epoch_means[k] = reports ? sums[k] / static_cast<double>(reports) : 0.0;
  }
  opt.zero_grad();
  res.head = std::move(head);
  return res;
}

// ---------------------------------------------------------------------------
// Backbone pretraining: ordinary next-token cross entropy.

struct PretrainConfig {
  double learning_rate = 3e-3;
  double warmup_ratio = 0.05;
  std::size_t epochs = 4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("pretrain: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("pretrain: warmup_ratio must lie in [0, 1)");
  }
};

struct PretrainResult {
  MainModel model;
  std::vector<double> losses;  // mean next-token CE per optimizer step
};

inline double next_token_loss(MainModel& model, std::span<const TokenSequence> batch, bool compute_grad) {
  std::size_t count = 0;
  for (const auto& s : batch) count += s.size() > 1 ? s.size() - 1 : 0;
  if (count == 0) return 0.0;
  double total = 0.0;
  for (const auto& s : batch) {
    if (s.size() < 2) continue;
    Tape tape(compute_grad);
    const std::span<const TokenId> in(s.data(), s.size() - 1);
    Var logits = main_logits(tape, model, main_hidden(tape, model, in, nullptr));
    std::vector<double> w(in.size(), 1.0 / static_cast<double>(count));
    Var loss = ops::cross_entropy(tape, logits, std::span<const TokenId>(s.data() + 1, in.size()), w);
    total += tape.value(loss)[0];
    if (compute_grad) tape.backward(loss);
  }
  return total;
}

inline PretrainResult pretrain_main(std::span<const TokenSequence> corpus, const ModelConfig& config,
                                    const PretrainConfig& cfg, const std::function<void(std::size_t, double)>& progress = {}) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("pretrain_main: empty corpus");
  PretrainResult res{init_main(config), {}};
  auto params = parameter_list(res.model);
  AdamW opt(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  const std::size_t per_epoch = (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_indices(order, rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<TokenSequence> batch;
      for (std::size_t i = b * cfg.batch_size; i < std::min(corpus.size(), (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(corpus[order[i]]);
      }
      opt.zero_grad();
      const double loss = next_token_loss(res.model, batch, true);
      if (!std::isfinite(loss)) throw NumericError("pretrain_main: non-finite loss at step " + std::to_string(opt.steps()));
      opt.step(cosine_lr(opt.steps(), total, cfg.learning_rate, cfg.warmup_ratio), cfg.grad_clip);
      res.losses.push_back(loss);
      if (progress) progress(opt.steps(), loss);
    }
  }
  opt.zero_grad();
  return res;
}

}  // namespace mtpdraft
