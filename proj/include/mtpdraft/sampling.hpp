// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/tensor.hpp"

namespace mtpdraft {

struct SamplingConfig {
  double temperature = 0.6;
  std::size_t top_k = 20;  // 0 disables
  double top_p = 0.95;

  void validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("sampling: temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampling: top_p must lie in (0, 1]");
  }
};

// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
// unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

// Inverse-CDF draw from unnormalized nonnegative weights.
inline std::size_t sample_weighted(std::span<const double> weights, std::mt19937_64& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw NumericError("sample_weighted: weights must have positive mass");
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // Rounding left u at the very top; return the last index with mass.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

// Temperature 0 is greedy. Otherwise: scale by 1/T, keep the top_k logits
// (ties to the lower id), keep the smallest prefix whose probability mass
// reaches top_p, renormalize and draw.
inline TokenId sample_token(std::span<const double> logits, const SamplingConfig& cfg, std::mt19937_64& rng) {
  if (cfg.temperature == 0.0) return greedy_argmax(logits);
  for (double x : logits) {
    if (!std::isfinite(x)) throw NumericError("sample_token: non-finite logit");
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (cfg.top_k > 0 && cfg.top_k < order.size()) order.resize(cfg.top_k);

  const double mx = logits[order.front()];
  std::vector<double> p(order.size());
  double z = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    p[i] = std::exp((logits[order[i]] - mx) / cfg.temperature);
    z += p[i];
  }
  double acc = 0.0;
  std::size_t keep = p.size();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] /= z;
    acc += p[i];
    if (acc >= cfg.top_p) {
      keep = i + 1;
      break;
    }
  }
  p.resize(keep);
  return static_cast<TokenId>(order[sample_weighted(p, rng)]);
}

}  // namespace mtpdraft
