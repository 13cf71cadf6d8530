// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mtpdraft/error.hpp"
#include "mtpdraft/tensor.hpp"

namespace mtpdraft {

// Denominator floor for the relative error, so entries whose true gradient is
// zero compare on absolute error instead of dividing by zero.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
};

// loss_fn must run forward + backward and return the loss; it accumulates
// into the grad of every tensor in `params`. Compares those gradients against
// central differences (f(x+eps) - f(x-eps)) / 2eps over every entry.
inline GradCheckResult grad_check_detailed(const std::function<double()>& loss_fn,
                                           std::span<Tensor* const> params, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-6, 1e-3]");
  auto clear = [&] {
    for (Tensor* p : params) p->clear_grad();
  };
  auto snapshot = [&] {
    std::vector<std::vector<double>> g;
    for (Tensor* p : params) {
      auto s = p->grad();
      g.emplace_back(s.begin(), s.end());
    }
    return g;
  };

  clear();
  const double f0 = loss_fn();
  auto analytic = snapshot();
  clear();
  const double f1 = loss_fn();
  auto again = snapshot();
  clear();
  if (std::bit_cast<std::uint64_t>(f0) != std::bit_cast<std::uint64_t>(f1) || analytic != again) {
    throw DeterminismError("grad_check: loss_fn is not deterministic");
  }

  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p]->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = loss_fn();
      data[i] = saved - eps;
      const double down = loss_fn();
      data[i] = saved;
      clear();
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      res.max_relative_error = std::max(res.max_relative_error, std::abs(a - numeric) / denom);
      ++res.entries;
    }
  }
  return res;
}

inline double grad_check(const std::function<double()>& loss_fn, std::span<Tensor* const> params,
                         double eps = 1e-5) {
  return grad_check_detailed(loss_fn, params, eps).max_relative_error;
}

}  // namespace mtpdraft
