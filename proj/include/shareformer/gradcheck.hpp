// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference verification oracle for reverse-mode gradients.
// Run it in double precision; float round-off swamps the signal at h ~ 1e-5.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <vector>

#include "shareformer/tensor.hpp"

namespace shareformer {

// f builds a scalar loss on a fresh tape each call and must be a fixed
// deterministic function of the current tensor values. x is a tensor whose
// storage f reads (a leaf or a live model parameter); it must require grad.
// Returns the max over coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-12).
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(Tape<T>&)>& f, Tensor<T> x, T h) {
  if (!x.requires_grad()) {
    throw std::invalid_argument("finite_diff_check: tensor does not require grad");
  }

  auto eval = [&]() -> T {
    Tape<T> tape;
    Tensor<T> loss = f(tape);
    if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
    return loss.item();
  };

  // Two evaluations must agree bitwise, otherwise f is not a function of x.
  const T probe1 = eval();
  const T probe2 = eval();
  if (std::memcmp(&probe1, &probe2, sizeof(T)) != 0) {
    throw std::runtime_error("finite_diff_check: f is non-deterministic (two evaluations differ)");
  }

  // Analytic pass.
  std::vector<T> saved_grad;
  {
    Tape<T> tape;
    x.zero_grad();
    Tensor<T> loss = f(tape);
    tape.backward(loss);
    saved_grad = *x.grad;
    x.zero_grad();
  }

  double max_rel = 0.0;
  std::vector<T>& vals = *x.data;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const T keep = vals[i];
    vals[i] = keep + h;
    const double fp = static_cast<double>(eval());
    vals[i] = keep - h;
    const double fm = static_cast<double>(eval());
    vals[i] = keep;
    const double central = (fp - fm) / (2.0 * static_cast<double>(h));
    const double analytic = static_cast<double>(saved_grad[i]);
    const double denom = std::max({std::abs(analytic), std::abs(central), 1e-12});
    max_rel = std::max(max_rel, std::abs(analytic - central) / denom);
  }
  return max_rel;
}

}  // namespace shareformer
