// Shared oracles and helpers for the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rknet/autodiff.hpp"
#include "rknet/ops.hpp"
#include "rknet/rng.hpp"
#include "rknet/tensor.hpp"

namespace rknet::testing {

inline Tensor random_tensor(const Shape& shape, CounterRng& rng, DType dtype = DType::Float64,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(shape, dtype);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
  return t;
}

inline Tensor random_normal(const Shape& shape, CounterRng& rng, DType dtype = DType::Float64) {
  Tensor t(shape, dtype);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
  return t;
}

// Direct seven-loop cross-correlation.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor y({N, O, Ho, Wo}, DType::Float64);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const auto r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const auto q = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += x.at(((n * C + c) * H + static_cast<std::size_t>(r)) * W +
                            static_cast<std::size_t>(q)) *
                       w.at(((o * C + c) * K + ki) * K + kj);
              }
          y.set(((n * O + o) * Ho + i) * Wo + j, acc);
        }
  return y;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double scale = std::max({std::abs(a.at(i)), std::abs(b.at(i)), 1e-300});
    m = std::max(m, std::abs(a.at(i) - b.at(i)) / scale);
  }
  return m;
}

// Finite-difference settings shared by every gradient check.
inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;
// Below this magnitude differences are judged on an absolute scale.
inline constexpr double kGradFloor = 1e-6;

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst;
};

// Compares reverse-mode gradients against central differences on up to
// `samples` coordinates drawn across `params`. `loss` must rebuild the scalar
// loss deterministically on the tape it receives.
inline GradCheckResult grad_check(const std::vector<Parameter*>& params,
                                  const std::function<Var(Tape&)>& loss, std::size_t samples,
                                  std::uint64_t seed = 7) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (auto* p : params) total += p->value.numel();
  if (total <= samples) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i]->value.numel(); ++j) coords.emplace_back(i, j);
  } else {
    CounterRng rng(seed);
    for (std::size_t s = 0; s < samples; ++s) {
      std::size_t flat = rng.below(total), i = 0;
      while (flat >= params[i]->value.numel()) flat -= params[i++]->value.numel();
      coords.emplace_back(i, flat);
    }
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape).value().item();
  };
  GradCheckResult r;
  for (auto [i, j] : coords) {
    Parameter& p = *params[i];
    const double orig = p.value.at(j);
    p.value.set(j, orig + kFdStep);
    const double up = eval();
    p.value.set(j, orig - kFdStep);
    const double down = eval();
    p.value.set(j, orig);
    const double numeric = (up - down) / (2 * kFdStep);
    const double analytic = p.grad.at(j);
    const double err =
        std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
    if (r.worst.empty() || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = p.name + "[" + std::to_string(j) + "] analytic=" + std::to_string(analytic) +
                " numeric=" + std::to_string(numeric);
    }
    ++r.coordinates;
  }
  return r;
}

// sum(y * R) with a fixed random R, so every output element matters.
inline Var weighted_sum(Tape& tape, Var y, std::uint64_t seed = 99) {
  CounterRng rng(seed);
  return ops::sum(ops::mul(y, tape.constant(random_tensor(y.shape(), rng, y.dtype()), "weights")));
}

}  // namespace rknet::testing
