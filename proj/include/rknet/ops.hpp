#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rknet/autodiff.hpp"
#include "rknet/rng.hpp"
#include "rknet/tensor.hpp"

namespace rknet {

enum class Mode { Train, Eval };

/// Running statistics of a batch-norm layer. Not trained; saved in checkpoints.
struct BatchNormStats {
  BatchNormStats() = default;
  BatchNormStats(std::size_t channels, DType dtype)
      : mean(Tensor::zeros({channels}, dtype)), var(Tensor::full({channels}, 1.0, dtype)) {}

  Tensor mean;
  Tensor var;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace ops {

// Cross-correlation of x (N,C,H,W) with w (O,C,K,K), no bias.
Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad);

// Train mode normalizes over (N,H,W) and updates `stats`; eval mode reads them.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode);

Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
// x * s for a one-element s.
Var scale_by(Var x, Var s);
// x (N,C,H,W) times gate (N,C), broadcast over H and W.
Var scale_channels(Var x, Var gate);
// One-element s broadcast to `shape`.
Var broadcast_scalar(Var s, const Shape& shape);
Var sum(Var x);

Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(Var x, std::size_t start, std::size_t count);
std::vector<Var> split_channels(Var x, std::span<const std::size_t> sizes);

Var avgpool2d(Var x, std::size_t kernel, std::size_t stride);
// (N,C,H,W) -> (N,C)
Var global_avg_pool(Var x);
// x (N,F), w (O,F), b (O) -> (N,O)
Var fully_connected(Var x, Var w, Var b);

// Eval mode, or p == 0, returns x unchanged.
Var dropout(Var x, double p, Mode mode, CounterRng& rng);

// Mean over the batch of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

}  // namespace ops
}  // namespace rknet
