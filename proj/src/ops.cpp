#include "rknet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace rknet::ops {

namespace {

using detail::gemm_nn;
using detail::gemm_tn;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

void require_scalar(const Tensor& t, const char* op) {
  if (t.numel() != 1) {
    throw ShapeError(std::string(op) + ": expected a one-element tensor, got shape " +
                     shape_to_string(t.shape()));
  }
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t K,
            std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW, T* col) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < K; ++ki) {
      for (std::size_t kj = 0; kj < K; ++kj) {
        T* row = col + ((c * K + ki) * K + kj) * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oh * OW;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                          ? T(0)
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t K,
                std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW, T* x) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < K; ++ki) {
      for (std::size_t kj = 0; kj < K; ++kj) {
        const T* row = col + ((c * K + ki) * K + kj) * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* src = row + oh * OW;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) {
              dst[static_cast<std::size_t>(iw)] += src[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void transpose(const T* a, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
}

struct ConvGeometry {
  std::size_t N, C, H, W, O, K, stride, pad, OH, OW;
  bool direct() const { return K == 1 && stride == 1 && pad == 0; }
};

template <typename T>
Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  Tensor out({g.N, g.O, g.OH, g.OW}, x.dtype());
  const auto xs = x.data<T>();
  const auto ws = w.data<T>();
  auto ys = out.data<T>();
  const std::size_t ckk = g.C * g.K * g.K;
  const std::size_t ohw = g.OH * g.OW;
  std::vector<T> col(g.direct() ? 0 : ckk * ohw);
  for (std::size_t n = 0; n < g.N; ++n) {
    const T* xn = xs.data() + n * g.C * g.H * g.W;
    const T* src = xn;
    if (!g.direct()) {
      im2col(xn, g.C, g.H, g.W, g.K, g.stride, g.pad, g.OH, g.OW, col.data());
      src = col.data();
    }
    gemm_nn(g.O, ohw, ckk, ws.data(), src, ys.data() + n * g.O * ohw);
  }
  return out;
}

template <typename T>
void conv_backward(Tape& tape, Var xv, Var wv, const Tensor& gy, const ConvGeometry& g) {
  const bool need_x = tape.requires_grad(xv);
  const bool need_w = tape.requires_grad(wv);
  const Tensor& x = xv.value();
  const Tensor& w = wv.value();
  const std::size_t ckk = g.C * g.K * g.K;
  const std::size_t ohw = g.OH * g.OW;
  Tensor gx = need_x ? Tensor::zeros(x.shape(), x.dtype()) : Tensor();
  Tensor gw = need_w ? Tensor::zeros(w.shape(), w.dtype()) : Tensor();
  std::vector<T> col(ckk * ohw);
  std::vector<T> colT(need_w ? ckk * ohw : 0);
  const auto xs = x.data<T>();
  const auto ws = w.data<T>();
  const auto gys = gy.data<T>();
  for (std::size_t n = 0; n < g.N; ++n) {
    const T* gyn = gys.data() + n * g.O * ohw;
    if (need_w) {
      const T* xn = xs.data() + n * g.C * g.H * g.W;
      const T* src = xn;
      if (!g.direct()) {
        im2col(xn, g.C, g.H, g.W, g.K, g.stride, g.pad, g.OH, g.OW, col.data());
        src = col.data();
      }
      transpose(src, ckk, ohw, colT.data());
      gemm_nn(g.O, ckk, ohw, gyn, colT.data(), gw.data<T>().data());
    }
    if (need_x) {
      T* gxn = gx.data<T>().data() + n * g.C * g.H * g.W;
      if (g.direct()) {
        gemm_tn(ckk, ohw, g.O, ws.data(), gyn, gxn);
      } else {
        std::fill(col.begin(), col.end(), T(0));
        gemm_tn(ckk, ohw, g.O, ws.data(), gyn, col.data());
        col2im_add(col.data(), g.C, g.H, g.W, g.K, g.stride, g.pad, g.OH, g.OW, gxn);
      }
    }
  }
  if (need_x) tape.accumulate(xv, gx);
  if (need_w) tape.accumulate(wv, gw);
}

// Elementwise unary op helper: fwd(x) -> y, local derivative from (x, y).
template <typename Fwd, typename Deriv>
Var unary(const char* name, Var x, Fwd fwd, Deriv deriv) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape(), xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto xs = xt.data<T>();
    auto ys = out.data<T>();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = static_cast<T>(fwd(xs[i]));
  });
  Tape& tape = x.tape();
  const std::size_t yid = tape.size();
  return tape.record(name, std::move(out), {x}, [x, deriv, yid](Tape& t, const Tensor& gy) {
    Tensor gx(gy.shape(), gy.dtype());
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto xs = t.value(x).data<T>();
      auto ys = t.value(yid).data<T>();
      auto gs = gy.data<T>();
      auto out = gx.data<T>();
      for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = static_cast<T>(gs[i] * deriv(xs[i], ys[i]));
      }
    });
    t.accumulate(x, gx);
  });
}

}  // namespace

Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad) {
  const Tensor& xt = x.value();
  const Tensor& wt = w.value();
  require_rank(xt, 4, "conv2d", "input");
  require_rank(wt, 4, "conv2d", "weight");
  require_same_dtype(xt, wt, "conv2d");
  if (wt.dim(1) != xt.dim(1) || wt.dim(2) != wt.dim(3)) {
    throw ShapeError("conv2d: weight " + shape_to_string(wt.shape()) +
                     " incompatible with input " + shape_to_string(xt.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.N = xt.dim(0);
  g.C = xt.dim(1);
  g.H = xt.dim(2);
  g.W = xt.dim(3);
  g.O = wt.dim(0);
  g.K = wt.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (g.H + 2 * pad < g.K || g.W + 2 * pad < g.K) {
    throw ShapeError("conv2d: kernel " + shape_to_string(wt.shape()) + " larger than padded input " +
                     shape_to_string(xt.shape()));
  }
  g.OH = (g.H + 2 * pad - g.K) / stride + 1;
  g.OW = (g.W + 2 * pad - g.K) / stride + 1;
  Tensor out = visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    return conv_forward<T>(xt, wt, g);
  });
  return x.tape().record("conv2d", std::move(out), {x, w}, [x, w, g](Tape& t, const Tensor& gy) {
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      conv_backward<T>(t, x, w, gy, g);
    });
  });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode) {
  const Tensor& xt = x.value();
  require_rank(xt, 4, "batchnorm2d", "input");
  const std::size_t N = xt.dim(0), C = xt.dim(1), HW = xt.dim(2) * xt.dim(3);
  for (const Tensor* p : {&gamma.value(), &beta.value(), static_cast<const Tensor*>(&stats.mean),
                          static_cast<const Tensor*>(&stats.var)}) {
    if (p->rank() != 1 || p->dim(0) != C) {
      throw ShapeError("batchnorm2d: channel-count mismatch, input " + shape_to_string(xt.shape()) +
                       " vs per-channel tensor " + shape_to_string(p->shape()));
    }
  }
  const std::size_t M = N * HW;
  std::vector<double> mean(C), invstd(C);
  if (mode == Mode::Train) {
    visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto xs = xt.data<T>();
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = xs.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) s += p[i];
        }
        const double mu = s / static_cast<double>(M);
        double ss = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const T* p = xs.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
        }
        const double var = ss / static_cast<double>(M);
        mean[c] = mu;
        invstd[c] = 1.0 / std::sqrt(var + kBatchNormEpsilon);
        const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
        stats.mean.set(c, (1 - kBatchNormMomentum) * stats.mean.at(c) + kBatchNormMomentum * mu);
        stats.var.set(c, (1 - kBatchNormMomentum) * stats.var.at(c) + kBatchNormMomentum * unbiased);
      }
    });
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.mean.at(c);
      invstd[c] = 1.0 / std::sqrt(stats.var.at(c) + kBatchNormEpsilon);
    }
  }
  Tensor out(xt.shape(), xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto xs = xt.data<T>();
    auto ys = out.data<T>();
    auto gs = gamma.value().data<T>();
    auto bs = beta.value().data<T>();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (n * C + c) * HW;
        const double scale = gs[c] * invstd[c];
        const double shift = bs[c] - mean[c] * scale;
        for (std::size_t i = 0; i < HW; ++i) {
          ys[off + i] = static_cast<T>(xs[off + i] * scale + shift);
        }
      }
    }
  });
  return x.tape().record(
      "batchnorm2d", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, invstd, mode, N, C, HW, M](Tape& t, const Tensor& gy) {
        visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
          auto xs = t.value(x).data<T>();
          auto gs = gy.data<T>();
          auto gamma_s = t.value(gamma).data<T>();
          std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                const double xhat = (xs[off + i] - mean[c]) * invstd[c];
                sum_dy[c] += gs[off + i];
                sum_dy_xhat[c] += gs[off + i] * xhat;
              }
            }
          }
          if (t.requires_grad(x)) {
            Tensor gx(gy.shape(), gy.dtype());
            auto gxs = gx.data<T>();
            for (std::size_t n = 0; n < N; ++n) {
              for (std::size_t c = 0; c < C; ++c) {
                const std::size_t off = (n * C + c) * HW;
                const double k = gamma_s[c] * invstd[c];
                for (std::size_t i = 0; i < HW; ++i) {
                  if (mode == Mode::Train) {
                    const double xhat = (xs[off + i] - mean[c]) * invstd[c];
                    gxs[off + i] = static_cast<T>(
                        k / static_cast<double>(M) *
                        (static_cast<double>(M) * gs[off + i] - sum_dy[c] - xhat * sum_dy_xhat[c]));
                  } else {
                    gxs[off + i] = static_cast<T>(k * gs[off + i]);
                  }
                }
              }
            }
            t.accumulate(x, gx);
          }
          Tensor ggamma({C}, gy.dtype()), gbeta({C}, gy.dtype());
          for (std::size_t c = 0; c < C; ++c) {
            ggamma.set(c, sum_dy_xhat[c]);
            gbeta.set(c, sum_dy[c]);
          }
          t.accumulate(gamma, ggamma);
          t.accumulate(beta, gbeta);
        });
      });
}

Var relu(Var x) {
  return unary(
      // NaN passes through so non-finite values are not masked.
      "relu", x, [](auto v) { return v < 0 ? decltype(v)(0) : v; },
      [](auto xv, auto) { return xv > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary(
      "sigmoid", x,
      [](auto v) {
        using T = decltype(v);
        // Stable for large |v|.
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return static_cast<double>(y) * (1.0 - static_cast<double>(y)); });
}

Var exp(Var x) {
  return unary(
      "exp", x, [](auto v) { return std::exp(v); },
      [](auto, auto y) { return static_cast<double>(y); });
}

Var scale(Var x, double factor) {
  return unary(
      "scale", x, [factor](auto v) { return v * static_cast<decltype(v)>(factor); },
      [factor](auto, auto) { return factor; });
}

Var add(Var a, Var b) {
  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  require_same_shape(at, bt, "add");
  require_same_dtype(at, bt, "add");
  Tensor out = at;
  out.add_inplace(bt);
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

Var mul(Var a, Var b) {
  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  require_same_shape(at, bt, "mul");
  require_same_dtype(at, bt, "mul");
  Tensor out(at.shape(), at.dtype());
  visit_dtype(at.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto x = at.data<T>();
    auto y = bt.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  });
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gy) {
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      Tensor ga(gy.shape(), gy.dtype()), gb(gy.shape(), gy.dtype());
      auto x = t.value(a).data<T>();
      auto y = t.value(b).data<T>();
      auto gas = ga.data<T>();
      auto gbs = gb.data<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gas[i] = g[i] * y[i];
        gbs[i] = g[i] * x[i];
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  });
}

Var scale_by(Var x, Var s) {
  const Tensor& xt = x.value();
  const Tensor& st = s.value();
  require_scalar(st, "scale_by");
  require_same_dtype(xt, st, "scale_by");
  Tensor out(xt.shape(), xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    const T f = st.data<T>()[0];
    auto xs = xt.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] * f;
  });
  return x.tape().record("scale_by", std::move(out), {x, s}, [x, s](Tape& t, const Tensor& gy) {
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto xs = t.value(x).data<T>();
      const T f = t.value(s).data<T>()[0];
      Tensor gx(gy.shape(), gy.dtype());
      auto gxs = gx.data<T>();
      double gs = 0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        gxs[i] = g[i] * f;
        gs += static_cast<double>(g[i]) * xs[i];
      }
      t.accumulate(x, gx);
      Tensor gst(t.value(s).shape(), gy.dtype());
      gst.set(0, gs);
      t.accumulate(s, gst);
    });
  });
}

Var scale_channels(Var x, Var gate) {
  const Tensor& xt = x.value();
  const Tensor& gt = gate.value();
  require_rank(xt, 4, "scale_channels", "input");
  require_rank(gt, 2, "scale_channels", "gate");
  require_same_dtype(xt, gt, "scale_channels");
  if (gt.dim(0) != xt.dim(0) || gt.dim(1) != xt.dim(1)) {
    throw ShapeError("scale_channels: gate " + shape_to_string(gt.shape()) + " does not match input " +
                     shape_to_string(xt.shape()));
  }
  const std::size_t NC = xt.dim(0) * xt.dim(1), HW = xt.dim(2) * xt.dim(3);
  Tensor out(xt.shape(), xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto xs = xt.data<T>();
    auto gs = gt.data<T>();
    auto o = out.data<T>();
    for (std::size_t p = 0; p < NC; ++p) {
      for (std::size_t i = 0; i < HW; ++i) o[p * HW + i] = xs[p * HW + i] * gs[p];
    }
  });
  return x.tape().record("scale_channels", std::move(out), {x, gate},
                         [x, gate, NC, HW](Tape& t, const Tensor& gy) {
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto xs = t.value(x).data<T>();
      auto gs = t.value(gate).data<T>();
      Tensor gx(gy.shape(), gy.dtype());
      Tensor gg(t.value(gate).shape(), gy.dtype());
      auto gxs = gx.data<T>();
      auto ggs = gg.data<T>();
      for (std::size_t p = 0; p < NC; ++p) {
        double acc = 0;
        for (std::size_t i = 0; i < HW; ++i) {
          gxs[p * HW + i] = g[p * HW + i] * gs[p];
          acc += static_cast<double>(g[p * HW + i]) * xs[p * HW + i];
        }
        ggs[p] = static_cast<T>(acc);
      }
      t.accumulate(x, gx);
      t.accumulate(gate, gg);
    });
  });
}

Var broadcast_scalar(Var s, const Shape& shape) {
  const Tensor& st = s.value();
  require_scalar(st, "broadcast_scalar");
  Tensor out = Tensor::full(shape, st.at(0), st.dtype());
  return s.tape().record("broadcast_scalar", std::move(out), {s}, [s](Tape& t, const Tensor& gy) {
    double acc = 0;
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      for (T v : gy.data<T>()) acc += v;
    });
    Tensor gs(t.value(s).shape(), gy.dtype());
    gs.set(0, acc);
    t.accumulate(s, gs);
  });
}

Var sum(Var x) {
  const Tensor& xt = x.value();
  double acc = 0;
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    for (T v : xt.data<T>()) acc += v;
  });
  Tensor out = Tensor::full({1}, acc, xt.dtype());
  return x.tape().record("sum", std::move(out), {x}, [x](Tape& t, const Tensor& gy) {
    t.accumulate(x, Tensor::full(t.value(x).shape(), gy.at(0), gy.dtype()));
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Tensor& first = parts.front().value();
  // Rank-2 (N,C) inputs are treated as 1x1 planes.
  const std::size_t rank = first.rank();
  if (rank != 2) require_rank(first, 4, "concat_channels", "input");
  const std::size_t N = first.dim(0);
  const std::size_t H = rank == 4 ? first.dim(2) : 1, W = rank == 4 ? first.dim(3) : 1;
  std::size_t C = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    const Tensor& t = p.value();
    require_rank(t, rank, "concat_channels", "input");
    require_same_dtype(first, t, "concat_channels");
    if (t.dim(0) != N || (rank == 4 && (t.dim(2) != H || t.dim(3) != W))) {
      throw ShapeError("concat_channels: shape " + shape_to_string(t.shape()) +
                       " incompatible with " + shape_to_string(first.shape()));
    }
    sizes.push_back(t.dim(1));
    C += t.dim(1);
  }
  const std::size_t HW = H * W;
  Tensor out(rank == 4 ? Shape{N, C, H, W} : Shape{N, C}, first.dtype());
  visit_dtype(first.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto o = out.data<T>();
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      auto src = p.value().data<T>();
      const std::size_t Ci = p.value().dim(1);
      for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(src.data() + n * Ci * HW, Ci * HW, o.data() + (n * C + c0) * HW);
      }
      c0 += Ci;
    }
  });
  return parts.front().tape().record(
      "concat_channels", std::move(out), parts, [parts, sizes, N, C, HW](Tape& t, const Tensor& gy) {
        visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
          auto g = gy.data<T>();
          std::size_t c0 = 0;
          for (std::size_t k = 0; k < parts.size(); ++k) {
            const std::size_t Ci = sizes[k];
            if (t.requires_grad(parts[k])) {
              Tensor gp(t.value(parts[k]).shape(), gy.dtype());
              auto d = gp.data<T>();
              for (std::size_t n = 0; n < N; ++n) {
                std::copy_n(g.data() + (n * C + c0) * HW, Ci * HW, d.data() + n * Ci * HW);
              }
              t.accumulate(parts[k], gp);
            }
            c0 += Ci;
          }
        });
      });
}

Var slice_channels(Var x, std::size_t start, std::size_t count) {
  const Tensor& xt = x.value();
  require_rank(xt, 4, "slice_channels", "input");
  if (count == 0 || start + count > xt.dim(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + shape_to_string(xt.shape()));
  }
  const std::size_t N = xt.dim(0), C = xt.dim(1), HW = xt.dim(2) * xt.dim(3);
  Tensor out({N, count, xt.dim(2), xt.dim(3)}, xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto s = xt.data<T>();
    auto o = out.data<T>();
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(s.data() + (n * C + start) * HW, count * HW, o.data() + n * count * HW);
    }
  });
  return x.tape().record("slice_channels", std::move(out), {x},
                         [x, start, count, N, C, HW](Tape& t, const Tensor& gy) {
    Tensor gx = Tensor::zeros(t.value(x).shape(), gy.dtype());
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto d = gx.data<T>();
      for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(g.data() + n * count * HW, count * HW, d.data() + (n * C + start) * HW);
      }
    });
    t.accumulate(x, gx);
  });
}

std::vector<Var> split_channels(Var x, std::span<const std::size_t> sizes) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (x.value().rank() != 4 || total != x.value().dim(1)) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but input is " +
                     shape_to_string(x.value().shape()));
  }
  std::vector<Var> out;
  std::size_t start = 0;
  for (auto s : sizes) {
    out.push_back(slice_channels(x, start, s));
    start += s;
  }
  return out;
}

Var avgpool2d(Var x, std::size_t kernel, std::size_t stride) {
  const Tensor& xt = x.value();
  require_rank(xt, 4, "avgpool2d", "input");
  if (kernel < 1 || stride < 1 || xt.dim(2) < kernel || xt.dim(3) < kernel) {
    throw ShapeError("avgpool2d: kernel " + std::to_string(kernel) + " does not fit input " +
                     shape_to_string(xt.shape()));
  }
  const std::size_t NC = xt.dim(0) * xt.dim(1), H = xt.dim(2), W = xt.dim(3);
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  Tensor out({xt.dim(0), xt.dim(1), OH, OW}, xt.dtype());
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto s = xt.data<T>();
    auto o = out.data<T>();
    for (std::size_t p = 0; p < NC; ++p) {
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double acc = 0;
          for (std::size_t i = 0; i < kernel; ++i) {
            for (std::size_t j = 0; j < kernel; ++j) {
              acc += s[(p * H + oh * stride + i) * W + ow * stride + j];
            }
          }
          o[(p * OH + oh) * OW + ow] = static_cast<T>(acc * inv);
        }
      }
    }
  });
  return x.tape().record("avgpool2d", std::move(out), {x},
                         [x, kernel, stride, NC, H, W, OH, OW, inv](Tape& t, const Tensor& gy) {
    Tensor gx = Tensor::zeros(t.value(x).shape(), gy.dtype());
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto d = gx.data<T>();
      for (std::size_t p = 0; p < NC; ++p) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const T v = static_cast<T>(g[(p * OH + oh) * OW + ow] * inv);
            for (std::size_t i = 0; i < kernel; ++i) {
              for (std::size_t j = 0; j < kernel; ++j) {
                d[(p * H + oh * stride + i) * W + ow * stride + j] += v;
              }
            }
          }
        }
      }
    });
    t.accumulate(x, gx);
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xt = x.value();
  require_rank(xt, 4, "global_avg_pool", "input");
  const std::size_t N = xt.dim(0), C = xt.dim(1), HW = xt.dim(2) * xt.dim(3);
  Tensor out({N, C}, xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto s = xt.data<T>();
    auto o = out.data<T>();
    for (std::size_t p = 0; p < N * C; ++p) {
      double acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += s[p * HW + i];
      o[p] = static_cast<T>(acc / static_cast<double>(HW));
    }
  });
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, N, C, HW](Tape& t, const Tensor& gy) {
    Tensor gx(t.value(x).shape(), gy.dtype());
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto d = gx.data<T>();
      for (std::size_t p = 0; p < N * C; ++p) {
        const T v = static_cast<T>(g[p] / static_cast<double>(HW));
        std::fill_n(d.data() + p * HW, HW, v);
      }
    });
    t.accumulate(x, gx);
  });
}

Var fully_connected(Var x, Var w, Var b) {
  const Tensor& xt = x.value();
  const Tensor& wt = w.value();
  const Tensor& bt = b.value();
  require_rank(xt, 2, "fully_connected", "input");
  require_rank(wt, 2, "fully_connected", "weight");
  require_rank(bt, 1, "fully_connected", "bias");
  require_same_dtype(xt, wt, "fully_connected");
  require_same_dtype(xt, bt, "fully_connected");
  const std::size_t N = xt.dim(0), F = xt.dim(1), O = wt.dim(0);
  if (wt.dim(1) != F || bt.dim(0) != O) {
    throw ShapeError("fully_connected: input " + shape_to_string(xt.shape()) + ", weight " +
                     shape_to_string(wt.shape()) + ", bias " + shape_to_string(bt.shape()));
  }
  Tensor out({N, O}, xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto xs = xt.data<T>();
    auto ws = wt.data<T>();
    auto bs = bt.data<T>();
    auto o = out.data<T>();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < O; ++k) {
        T acc = bs[k];
        for (std::size_t f = 0; f < F; ++f) acc += xs[n * F + f] * ws[k * F + f];
        o[n * O + k] = acc;
      }
    }
  });
  return x.tape().record("fully_connected", std::move(out), {x, w, b},
                         [x, w, b, N, F, O](Tape& t, const Tensor& gy) {
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto xs = t.value(x).data<T>();
      auto ws = t.value(w).data<T>();
      Tensor gx({N, F}, gy.dtype()), gw({O, F}, gy.dtype()), gb({O}, gy.dtype());
      auto gxs = gx.data<T>();
      auto gws = gw.data<T>();
      auto gbs = gb.data<T>();
      gemm_nn(N, F, O, g.data(), ws.data(), gxs.data());
      gemm_tn(O, F, N, g.data(), xs.data(), gws.data());
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < O; ++k) gbs[k] += g[n * O + k];
      }
      t.accumulate(x, gx);
      t.accumulate(w, gw);
      t.accumulate(b, gb);
    });
  });
}

Var dropout(Var x, double p, Mode mode, CounterRng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::Eval || p == 0.0) return x;
  const Tensor& xt = x.value();
  Tensor mask(xt.shape(), xt.dtype());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    mask.set(i, rng.uniform() < p ? 0.0 : keep_scale);
  }
  Tensor out(xt.shape(), xt.dtype());
  visit_dtype(xt.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto xs = xt.data<T>();
    auto ms = mask.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] * ms[i];
  });
  return x.tape().record("dropout", std::move(out), {x}, [x, mask](Tape& t, const Tensor& gy) {
    Tensor gx(gy.shape(), gy.dtype());
    visit_dtype(gy.dtype(), [&]<typename T>(std::type_identity<T>) {
      auto g = gy.data<T>();
      auto ms = mask.data<T>();
      auto d = gx.data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * ms[i];
    });
    t.accumulate(x, gx);
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lt = logits.value();
  require_rank(lt, 2, "softmax_cross_entropy", "logits");
  const std::size_t N = lt.dim(0), K = lt.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) +
                              " outside [0, " + std::to_string(K) + ")");
    }
  }
  std::vector<double> probs(N * K);
  double loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double mx = lt.at(n * K);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, lt.at(n * K + k));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) {
      probs[n * K + k] = std::exp(lt.at(n * K + k) - mx);
      z += probs[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= z;
    loss += -(lt.at(n * K + static_cast<std::size_t>(labels[n])) - mx - std::log(z));
  }
  loss /= static_cast<double>(N);
  std::vector<int> label_copy(labels.begin(), labels.end());
  return logits.tape().record(
      "softmax_cross_entropy", Tensor::full({1}, loss, lt.dtype()), {logits},
      [logits, probs = std::move(probs), label_copy, N, K](Tape& t, const Tensor& gy) {
        const double g = gy.at(0) / static_cast<double>(N);
        Tensor gl({N, K}, gy.dtype());
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const double onehot = static_cast<int>(k) == label_copy[n] ? 1.0 : 0.0;
            gl.set(n * K + k, g * (probs[n * K + k] - onehot));
          }
        }
        t.accumulate(logits, gl);
      });
}

}  // namespace rknet::ops
