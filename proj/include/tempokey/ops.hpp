#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tempokey/autograd.hpp"

namespace tk {

using Rng = std::mt19937_64;

enum class Mode { train, eval };
enum class Padding { same, valid };
enum class PoolMode { max, avg };

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
};

inline ConvGeometry conv_geometry(std::size_t h, std::size_t w,
                                  std::size_t kh, std::size_t kw,
                                  Padding padding) {
  if (kh == 0 || kw == 0) throw ShapeError("conv2d: empty kernel");
  if (padding == Padding::same) {
    return {(kh - 1) / 2, (kw - 1) / 2, h, w};
  }
  if (kh > h || kw > w) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " larger than input " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  return {0, 0, h - kh + 1, w - kw + 1};
}

namespace detail {

// Output indices i with 0 <= i + u - pad < extent, clipped to [0, out).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t u,
                                                       std::size_t pad,
                                                       std::size_t extent,
                                                       std::size_t out) {
  const long lo = std::max<long>(0, static_cast<long>(pad) - static_cast<long>(u));
  const long hi = std::min<long>(static_cast<long>(out),
                                 static_cast<long>(extent + pad) - static_cast<long>(u));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

namespace detail {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// cols[(c*kh + u)*kw + v, i*out_w + j] = x[c, i+u-pad_top, j+v-pad_left], zero outside.
template <typename T>
void im2col(const T* x, std::size_t chans, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, const ConvGeometry& g, MatrixRM<T>& cols) {
  cols.setZero(static_cast<Eigen::Index>(chans * kh * kw),
               static_cast<Eigen::Index>(g.out_h * g.out_w));
  for (std::size_t c = 0; c < chans; ++c)
    for (std::size_t u = 0; u < kh; ++u) {
      const auto [i0, i1] = valid_range(u, g.pad_top, h, g.out_h);
      for (std::size_t v = 0; v < kw; ++v) {
        const auto [j0, j1] = valid_range(v, g.pad_left, w, g.out_w);
        T* row = cols.data() + ((c * kh + u) * kw + v) * g.out_h * g.out_w;
        for (std::size_t i = i0; i < i1; ++i) {
          const T* xr = x + (c * h + i + u - g.pad_top) * w + v - g.pad_left;
          std::copy(xr + j0, xr + j1, row + i * g.out_w + j0);
        }
      }
    }
}

// Adjoint of im2col: accumulates cols back into dx.
template <typename T>
void col2im(const MatrixRM<T>& cols, std::size_t chans, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, const ConvGeometry& g, T* dx) {
  for (std::size_t c = 0; c < chans; ++c)
    for (std::size_t u = 0; u < kh; ++u) {
      const auto [i0, i1] = valid_range(u, g.pad_top, h, g.out_h);
      for (std::size_t v = 0; v < kw; ++v) {
        const auto [j0, j1] = valid_range(v, g.pad_left, w, g.out_w);
        const T* row = cols.data() + ((c * kh + u) * kw + v) * g.out_h * g.out_w;
        for (std::size_t i = i0; i < i1; ++i) {
          T* dr = dx + (c * h + i + u - g.pad_top) * w + v - g.pad_left;
          const T* src = row + i * g.out_w;
          for (std::size_t j = j0; j < j1; ++j) dr[j] += src[j];
        }
      }
    }
}

}  // namespace detail

// Cross-correlation of x[N,C,H,W] with weights[K,C,kh,kw] plus bias[K].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weights, const Var<T>& bias,
              Padding padding) {
  const auto& xs = x.shape();
  const auto& ws = weights.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ws, 4, "conv2d weights");
  require_rank(bias.shape(), 1, "conv2d bias");
  const std::size_t n_batch = xs[0], chans = xs[1], h = xs[2], w = xs[3];
  const std::size_t n_out = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != chans) {
    throw ShapeError("conv2d: weights expect " + std::to_string(ws[1]) +
                     " channels, input has " + std::to_string(chans));
  }
  if (bias.shape()[0] != n_out) throw ShapeError("conv2d: bias length mismatch");
  const ConvGeometry g = conv_geometry(h, w, kh, kw, padding);

  using Mat = detail::MatrixRM<T>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  using Vec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  const auto taps = static_cast<Eigen::Index>(chans * kh * kw);
  const auto area = static_cast<Eigen::Index>(g.out_h * g.out_w);
  const auto filters = static_cast<Eigen::Index>(n_out);
  const std::size_t in_size = chans * h * w;
  const std::size_t out_size = n_out * g.out_h * g.out_w;

  Tensor<T> out({n_batch, n_out, g.out_h, g.out_w});
  const CMap wm(weights.value().data().data(), filters, taps);
  const Vec bv(bias.value().data().data(), filters);
  Mat cols;
  for (std::size_t n = 0; n < n_batch; ++n) {
    detail::im2col(x.value().data().data() + n * in_size, chans, h, w, kh, kw, g, cols);
    Map y(out.data().data() + n * out_size, filters, area);
    y.noalias() = wm * cols;
    y.colwise() += bv;
  }

  return make_op<T>(std::move(out), {x, weights, bias}, [=](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const T* dy = self.grad.data().data();
    T* dx = px.requires_grad ? px.grad_buffer().data().data() : nullptr;
    T* dw = pw.requires_grad ? pw.grad_buffer().data().data() : nullptr;
    T* db = pb.requires_grad ? pb.grad_buffer().data().data() : nullptr;
    const CMap wm(pw.value.data().data(), filters, taps);
    Mat cols, dcols;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const CMap gy(dy + n * out_size, filters, area);
      if (db) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db, filters) += gy.rowwise().sum();
      if (dw) {
        detail::im2col(px.value.data().data() + n * in_size, chans, h, w, kh, kw, g, cols);
        Map(dw, filters, taps).noalias() += gy * cols.transpose();
      }
      if (dx) {
        dcols.noalias() = wm.transpose() * gy;
        detail::col2im(dcols, chans, h, w, kh, kw, g, dx + n * in_size);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

// Non-overlapping pooling with stride equal to the window. An axis whose
// extent is 1 is never pooled: its window is forced to 1.
template <typename T>
Var<T> pool2d(const Var<T>& x, std::size_t ph, std::size_t pw, PoolMode mode) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "pool2d input");
  if (ph == 0 || pw == 0) throw RangeError("pool2d: window must be >= 1");
  const std::size_t n_batch = xs[0], chans = xs[1], h = xs[2], w = xs[3];
  if (h == 1) ph = 1;
  if (w == 1) pw = 1;
  const std::size_t oh = h / ph, ow = w / pw;
  if (oh == 0 || ow == 0) {
    throw ShapeError("pool2d: window " + std::to_string(ph) + "x" +
                     std::to_string(pw) + " exceeds input " + shape_str(xs));
  }

  Tensor<T> out({n_batch, chans, oh, ow});
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::max) argmax.resize(out.size());
  const auto& xv = x.value();
  const T inv = T(1) / static_cast<T>(ph * pw);
  std::size_t o = 0;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < chans; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j, ++o) {
          if (mode == PoolMode::max) {
            std::size_t best = xv.offset(n, c, i * ph, j * pw);
            for (std::size_t u = 0; u < ph; ++u)
              for (std::size_t v = 0; v < pw; ++v) {
                const std::size_t idx = xv.offset(n, c, i * ph + u, j * pw + v);
                if (xv[idx] > xv[best]) best = idx;
              }
            out[o] = xv[best];
            argmax[o] = best;
          } else {
            T acc = 0;
            for (std::size_t u = 0; u < ph; ++u)
              for (std::size_t v = 0; v < pw; ++v)
                acc += xv.at(n, c, i * ph + u, j * pw + v);
            out[o] = acc * inv;
          }
        }

  return make_op<T>(std::move(out), {x},
                    [=, argmax = std::move(argmax)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buffer();
    const auto& dy = self.grad;
    if (mode == PoolMode::max) {
      for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
      return;
    }
    std::size_t o = 0;
    for (std::size_t n = 0; n < n_batch; ++n)
      for (std::size_t c = 0; c < chans; ++c)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j, ++o) {
            const T g = dy[o] * inv;
            for (std::size_t u = 0; u < ph; ++u)
              for (std::size_t v = 0; v < pw; ++v)
                dx.at(n, c, i * ph + u, j * pw + v) += g;
          }
  });
}

// [N,C,H,W] -> [N,C], mean over all spatial positions.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "global_avg_pool input");
  const std::size_t n_batch = xs[0], chans = xs[1], area = xs[2] * xs[3];
  if (area == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out({n_batch, chans});
  const auto& xv = x.value();
  for (std::size_t p = 0; p < n_batch * chans; ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < area; ++i) acc += xv[p * area + i];
    out[p] = acc / static_cast<T>(area);
  }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < n_batch * chans; ++p) {
      const T g = self.grad[p] / static_cast<T>(area);
      for (std::size_t i = 0; i < area; ++i) dx[p * area + i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean({channels}, T(0)), running_var({channels}, T(1)) {}
};

// Per-channel normalization over (N, H, W). Train mode normalizes with batch
// statistics and folds them into the moving averages; eval mode uses the
// moving averages.
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 BatchNormState<T>& state, Mode mode) {
  const auto& xs = x.shape();
  require_rank(xs, 4, "batchnorm input");
  const std::size_t n_batch = xs[0], chans = xs[1], area = xs[2] * xs[3];
  if (gamma.value().size() != chans || beta.value().size() != chans ||
      state.running_mean.size() != chans) {
    throw ShapeError("batchnorm: parameter length does not match channels");
  }
  const std::size_t count = n_batch * area;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm: train mode needs at least 2 values per channel");
  }

  const auto& xv = x.value();
  std::vector<T> mean(chans), inv_std(chans);
  for (std::size_t c = 0; c < chans; ++c) {
    if (mode == Mode::eval) {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps));
      continue;
    }
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* p = &xv.at(n, c, 0, 0);
      for (std::size_t i = 0; i < area; ++i) s += p[i];
    }
    const double m = s / static_cast<double>(count);
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* p = &xv.at(n, c, 0, 0);
      for (std::size_t i = 0; i < area; ++i) ss += (p[i] - m) * (p[i] - m);
    }
    const double var = ss / static_cast<double>(count);
    mean[c] = static_cast<T>(m);
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
    // Moving variance uses the unbiased estimate.
    const double unbiased = ss / static_cast<double>(count - 1);
    state.running_mean[c] = static_cast<T>(
        state.momentum * state.running_mean[c] + (1.0 - state.momentum) * m);
    state.running_var[c] = static_cast<T>(
        state.momentum * state.running_var[c] + (1.0 - state.momentum) * unbiased);
  }

  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < chans; ++c) {
      const std::size_t base = xv.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < area; ++i) {
        const T xh = (xv[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = xh;
        out[base + i] = gv[c] * xh + bv[c];
      }
    }

  return make_op<T>(std::move(out), {x, gamma, beta},
                    [=, xhat = std::move(xhat)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& dy = self.grad;
    const auto& gv = pg.value;
    for (std::size_t c = 0; c < chans; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const std::size_t base = xhat.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < area; ++i) {
          sum_dy += dy[base + i];
          sum_dy_xhat += static_cast<double>(dy[base + i]) * xhat[base + i];
        }
      }
      if (pg.requires_grad) pg.grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
      if (pb.requires_grad) pb.grad_buffer()[c] += static_cast<T>(sum_dy);
      if (!px.requires_grad) continue;
      auto& dx = px.grad_buffer();
      const T scale = gv[c] * inv_std[c];
      const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(count));
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
      for (std::size_t n = 0; n < n_batch; ++n) {
        const std::size_t base = xhat.offset(n, c, 0, 0);
        for (std::size_t i = 0; i < area; ++i) {
          if (mode == Mode::eval) {
            dx[base + i] += scale * dy[base + i];
          } else {
            dx[base + i] +=
                scale * (dy[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

// Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw RangeError("dropout: probability must lie in [0, 1), got " +
                     std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return x;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform(rng) < p ? T(0) : keep_scale;
  }
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  // NaN passes through so divergence reaches the loss.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] < T(0) ? T(0) : xv[i];
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (px.value[i] > T(0)) dx[i] += self.grad[i];
  });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * xv[i];
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] += T(2) * px.value[i] * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return make_op<T>(Tensor<T>({1}, {acc}), {x}, [](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0];
  });
}

// sum(x * weights) with constant weights of x's shape.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (weights.shape() != x.shape()) throw ShapeError("weighted_sum: shape mismatch");
  T acc = 0;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * weights[i];
  return make_op<T>(Tensor<T>({1}, {acc}), {x}, [weights](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += weights[i] * self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

// Row-wise softmax over the class axis of [N, C], accumulated in double.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const auto& xs = x.shape();
  require_rank(xs, 2, "softmax input");
  const std::size_t rows = xs[0], cols = xs[1];
  Tensor<T> out(xs);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &xv[r * cols];
    T* o = &out[r * cols];
    const double peak = *std::max_element(in, in + cols);
    std::vector<double> e(cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      e[c] = std::exp(static_cast<double>(in[c]) - peak);
      total += e[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] = static_cast<T>(e[c] / total);
  }
  return make_op<T>(out, {x}, [=](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = &out[r * cols];
      const T* g = &self.grad[r * cols];
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

inline constexpr double kProbabilityFloor = 1e-12;

// Mean over the batch of -log(p[label]); p is clamped to kProbabilityFloor.
template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const std::size_t> labels) {
  const auto& ps = probs.shape();
  require_rank(ps, 2, "cross_entropy input");
  const std::size_t rows = ps[0], cols = ps[1];
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count mismatch");
  const auto& pv = probs.value();
  const double tolerance = 1e-5 + cols * std::numeric_limits<T>::epsilon();
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) {
      throw RangeError("cross_entropy: class index " + std::to_string(labels[r]) +
                       " out of range for " + std::to_string(cols) + " classes");
    }
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += pv[r * cols + c];
    if (std::abs(total - 1.0) > tolerance) {
      throw RangeError("cross_entropy: row " + std::to_string(r) +
                       " is not a distribution (sum " + std::to_string(total) + ")");
    }
    const double p = std::max<double>(pv[r * cols + labels[r]], kProbabilityFloor);
    loss -= std::log(p);
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  return make_op<T>(Tensor<T>({1}, {static_cast<T>(loss)}), {probs},
                    [=, targets = std::move(targets)](Node<T>& self) {
    auto& pp = *self.parents[0];
    auto& dp = pp.grad_buffer();
    const T scale = self.grad[0] / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t idx = r * cols + targets[r];
      if (pp.value[idx] >= static_cast<T>(kProbabilityFloor)) {
        dp[idx] -= scale / pp.value[idx];
      }
    }
  });
}

}  // namespace tk
