// Copyright 2026 The Incepkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "incepkit/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "incepkit/parallel.hpp"

namespace incepkit {

namespace {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

// Matrix products below a million scalar ops are not worth a thread.
constexpr std::int64_t kGemmGrainOps = 1 << 20;

// C(M x N) = A(M x K) * B(K x N), row-sliced across threads. Each output
// element is produced by exactly one Eigen call, so the result does not
// depend on the slicing.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  std::int64_t grain = std::max<std::int64_t>(1, kGemmGrainOps / std::max<std::int64_t>(1, k * n));
  parallel_for(m, grain, [&](std::int64_t r0, std::int64_t r1) {
    ConstMatMap<T> A(a + r0 * k, r1 - r0, k);
    ConstMatMap<T> B(b, k, n);
    MatMap<T> C(c + r0 * n, r1 - r0, n);
    C.noalias() = A * B;
  });
}

// C(M x N) = A^T(M x K_rows) ... transposed-left product used for weight
// gradients: C = A^T * B with A stored (K x M) row-major.
template <typename T>
void gemm_at_b(const T* a, const T* b, T* c, std::int64_t rows_a, std::int64_t m,
               std::int64_t n) {
  // a is (rows_a x m), b is (rows_a x n), c is (m x n) = a^T * b.
  std::int64_t grain = std::max<std::int64_t>(1, kGemmGrainOps / std::max<std::int64_t>(1, rows_a * n));
  parallel_for(m, grain, [&](std::int64_t c0, std::int64_t c1) {
    ConstMatMap<T> A(a, rows_a, m);
    ConstMatMap<T> B(b, rows_a, n);
    MatMap<T> C(c + c0 * n, c1 - c0, n);
    C.noalias() = A.middleCols(c0, c1 - c0).transpose() * B;
  });
}

// C(M x N) = A(M x K) * B^T with B stored (N x K) row-major.
template <typename T>
void gemm_a_bt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  std::int64_t grain = std::max<std::int64_t>(1, kGemmGrainOps / std::max<std::int64_t>(1, k * n));
  parallel_for(m, grain, [&](std::int64_t r0, std::int64_t r1) {
    ConstMatMap<T> A(a + r0 * k, r1 - r0, k);
    ConstMatMap<T> B(b, n, k);
    MatMap<T> C(c + r0 * n, r1 - r0, n);
    C.noalias() = A * B.transpose();
  });
}

struct ConvDims {
  std::int64_t batch, in_h, in_w, in_c;
  std::int64_t out_h, out_w, out_c;
  std::int64_t pad_h, pad_w;
};

template <typename T>
ConvDims conv_dims(const TensorT<T>& input, const TensorT<T>& weights, std::span<const T> bias,
                   const ConvSpec& spec) {
  if (input.shape.rank() != 4) throw BadInput("conv2d: input must be NHWC, got " + input.shape.str());
  if (weights.shape.rank() != 4)
    throw BadInput("conv2d: weights must be [Kh,Kw,Cin,Cout], got " + weights.shape.str());
  if (spec.stride_h < 1 || spec.stride_w < 1 || spec.kernel_h < 1 || spec.kernel_w < 1)
    throw BadInput("conv2d: kernel and stride must be positive");
  if (weights.shape[0] != spec.kernel_h || weights.shape[1] != spec.kernel_w ||
      weights.shape[3] != spec.out_channels)
    throw BadInput("conv2d: weights " + weights.shape.str() + " do not match spec");
  if (weights.shape[2] != input.shape.c())
    throw BadInput("conv2d: input has " + std::to_string(input.shape.c()) +
                   " channels but weights expect " + std::to_string(weights.shape[2]));
  if (static_cast<std::int64_t>(bias.size()) != spec.out_channels)
    throw BadInput("conv2d: bias size mismatch");
  ConvDims d{};
  d.batch = input.shape.n();
  d.in_h = input.shape.h();
  d.in_w = input.shape.w();
  d.in_c = input.shape.c();
  d.out_h = out_extent(d.in_h, spec.kernel_h, spec.stride_h, spec.padding);
  d.out_w = out_extent(d.in_w, spec.kernel_w, spec.stride_w, spec.padding);
  d.out_c = spec.out_channels;
  d.pad_h = pad_before(d.in_h, spec.kernel_h, spec.stride_h, spec.padding);
  d.pad_w = pad_before(d.in_w, spec.kernel_w, spec.stride_w, spec.padding);
  return d;
}

// Unrolls conv patches into a (N*Ho*Wo) x (Kh*Kw*Cin) matrix whose column
// order matches the row-major weight layout [Kh, Kw, Cin, Cout].
template <typename T>
std::vector<T> im2col(const TensorT<T>& input, const ConvSpec& spec, const ConvDims& d) {
  const std::int64_t k = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w * d.in_c;
  const std::int64_t m = d.batch * d.out_h * d.out_w;
  std::vector<T> col(static_cast<std::size_t>(m * k), T(0));
  const std::int64_t row_elems = d.out_w;  // rows per (n, oh) stripe
  parallel_for(d.batch * d.out_h, std::max<std::int64_t>(1, 4096 / std::max<std::int64_t>(1, row_elems * k)),
               [&](std::int64_t s0, std::int64_t s1) {
    for (std::int64_t s = s0; s < s1; ++s) {
      const std::int64_t n = s / d.out_h;
      const std::int64_t oh = s % d.out_h;
      const std::int64_t ih0 = oh * spec.stride_h - d.pad_h;
      for (std::int64_t ow = 0; ow < d.out_w; ++ow) {
        const std::int64_t iw0 = ow * spec.stride_w - d.pad_w;
        T* dst = col.data() + ((s * d.out_w) + ow) * k;
        for (int kh = 0; kh < spec.kernel_h; ++kh) {
          const std::int64_t ih = ih0 + kh;
          if (ih < 0 || ih >= d.in_h) {
            dst += static_cast<std::int64_t>(spec.kernel_w) * d.in_c;
            continue;
          }
          for (int kw = 0; kw < spec.kernel_w; ++kw) {
            const std::int64_t iw = iw0 + kw;
            if (iw >= 0 && iw < d.in_w) {
              const T* src = input.data.data() + input.idx4(n, ih, iw, 0);
              std::copy(src, src + d.in_c, dst);
            }
            dst += d.in_c;
          }
        }
      }
    }
  });
  return col;
}

template <typename T>
void add_bias_and_activate(TensorT<T>& out, std::span<const T> bias, Activation act,
                           std::int64_t out_c) {
  const std::int64_t rows = out.count() / out_c;
  T* p = out.data.data();
  for (std::int64_t r = 0; r < rows; ++r, p += out_c) {
    for (std::int64_t c = 0; c < out_c; ++c) p[c] += bias[static_cast<std::size_t>(c)];
    if (act == Activation::ReLU)
      for (std::int64_t c = 0; c < out_c; ++c) p[c] = p[c] > T(0) ? p[c] : T(0);
  }
}

template <typename T>
std::int64_t channel_count(const TensorT<T>& t) {
  return t.shape[t.shape.rank() - 1];
}

}  // namespace

std::int64_t out_extent(std::int64_t in, int kernel, int stride, Padding padding) {
  if (in < 1 || kernel < 1 || stride < 1) throw BadInput("grid: non-positive extent");
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  if (in < kernel)
    throw BadInput("grid: Valid padding needs input >= kernel, got " + std::to_string(in) +
                   " < " + std::to_string(kernel));
  return (in - kernel) / stride + 1;
}

std::int64_t pad_before(std::int64_t in, int kernel, int stride, Padding padding) {
  if (padding == Padding::Valid) return 0;
  std::int64_t out = out_extent(in, kernel, stride, padding);
  std::int64_t total = std::max<std::int64_t>((out - 1) * stride + kernel - in, 0);
  return total / 2;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weights,
                          std::span<const T> bias, const ConvSpec& spec) {
  ConvDims d = conv_dims(input, weights, bias, spec);
  const std::int64_t m = d.batch * d.out_h * d.out_w;
  const std::int64_t k = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w * d.in_c;
  TensorT<T> out(Shape::nhwc(d.batch, d.out_h, d.out_w, d.out_c));
  if (spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride_h == 1 && spec.stride_w == 1) {
    // 1x1 stride-1 conv multiplies the channel matrix directly.
    gemm(input.data.data(), weights.data.data(), out.data.data(), m, k, d.out_c);
  } else {
    std::vector<T> col = im2col(input, spec, d);
    gemm(col.data(), weights.data.data(), out.data.data(), m, k, d.out_c);
  }
  add_bias_and_activate(out, bias, spec.activation, d.out_c);
  return out;
}

template <typename T>
TensorT<T> conv2d_forward_direct(const TensorT<T>& input, const TensorT<T>& weights,
                                 std::span<const T> bias, const ConvSpec& spec) {
  ConvDims d = conv_dims(input, weights, bias, spec);
  TensorT<T> out(Shape::nhwc(d.batch, d.out_h, d.out_w, d.out_c));
  for (std::int64_t n = 0; n < d.batch; ++n)
    for (std::int64_t oh = 0; oh < d.out_h; ++oh)
      for (std::int64_t ow = 0; ow < d.out_w; ++ow)
        for (std::int64_t oc = 0; oc < d.out_c; ++oc) {
          T acc = bias[static_cast<std::size_t>(oc)];
          for (int kh = 0; kh < spec.kernel_h; ++kh) {
            const std::int64_t ih = oh * spec.stride_h - d.pad_h + kh;
            if (ih < 0 || ih >= d.in_h) continue;
            for (int kw = 0; kw < spec.kernel_w; ++kw) {
              const std::int64_t iw = ow * spec.stride_w - d.pad_w + kw;
              if (iw < 0 || iw >= d.in_w) continue;
              for (std::int64_t ic = 0; ic < d.in_c; ++ic)
                acc += input.at4(n, ih, iw, ic) *
                       weights.data[static_cast<std::size_t>(
                           ((kh * spec.kernel_w + kw) * d.in_c + ic) * d.out_c + oc)];
            }
          }
          if (spec.activation == Activation::ReLU && acc < T(0)) acc = T(0);
          out.at4(n, oh, ow, oc) = acc;
        }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& grad_output, const TensorT<T>& input,
                             const TensorT<T>& weights, const ConvSpec& spec,
                             const TensorT<T>* saved_output) {
  const std::vector<T> dummy_bias(static_cast<std::size_t>(spec.out_channels));
  ConvDims d = conv_dims(input, weights, std::span<const T>(dummy_bias), spec);
  Shape out_shape = Shape::nhwc(d.batch, d.out_h, d.out_w, d.out_c);
  if (grad_output.shape != out_shape)
    throw BadInput("conv2d_backward: grad shape " + grad_output.shape.str() +
                   " does not match forward output " + out_shape.str());

  const TensorT<T>* gy = &grad_output;
  TensorT<T> masked;
  if (spec.activation == Activation::ReLU) {
    if (saved_output == nullptr || saved_output->shape != out_shape)
      throw BadInput("conv2d_backward: fused ReLU needs the saved forward output");
    masked = relu_backward(grad_output, *saved_output);
    gy = &masked;
  }

  const std::int64_t m = d.batch * d.out_h * d.out_w;
  const std::int64_t k = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w * d.in_c;

  ConvGrads<T> grads{TensorT<T>(input.shape), TensorT<T>(weights.shape),
                     std::vector<T>(static_cast<std::size_t>(d.out_c), T(0))};

  // Bias: per-channel sum of the output gradient.
  {
    const T* p = gy->data.data();
    for (std::int64_t r = 0; r < m; ++r, p += d.out_c)
      for (std::int64_t c = 0; c < d.out_c; ++c) grads.bias[static_cast<std::size_t>(c)] += p[c];
  }

  const bool is_1x1 = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride_h == 1 &&
                      spec.stride_w == 1;
  if (is_1x1) {
    gemm_at_b(input.data.data(), gy->data.data(), grads.weights.data.data(), m, k, d.out_c);
    gemm_a_bt(gy->data.data(), weights.data.data(), grads.input.data.data(), m, d.out_c, k);
    return grads;
  }

  std::vector<T> col = im2col(input, spec, d);
  gemm_at_b(col.data(), gy->data.data(), grads.weights.data.data(), m, k, d.out_c);

  std::vector<T> dcol(static_cast<std::size_t>(m * k));
  gemm_a_bt(gy->data.data(), weights.data.data(), dcol.data(), m, d.out_c, k);

  // col2im: scatter-add patch gradients back to input positions. Serial,
  // in a fixed row order, so accumulation is deterministic.
  for (std::int64_t n = 0; n < d.batch; ++n)
    for (std::int64_t oh = 0; oh < d.out_h; ++oh)
      for (std::int64_t ow = 0; ow < d.out_w; ++ow) {
        const T* src = dcol.data() + (((n * d.out_h) + oh) * d.out_w + ow) * k;
        for (int kh = 0; kh < spec.kernel_h; ++kh) {
          const std::int64_t ih = oh * spec.stride_h - d.pad_h + kh;
          if (ih < 0 || ih >= d.in_h) {
            src += static_cast<std::int64_t>(spec.kernel_w) * d.in_c;
            continue;
          }
          for (int kw = 0; kw < spec.kernel_w; ++kw) {
            const std::int64_t iw = ow * spec.stride_w - d.pad_w + kw;
            if (iw >= 0 && iw < d.in_w) {
              T* dst = grads.input.data.data() + grads.input.idx4(n, ih, iw, 0);
              for (std::int64_t ic = 0; ic < d.in_c; ++ic) dst[ic] += src[ic];
            }
            src += d.in_c;
          }
        }
      }
  return grads;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <typename T>
PoolResult<T> pool2d_forward(const TensorT<T>& input, const PoolSpec& spec) {
  if (input.shape.rank() != 4) throw BadInput("pool2d: input must be NHWC");
  const std::int64_t n_ = input.shape.n(), h = input.shape.h(), w = input.shape.w(),
                     c = input.shape.c();
  const std::int64_t oh = out_extent(h, spec.kernel_h, spec.stride_h, spec.padding);
  const std::int64_t ow = out_extent(w, spec.kernel_w, spec.stride_w, spec.padding);
  const std::int64_t ph = pad_before(h, spec.kernel_h, spec.stride_h, spec.padding);
  const std::int64_t pw = pad_before(w, spec.kernel_w, spec.stride_w, spec.padding);

  PoolResult<T> result{TensorT<T>(Shape::nhwc(n_, oh, ow, c)), {}};
  const bool is_max = spec.mode == PoolMode::Max;
  if (is_max) result.argmax.assign(static_cast<std::size_t>(result.output.count()), -1);

  for (std::int64_t n = 0; n < n_; ++n)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_idx = -1;
          T sum = T(0);
          std::int64_t valid = 0;
          for (int kh = 0; kh < spec.kernel_h; ++kh) {
            const std::int64_t ih = y * spec.stride_h - ph + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < spec.kernel_w; ++kw) {
              const std::int64_t iw = x * spec.stride_w - pw + kw;
              if (iw < 0 || iw >= w) continue;
              const std::int64_t idx = input.idx4(n, ih, iw, ch);
              const T v = input.data[static_cast<std::size_t>(idx)];
              if (is_max) {
                if (v > best) {
                  best = v;
                  best_idx = idx;
                }
              } else {
                sum += v;
              }
              ++valid;
            }
          }
          const std::int64_t out_idx = result.output.idx4(n, y, x, ch);
          if (is_max) {
            result.output.data[static_cast<std::size_t>(out_idx)] = valid > 0 ? best : T(0);
            result.argmax[static_cast<std::size_t>(out_idx)] = best_idx;
          } else {
            result.output.data[static_cast<std::size_t>(out_idx)] =
                valid > 0 ? sum / static_cast<T>(valid) : T(0);
          }
        }
  return result;
}

template <typename T>
TensorT<T> pool2d_backward(const TensorT<T>& grad_output, const Shape& input_shape,
                           const PoolSpec& spec, const std::vector<std::int64_t>& argmax) {
  TensorT<T> grad_input(input_shape);
  if (spec.mode == PoolMode::Max) {
    if (argmax.size() != grad_output.data.size())
      throw BadInput("pool2d_backward: argmax does not match forward context");
    for (std::size_t i = 0; i < argmax.size(); ++i)
      if (argmax[i] >= 0) grad_input.data[static_cast<std::size_t>(argmax[i])] += grad_output.data[i];
    return grad_input;
  }
  const std::int64_t h = input_shape.h(), w = input_shape.w(), c = input_shape.c();
  const std::int64_t oh = grad_output.shape.h(), ow = grad_output.shape.w();
  const std::int64_t ph = pad_before(h, spec.kernel_h, spec.stride_h, spec.padding);
  const std::int64_t pw = pad_before(w, spec.kernel_w, spec.stride_w, spec.padding);
  for (std::int64_t n = 0; n < input_shape.n(); ++n)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x) {
        // Count valid cells once per window, shared by all channels.
        std::int64_t valid = 0;
        for (int kh = 0; kh < spec.kernel_h; ++kh) {
          const std::int64_t ih = y * spec.stride_h - ph + kh;
          if (ih < 0 || ih >= h) continue;
          for (int kw = 0; kw < spec.kernel_w; ++kw) {
            const std::int64_t iw = x * spec.stride_w - pw + kw;
            if (iw >= 0 && iw < w) ++valid;
          }
        }
        if (valid == 0) continue;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T g = grad_output.at4(n, y, x, ch) / static_cast<T>(valid);
          for (int kh = 0; kh < spec.kernel_h; ++kh) {
            const std::int64_t ih = y * spec.stride_h - ph + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < spec.kernel_w; ++kw) {
              const std::int64_t iw = x * spec.stride_w - pw + kw;
              if (iw >= 0 && iw < w) grad_input.at4(n, ih, iw, ch) += g;
            }
          }
        }
      }
  return grad_input;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
BatchNormResult<T> batchnorm_forward(const TensorT<T>& input, std::span<const T> gamma,
                                     std::span<const T> beta, std::span<const T> running_mean,
                                     std::span<const T> running_var, T epsilon, T momentum,
                                     Mode mode) {
  const std::int64_t c = channel_count(input);
  if (static_cast<std::int64_t>(gamma.size()) != c || static_cast<std::int64_t>(beta.size()) != c ||
      static_cast<std::int64_t>(running_mean.size()) != c ||
      static_cast<std::int64_t>(running_var.size()) != c)
    throw BadInput("batchnorm: parameter vectors must have " + std::to_string(c) + " channels");
  const std::int64_t rows = input.count() / c;

  BatchNormResult<T> r;
  r.xhat = TensorT<T>(input.shape);
  r.output = TensorT<T>(input.shape);
  r.inv_std.assign(static_cast<std::size_t>(c), T(0));

  std::vector<T> mean(static_cast<std::size_t>(c), T(0));
  std::vector<T> var(static_cast<std::size_t>(c), T(0));
  if (mode == Mode::Train) {
    const T* p = input.data.data();
    for (std::int64_t rI = 0; rI < rows; ++rI, p += c)
      for (std::int64_t ch = 0; ch < c; ++ch) mean[static_cast<std::size_t>(ch)] += p[ch];
    for (auto& v : mean) v /= static_cast<T>(rows);
    p = input.data.data();
    for (std::int64_t rI = 0; rI < rows; ++rI, p += c)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T d = p[ch] - mean[static_cast<std::size_t>(ch)];
        var[static_cast<std::size_t>(ch)] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(rows);  // biased, matches normalization
    r.new_running_mean.assign(running_mean.begin(), running_mean.end());
    r.new_running_var.assign(running_var.begin(), running_var.end());
    for (std::int64_t ch = 0; ch < c; ++ch) {
      auto i = static_cast<std::size_t>(ch);
      r.new_running_mean[i] = momentum * r.new_running_mean[i] + (T(1) - momentum) * mean[i];
      r.new_running_var[i] = momentum * r.new_running_var[i] + (T(1) - momentum) * var[i];
    }
  } else {
    mean.assign(running_mean.begin(), running_mean.end());
    var.assign(running_var.begin(), running_var.end());
  }
  for (std::int64_t ch = 0; ch < c; ++ch)
    r.inv_std[static_cast<std::size_t>(ch)] =
        T(1) / std::sqrt(var[static_cast<std::size_t>(ch)] + epsilon);

  const T* p = input.data.data();
  T* xh = r.xhat.data.data();
  T* out = r.output.data.data();
  for (std::int64_t rI = 0; rI < rows; ++rI, p += c, xh += c, out += c)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      auto i = static_cast<std::size_t>(ch);
      xh[ch] = (p[ch] - mean[i]) * r.inv_std[i];
      out[ch] = gamma[i] * xh[ch] + beta[i];
    }
  return r;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const TensorT<T>& grad_output, const TensorT<T>& xhat,
                                     std::span<const T> inv_std, std::span<const T> gamma,
                                     Mode mode) {
  if (grad_output.shape != xhat.shape)
    throw BadInput("batchnorm_backward: gradient shape mismatch");
  const std::int64_t c = channel_count(xhat);
  const std::int64_t rows = xhat.count() / c;

  BatchNormGrads<T> g{TensorT<T>(xhat.shape), std::vector<T>(static_cast<std::size_t>(c), T(0)),
                      std::vector<T>(static_cast<std::size_t>(c), T(0))};

  const T* dy = grad_output.data.data();
  const T* xh = xhat.data.data();
  for (std::int64_t rI = 0; rI < rows; ++rI, dy += c, xh += c)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      auto i = static_cast<std::size_t>(ch);
      g.gamma[i] += dy[ch] * xh[ch];
      g.beta[i] += dy[ch];
    }

  dy = grad_output.data.data();
  xh = xhat.data.data();
  T* dx = g.input.data.data();
  if (mode == Mode::Infer) {
    // Running stats are constants, so the map is a per-channel affine one.
    for (std::int64_t rI = 0; rI < rows; ++rI, dy += c, dx += c)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        auto i = static_cast<std::size_t>(ch);
        dx[ch] = dy[ch] * gamma[i] * inv_std[i];
      }
    return g;
  }
  const T inv_rows = T(1) / static_cast<T>(rows);
  for (std::int64_t rI = 0; rI < rows; ++rI, dy += c, xh += c, dx += c)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      auto i = static_cast<std::size_t>(ch);
      dx[ch] = gamma[i] * inv_std[i] *
               (dy[ch] - inv_rows * (g.beta[i] + xh[ch] * g.gamma[i]));
    }
  return g;
}

// ---------------------------------------------------------------------------
// Merges
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add_scaled(const TensorT<T>& shortcut, const TensorT<T>& residual, T alpha) {
  if (shortcut.shape != residual.shape)
    throw BadInput("add_scaled: shapes differ (" + shortcut.shape.str() + " vs " +
                   residual.shape.str() + "); the residual branch must match the shortcut depth");
  TensorT<T> out(shortcut.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = shortcut.data[i] + alpha * residual.data[i];
  return out;
}

template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& inputs) {
  if (inputs.empty()) throw BadInput("concat: needs at least one input");
  const Shape& first = inputs[0]->shape;
  if (first.rank() != 4) throw BadInput("concat: inputs must be NHWC");
  std::int64_t total_c = 0;
  for (const auto* t : inputs) {
    if (t->shape.rank() != 4 || t->shape.n() != first.n() || t->shape.h() != first.h() ||
        t->shape.w() != first.w())
      throw BadInput("concat: grid mismatch (" + first.str() + " vs " + t->shape.str() + ")");
    total_c += t->shape.c();
  }
  TensorT<T> out(Shape::nhwc(first.n(), first.h(), first.w(), total_c));
  const std::int64_t rows = first.n() * first.h() * first.w();
  std::int64_t offset = 0;
  for (const auto* t : inputs) {
    const std::int64_t c = t->shape.c();
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(t->data.data() + r * c, t->data.data() + (r + 1) * c,
                out.data.data() + r * total_c + offset);
    offset += c;
  }
  return out;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& input, std::int64_t begin, std::int64_t extent) {
  if (input.shape.rank() != 4) throw BadInput("slice_channels: input must be NHWC");
  if (begin < 0 || extent < 1 || begin + extent > input.shape.c())
    throw BadInput("slice_channels: range out of bounds");
  TensorT<T> out(Shape::nhwc(input.shape.n(), input.shape.h(), input.shape.w(), extent));
  const std::int64_t rows = input.shape.n() * input.shape.h() * input.shape.w();
  const std::int64_t c = input.shape.c();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy(input.data.data() + r * c + begin, input.data.data() + r * c + begin + extent,
              out.data.data() + r * extent);
  return out;
}

// ---------------------------------------------------------------------------
// Head ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
  TensorT<T> out(input.shape);
  for (std::size_t i = 0; i < input.data.size(); ++i)
    out.data[i] = input.data[i] > T(0) ? input.data[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_output, const TensorT<T>& output) {
  if (grad_output.shape != output.shape) throw BadInput("relu_backward: shape mismatch");
  TensorT<T> out(grad_output.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = output.data[i] > T(0) ? grad_output.data[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> global_avgpool(const TensorT<T>& input) {
  if (input.shape.rank() != 4) throw BadInput("global_avgpool: input must be NHWC");
  const std::int64_t n = input.shape.n(), hw = input.shape.h() * input.shape.w(),
                     c = input.shape.c();
  TensorT<T> out(Shape{n, c});
  for (std::int64_t b = 0; b < n; ++b) {
    const T* p = input.data.data() + b * hw * c;
    T* o = out.data.data() + b * c;
    for (std::int64_t r = 0; r < hw; ++r, p += c)
      for (std::int64_t ch = 0; ch < c; ++ch) o[ch] += p[ch];
    for (std::int64_t ch = 0; ch < c; ++ch) o[ch] /= static_cast<T>(hw);
  }
  return out;
}

template <typename T>
TensorT<T> global_avgpool_backward(const TensorT<T>& grad_output, const Shape& input_shape) {
  const std::int64_t n = input_shape.n(), hw = input_shape.h() * input_shape.w(),
                     c = input_shape.c();
  if (grad_output.shape != Shape{n, c})
    throw BadInput("global_avgpool_backward: gradient shape mismatch");
  TensorT<T> out(input_shape);
  for (std::int64_t b = 0; b < n; ++b) {
    const T* g = grad_output.data.data() + b * c;
    T* p = out.data.data() + b * hw * c;
    for (std::int64_t r = 0; r < hw; ++r, p += c)
      for (std::int64_t ch = 0; ch < c; ++ch) p[ch] = g[ch] / static_cast<T>(hw);
  }
  return out;
}

template <typename T>
DropoutResult<T> dropout_forward(const TensorT<T>& input, T keep_prob, Mode mode,
                                 std::uint64_t seed) {
  if (!(keep_prob > T(0) && keep_prob <= T(1)))
    throw BadInput("dropout: keep_prob must be in (0, 1]");
  if (mode == Mode::Infer || keep_prob == T(1)) {
    return DropoutResult<T>{input, {}};
  }
  DropoutResult<T> r{TensorT<T>(input.shape),
                     std::vector<std::uint8_t>(input.data.size(), 0)};
  Rng rng(seed);
  const T scale = T(1) / keep_prob;
  for (std::size_t i = 0; i < input.data.size(); ++i) {
    if (rng.uniform() < static_cast<double>(keep_prob)) {
      r.mask[i] = 1;
      r.output.data[i] = input.data[i] * scale;
    }
  }
  return r;
}

template <typename T>
TensorT<T> dropout_backward(const TensorT<T>& grad_output, const std::vector<std::uint8_t>& mask,
                            T keep_prob) {
  if (mask.empty()) return grad_output;  // Infer mode or keep_prob == 1
  if (mask.size() != grad_output.data.size())
    throw BadInput("dropout_backward: mask does not match forward context");
  TensorT<T> out(grad_output.shape);
  const T scale = T(1) / keep_prob;
  for (std::size_t i = 0; i < mask.size(); ++i)
    out.data[i] = mask[i] ? grad_output.data[i] * scale : T(0);
  return out;
}

template <typename T>
TensorT<T> fully_connected(const TensorT<T>& input, const TensorT<T>& weights,
                           std::span<const T> bias) {
  if (input.shape.rank() != 2)
    throw BadInput("fully_connected: input must be rank 2, got " + input.shape.str());
  if (weights.shape.rank() != 2 || weights.shape[0] != input.shape[1])
    throw BadInput("fully_connected: weights " + weights.shape.str() + " do not match input " +
                   input.shape.str());
  const std::int64_t n = input.shape[0], in = input.shape[1], out_dim = weights.shape[1];
  if (static_cast<std::int64_t>(bias.size()) != out_dim)
    throw BadInput("fully_connected: bias size mismatch");
  TensorT<T> out(Shape{n, out_dim});
  gemm(input.data.data(), weights.data.data(), out.data.data(), n, in, out_dim);
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < out_dim; ++c)
      out.data[static_cast<std::size_t>(r * out_dim + c)] += bias[static_cast<std::size_t>(c)];
  return out;
}

template <typename T>
FullyConnectedGrads<T> fully_connected_backward(const TensorT<T>& grad_output,
                                                const TensorT<T>& input,
                                                const TensorT<T>& weights) {
  const std::int64_t n = input.shape[0], in = input.shape[1], out_dim = weights.shape[1];
  if (grad_output.shape != Shape{n, out_dim})
    throw BadInput("fully_connected_backward: gradient shape mismatch");
  FullyConnectedGrads<T> g{TensorT<T>(input.shape), TensorT<T>(weights.shape),
                           std::vector<T>(static_cast<std::size_t>(out_dim), T(0))};
  gemm_at_b(input.data.data(), grad_output.data.data(), g.weights.data.data(), n, in, out_dim);
  gemm_a_bt(grad_output.data.data(), weights.data.data(), g.input.data.data(), n, out_dim, in);
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < out_dim; ++c)
      g.bias[static_cast<std::size_t>(c)] +=
          grad_output.data[static_cast<std::size_t>(r * out_dim + c)];
  return g;
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& logits) {
  if (logits.shape.rank() != 2) throw BadInput("softmax: input must be rank 2");
  const std::int64_t n = logits.shape[0], k = logits.shape[1];
  TensorT<T> out(logits.shape);
  for (std::int64_t r = 0; r < n; ++r) {
    const T* x = logits.data.data() + r * k;
    T* y = out.data.data() + r * k;
    T mx = x[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (std::int64_t j = 0; j < k; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::int64_t j = 0; j < k; ++j) y[j] /= sum;
  }
  return out;
}

template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& grad_output, const TensorT<T>& output) {
  if (grad_output.shape != output.shape) throw BadInput("softmax_backward: shape mismatch");
  const std::int64_t n = output.shape[0], k = output.shape[1];
  TensorT<T> out(output.shape);
  for (std::int64_t r = 0; r < n; ++r) {
    const T* dy = grad_output.data.data() + r * k;
    const T* y = output.data.data() + r * k;
    T dot = T(0);
    for (std::int64_t j = 0; j < k; ++j) dot += dy[j] * y[j];
    T* dx = out.data.data() + r * k;
    for (std::int64_t j = 0; j < k; ++j) dx[j] = y[j] * (dy[j] - dot);
  }
  return out;
}

template <typename T>
SoftmaxXentResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                           std::span<const std::int32_t> labels) {
  if (logits.shape.rank() != 2) throw BadInput("softmax_cross_entropy: logits must be rank 2");
  const std::int64_t n = logits.shape[0], k = logits.shape[1];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw BadInput("softmax_cross_entropy: need one label per row");
  SoftmaxXentResult<T> r{T(0), softmax(logits)};
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::int64_t row = 0; row < n; ++row) {
    const std::int32_t label = labels[static_cast<std::size_t>(row)];
    if (label < 0 || label >= k)
      throw BadInput("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(k) + " classes");
    const T* x = logits.data.data() + row * k;
    T mx = x[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    T lse = T(0);
    for (std::int64_t j = 0; j < k; ++j) lse += std::exp(x[j] - mx);
    r.loss += (mx + std::log(lse) - x[label]) * inv_n;
    T* g = r.grad_logits.data.data() + row * k;
    for (std::int64_t j = 0; j < k; ++j) g[j] *= inv_n;
    g[label] -= inv_n;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define INCEPKIT_INSTANTIATE(T)                                                                   \
  template TensorT<T> conv2d_forward<T>(const TensorT<T>&, const TensorT<T>&, std::span<const T>, \
                                        const ConvSpec&);                                         \
  template TensorT<T> conv2d_forward_direct<T>(const TensorT<T>&, const TensorT<T>&,              \
                                               std::span<const T>, const ConvSpec&);              \
  template ConvGrads<T> conv2d_backward<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                           const TensorT<T>&, const ConvSpec&, const TensorT<T>*);\
  template PoolResult<T> pool2d_forward<T>(const TensorT<T>&, const PoolSpec&);                   \
  template TensorT<T> pool2d_backward<T>(const TensorT<T>&, const Shape&, const PoolSpec&,        \
                                         const std::vector<std::int64_t>&);                       \
  template BatchNormResult<T> batchnorm_forward<T>(const TensorT<T>&, std::span<const T>,         \
                                                   std::span<const T>, std::span<const T>,        \
                                                   std::span<const T>, T, T, Mode);               \
  template BatchNormGrads<T> batchnorm_backward<T>(const TensorT<T>&, const TensorT<T>&,          \
                                                   std::span<const T>, std::span<const T>, Mode); \
  template TensorT<T> add_scaled<T>(const TensorT<T>&, const TensorT<T>&, T);                     \
  template TensorT<T> concat_channels<T>(const std::vector<const TensorT<T>*>&);                  \
  template TensorT<T> slice_channels<T>(const TensorT<T>&, std::int64_t, std::int64_t);           \
  template TensorT<T> relu<T>(const TensorT<T>&);                                                 \
  template TensorT<T> relu_backward<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> global_avgpool<T>(const TensorT<T>&);                                       \
  template TensorT<T> global_avgpool_backward<T>(const TensorT<T>&, const Shape&);                \
  template DropoutResult<T> dropout_forward<T>(const TensorT<T>&, T, Mode, std::uint64_t);        \
  template TensorT<T> dropout_backward<T>(const TensorT<T>&, const std::vector<std::uint8_t>&, T);\
  template TensorT<T> fully_connected<T>(const TensorT<T>&, const TensorT<T>&,                    \
                                         std::span<const T>);                                     \
  template FullyConnectedGrads<T> fully_connected_backward<T>(const TensorT<T>&,                  \
                                                              const TensorT<T>&,                  \
                                                              const TensorT<T>&);                 \
  template TensorT<T> softmax<T>(const TensorT<T>&);                                              \
  template TensorT<T> softmax_backward<T>(const TensorT<T>&, const TensorT<T>&);                  \
  template SoftmaxXentResult<T> softmax_cross_entropy<T>(const TensorT<T>&,                       \
                                                         std::span<const std::int32_t>);

INCEPKIT_INSTANTIATE(float)
INCEPKIT_INSTANTIATE(double)

#undef INCEPKIT_INSTANTIATE

}  // namespace incepkit
