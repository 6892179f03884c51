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
//
// Reference forward/backward kernels for every layer type. All kernels are
// pure functions of their arguments (dropout takes an explicit seed) and
// deterministic: parallel paths partition the output so each element is
// written once with a fixed accumulation order.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "incepkit/tensor.hpp"

namespace incepkit {

enum class Padding { Same, Valid };
enum class Activation { None, ReLU };
enum class PoolMode { Max, Avg };
enum class Mode { Train, Infer };

struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  Padding padding = Padding::Same;
  int out_channels = 0;
  Activation activation = Activation::None;
};

struct PoolSpec {
  PoolMode mode = PoolMode::Max;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  Padding padding = Padding::Valid;
};

// Output extent of one spatial dimension.
//   Same:  ceil(in / stride)
//   Valid: floor((in - kernel) / stride) + 1, requires in >= kernel
std::int64_t out_extent(std::int64_t in, int kernel, int stride, Padding padding);

// Leading padding for Same convolutions: total pad
// P = max((out-1)*stride + kernel - in, 0), split floor(P/2) before and the
// remainder after. Always 0 for Valid.
std::int64_t pad_before(std::int64_t in, int kernel, int stride, Padding padding);

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)
// ---------------------------------------------------------------------------

// Fast path: im2col + matrix multiply. weights are [Kh, Kw, Cin, Cout],
// bias has Cout entries.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weights,
                          std::span<const T> bias, const ConvSpec& spec);

// Reference path: direct loops. Kept independent of the fast path so the
// two can be checked against each other.
template <typename T>
TensorT<T> conv2d_forward_direct(const TensorT<T>& input, const TensorT<T>& weights,
                                 std::span<const T> bias, const ConvSpec& spec);

template <typename T>
struct ConvGrads {
  TensorT<T> input;
  TensorT<T> weights;
  std::vector<T> bias;
};

// grad_output is the gradient at the conv output. When the spec fuses a
// ReLU, saved_output (the post-activation forward result) must be passed.
template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& grad_output, const TensorT<T>& input,
                             const TensorT<T>& weights, const ConvSpec& spec,
                             const TensorT<T>* saved_output = nullptr);

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <typename T>
struct PoolResult {
  TensorT<T> output;
  // Max pooling: flat input index chosen per output element (first maximum
  // in row-major window order). Empty for Avg.
  std::vector<std::int64_t> argmax;
};

// Avg pooling with Same padding divides by the number of window cells that
// actually overlap the input.
template <typename T>
PoolResult<T> pool2d_forward(const TensorT<T>& input, const PoolSpec& spec);

template <typename T>
TensorT<T> pool2d_backward(const TensorT<T>& grad_output, const Shape& input_shape,
                           const PoolSpec& spec, const std::vector<std::int64_t>& argmax);

// ---------------------------------------------------------------------------
// Batch normalization (per-channel over all non-channel dims)
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormResult {
  TensorT<T> output;
  TensorT<T> xhat;               // normalized input, saved for backward
  std::vector<T> inv_std;        // 1/sqrt(var + eps) actually used
  std::vector<T> new_running_mean;  // Train mode only
  std::vector<T> new_running_var;
};

// Train: normalize by batch statistics (biased variance) and report running
// stats updated as running <- momentum*running + (1-momentum)*batch.
// Infer: normalize by the provided running stats.
template <typename T>
BatchNormResult<T> batchnorm_forward(const TensorT<T>& input, std::span<const T> gamma,
                                     std::span<const T> beta, std::span<const T> running_mean,
                                     std::span<const T> running_var, T epsilon, T momentum,
                                     Mode mode);

template <typename T>
struct BatchNormGrads {
  TensorT<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const TensorT<T>& grad_output, const TensorT<T>& xhat,
                                     std::span<const T> inv_std, std::span<const T> gamma,
                                     Mode mode);

// ---------------------------------------------------------------------------
// Merges
// ---------------------------------------------------------------------------

// shortcut + alpha * residual, elementwise; shapes must match exactly.
template <typename T>
TensorT<T> add_scaled(const TensorT<T>& shortcut, const TensorT<T>& residual, T alpha);

// Channel concatenation of NHWC tensors sharing N, H, W.
template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& inputs);

// Extracts the channel range [begin, begin+extent) of an NHWC tensor;
// used to route concat gradients back to their branches.
template <typename T>
TensorT<T> slice_channels(const TensorT<T>& input, std::int64_t begin, std::int64_t extent);

// ---------------------------------------------------------------------------
// Head ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& input);

// ReLU gradient from the saved output (y > 0 iff pre-activation > 0).
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_output, const TensorT<T>& output);

// NHWC -> [N, C] mean over H and W.
template <typename T>
TensorT<T> global_avgpool(const TensorT<T>& input);

template <typename T>
TensorT<T> global_avgpool_backward(const TensorT<T>& grad_output, const Shape& input_shape);

template <typename T>
struct DropoutResult {
  TensorT<T> output;
  std::vector<std::uint8_t> mask;  // 1 = kept; empty in Infer mode
};

// Inverted dropout: Train zeroes units with probability 1-keep and scales
// survivors by 1/keep; Infer is the identity.
template <typename T>
DropoutResult<T> dropout_forward(const TensorT<T>& input, T keep_prob, Mode mode,
                                 std::uint64_t seed);

template <typename T>
TensorT<T> dropout_backward(const TensorT<T>& grad_output, const std::vector<std::uint8_t>& mask,
                            T keep_prob);

// input [N, In] x weights [In, Out] + bias.
template <typename T>
TensorT<T> fully_connected(const TensorT<T>& input, const TensorT<T>& weights,
                           std::span<const T> bias);

template <typename T>
struct FullyConnectedGrads {
  TensorT<T> input;
  TensorT<T> weights;
  std::vector<T> bias;
};

template <typename T>
FullyConnectedGrads<T> fully_connected_backward(const TensorT<T>& grad_output,
                                                const TensorT<T>& input,
                                                const TensorT<T>& weights);

// Row-wise softmax of an [N, K] tensor.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits);

template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& grad_output, const TensorT<T>& output);

template <typename T>
struct SoftmaxXentResult {
  T loss;                 // mean over the batch
  TensorT<T> grad_logits; // exact analytic gradient of the mean loss
};

template <typename T>
SoftmaxXentResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                           std::span<const std::int32_t> labels);

}  // namespace incepkit
