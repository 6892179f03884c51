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

#include "incepkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "incepkit/executor.hpp"
#include "incepkit/kernels.hpp"

namespace incepkit {

TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h) {
  TensorD grad(x.shape);
  TensorD probe = x;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double up = f(probe);
    probe.data[i] = orig - h;
    const double down = f(probe);
    probe.data[i] = orig;
    grad.data[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradCompare compare_gradients(const TensorD& analytic, const TensorD& numeric) {
  if (analytic.shape != numeric.shape)
    throw BadInput("compare_gradients: shape mismatch (" + analytic.shape.str() + " vs " +
                   numeric.shape.str() + ")");
  double norm_a = 0.0, norm_b = 0.0, worst = 0.0;
  std::int64_t worst_i = -1;
  for (std::size_t i = 0; i < analytic.data.size(); ++i) {
    norm_a = std::max(norm_a, std::fabs(analytic.data[i]));
    norm_b = std::max(norm_b, std::fabs(numeric.data[i]));
    const double d = std::fabs(analytic.data[i] - numeric.data[i]);
    if (d > worst) {
      worst = d;
      worst_i = static_cast<std::int64_t>(i);
    }
  }
  GradCompare r;
  r.max_rel_err = worst / std::max({norm_a, norm_b, 1e-8});
  r.worst_index = worst_i;
  if (worst_i >= 0) {
    r.analytic = analytic.data[static_cast<std::size_t>(worst_i)];
    r.numeric = numeric.data[static_cast<std::size_t>(worst_i)];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Kernel-level finite-difference suite
// ---------------------------------------------------------------------------

namespace {

double project(const TensorD& y, const TensorD& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * r.data[i];
  return acc;
}

// Uniform values bounded away from zero, for ops with a kink at 0.
TensorD random_off_zero(Shape s, Rng& rng) {
  TensorD t(s);
  for (auto& v : t.data) {
    double mag = rng.uniform(0.2, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

struct CheckRecorder {
  std::vector<OpCheckResult> results;
  bool corrupt = false;
  double h = 1e-5;

  void record(const std::string& op, TensorD analytic, const ScalarFn& f, const TensorD& x) {
    if (corrupt && !analytic.data.empty()) analytic.data[0] += 1e-2;
    TensorD numeric = finite_difference_gradient(f, x, h);
    GradCompare cmp = compare_gradients(analytic, numeric);
    for (auto& r : results) {
      if (r.op == op) {
        if (cmp.max_rel_err > r.worst_rel_err) {
          r.worst_rel_err = cmp.max_rel_err;
          r.worst_coord = cmp.worst_index;
        }
        return;
      }
    }
    results.push_back(OpCheckResult{op, cmp.max_rel_err, cmp.worst_index});
  }
};

}  // namespace

std::vector<OpCheckResult> run_op_gradchecks(std::uint64_t seed, int instances, double h,
                                             bool corrupt_analytic) {
  CheckRecorder rec;
  rec.corrupt = corrupt_analytic;
  rec.h = h;

  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(inst)));

    // Convolution: varying kernel/stride/padding, gradients of all three
    // arguments, plus one fused-ReLU case.
    {
      const std::int64_t n = 1 + rng.index(2), hgt = 5 + rng.index(4), wid = 5 + rng.index(4);
      const std::int64_t cin = 2 + rng.index(2);
      ConvSpec spec;
      spec.kernel_h = rng.uniform() < 0.5 ? 1 : 3;
      spec.kernel_w = rng.uniform() < 0.5 ? 1 : 3;
      spec.stride_h = spec.stride_w = 1 + static_cast<int>(rng.index(2));
      spec.padding = rng.uniform() < 0.5 ? Padding::Same : Padding::Valid;
      spec.out_channels = 2 + static_cast<int>(rng.index(3));
      TensorD x = random_uniform<double>(Shape::nhwc(n, hgt, wid, cin), rng);
      TensorD w = random_uniform<double>(
          Shape{spec.kernel_h, spec.kernel_w, cin, spec.out_channels}, rng, -0.5, 0.5);
      TensorD b = random_uniform<double>(Shape{spec.out_channels}, rng, -0.5, 0.5);
      TensorD y = conv2d_forward(x, w, std::span<const double>(b.data), spec);
      TensorD r = random_uniform<double>(y.shape, rng);
      auto grads = conv2d_backward(r, x, w, spec);
      rec.record("conv2d/input", grads.input,
                 [&](const TensorD& probe) {
                   return project(conv2d_forward(probe, w, std::span<const double>(b.data), spec),
                                  r);
                 },
                 x);
      rec.record("conv2d/weights", grads.weights,
                 [&](const TensorD& probe) {
                   return project(conv2d_forward(x, probe, std::span<const double>(b.data), spec),
                                  r);
                 },
                 w);
      rec.record("conv2d/bias",
                 TensorD(Shape{spec.out_channels}, std::vector<double>(grads.bias)),
                 [&](const TensorD& probe) {
                   return project(
                       conv2d_forward(x, w, std::span<const double>(probe.data), spec), r);
                 },
                 b);
    }

    // Fused-ReLU convolution; inputs bounded away from the kink.
    {
      ConvSpec spec;
      spec.kernel_h = spec.kernel_w = 1;
      spec.out_channels = 3;
      spec.activation = Activation::ReLU;
      TensorD x = random_off_zero(Shape::nhwc(2, 4, 4, 2), rng);
      TensorD w(Shape{1, 1, 2, 3});
      // Orthogonal-ish rows keep pre-activations away from zero.
      for (auto& v : w.data) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
      TensorD b = random_uniform<double>(Shape{3}, rng, 0.1, 0.3);
      TensorD y = conv2d_forward(x, w, std::span<const double>(b.data), spec);
      TensorD r = random_uniform<double>(y.shape, rng);
      auto grads = conv2d_backward(r, x, w, spec, &y);
      rec.record("conv2d/fused_relu", grads.input,
                 [&](const TensorD& probe) {
                   return project(conv2d_forward(probe, w, std::span<const double>(b.data), spec),
                                  r);
                 },
                 x);
    }

    // Pooling.
    for (PoolMode mode : {PoolMode::Max, PoolMode::Avg}) {
      PoolSpec spec;
      spec.mode = mode;
      spec.kernel_h = spec.kernel_w = 2 + static_cast<int>(rng.index(2));
      spec.stride_h = spec.stride_w = 1 + static_cast<int>(rng.index(2));
      spec.padding = rng.uniform() < 0.5 ? Padding::Same : Padding::Valid;
      TensorD x = random_uniform<double>(Shape::nhwc(2, 6, 6, 2), rng);
      auto fwd = pool2d_forward(x, spec);
      TensorD r = random_uniform<double>(fwd.output.shape, rng);
      TensorD analytic = pool2d_backward(r, x.shape, spec, fwd.argmax);
      rec.record(mode == PoolMode::Max ? "pool2d/max" : "pool2d/avg", analytic,
                 [&](const TensorD& probe) {
                   return project(pool2d_forward(probe, spec).output, r);
                 },
                 x);
    }

    // BatchNorm, both modes, gradients of input / gamma / beta.
    for (Mode mode : {Mode::Train, Mode::Infer}) {
      const std::int64_t c = 3;
      TensorD x = random_uniform<double>(Shape::nhwc(2, 3, 3, c), rng);
      TensorD gamma = random_uniform<double>(Shape{c}, rng, 0.5, 1.5);
      TensorD beta = random_uniform<double>(Shape{c}, rng, -0.5, 0.5);
      TensorD rm = random_uniform<double>(Shape{c}, rng, -0.2, 0.2);
      TensorD rv = random_uniform<double>(Shape{c}, rng, 0.5, 1.5);
      const double eps = 1e-3, mom = 0.99;
      auto run = [&](const TensorD& xx, const TensorD& g, const TensorD& bb) {
        return batchnorm_forward<double>(xx, std::span<const double>(g.data),
                                         std::span<const double>(bb.data),
                                         std::span<const double>(rm.data),
                                         std::span<const double>(rv.data), eps, mom, mode);
      };
      auto fwd = run(x, gamma, beta);
      TensorD r = random_uniform<double>(fwd.output.shape, rng);
      auto grads = batchnorm_backward<double>(r, fwd.xhat, std::span<const double>(fwd.inv_std),
                                              std::span<const double>(gamma.data), mode);
      const char* tag = mode == Mode::Train ? "batchnorm/train" : "batchnorm/infer";
      rec.record(std::string(tag) + "/input", grads.input,
                 [&](const TensorD& probe) { return project(run(probe, gamma, beta).output, r); },
                 x);
      rec.record(std::string(tag) + "/gamma",
                 TensorD(Shape{c}, std::vector<double>(grads.gamma)),
                 [&](const TensorD& probe) { return project(run(x, probe, beta).output, r); },
                 gamma);
      rec.record(std::string(tag) + "/beta",
                 TensorD(Shape{c}, std::vector<double>(grads.beta)),
                 [&](const TensorD& probe) { return project(run(x, gamma, probe).output, r); },
                 beta);
    }

    // add_scaled.
    {
      Shape s = Shape::nhwc(2, 3, 3, 4);
      TensorD a = random_uniform<double>(s, rng);
      TensorD b = random_uniform<double>(s, rng);
      const double alpha = rng.uniform(0.0, 1.0);
      TensorD r = random_uniform<double>(s, rng);
      TensorD da = r;
      TensorD db(s);
      for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] = alpha * r.data[i];
      rec.record("add_scaled/shortcut", da,
                 [&](const TensorD& probe) { return project(add_scaled(probe, b, alpha), r); },
                 a);
      rec.record("add_scaled/residual", db,
                 [&](const TensorD& probe) { return project(add_scaled(a, probe, alpha), r); },
                 b);
    }

    // concat_channels (gradient of one input via slice).
    {
      TensorD a = random_uniform<double>(Shape::nhwc(1, 3, 3, 2), rng);
      TensorD b = random_uniform<double>(Shape::nhwc(1, 3, 3, 3), rng);
      TensorD y = concat_channels<double>({&a, &b});
      TensorD r = random_uniform<double>(y.shape, rng);
      rec.record("concat/input0", slice_channels(r, 0, 2),
                 [&](const TensorD& probe) {
                   return project(concat_channels<double>({&probe, &b}), r);
                 },
                 a);
      rec.record("concat/input1", slice_channels(r, 2, 3),
                 [&](const TensorD& probe) {
                   return project(concat_channels<double>({&a, &probe}), r);
                 },
                 b);
    }

    // ReLU away from the kink.
    {
      TensorD x = random_off_zero(Shape::nhwc(2, 3, 3, 2), rng);
      TensorD y = relu(x);
      TensorD r = random_uniform<double>(y.shape, rng);
      rec.record("relu", relu_backward(r, y),
                 [&](const TensorD& probe) { return project(relu(probe), r); }, x);
    }

    // GlobalAvgPool.
    {
      TensorD x = random_uniform<double>(Shape::nhwc(2, 4, 4, 3), rng);
      TensorD y = global_avgpool(x);
      TensorD r = random_uniform<double>(y.shape, rng);
      rec.record("global_avgpool", global_avgpool_backward(r, x.shape),
                 [&](const TensorD& probe) { return project(global_avgpool(probe), r); }, x);
    }

    // Dropout with a fixed mask.
    {
      TensorD x = random_uniform<double>(Shape::nhwc(2, 3, 3, 2), rng);
      const double keep = 0.7;
      const std::uint64_t drop_seed = mix_seed(seed, 77 + static_cast<std::uint64_t>(inst));
      auto fwd = dropout_forward(x, keep, Mode::Train, drop_seed);
      TensorD r = random_uniform<double>(fwd.output.shape, rng);
      rec.record("dropout", dropout_backward(r, fwd.mask, keep),
                 [&](const TensorD& probe) {
                   return project(dropout_forward(probe, keep, Mode::Train, drop_seed).output, r);
                 },
                 x);
    }

    // FullyConnected.
    {
      TensorD x = random_uniform<double>(Shape{3, 4}, rng);
      TensorD w = random_uniform<double>(Shape{4, 5}, rng, -0.5, 0.5);
      TensorD b = random_uniform<double>(Shape{5}, rng, -0.5, 0.5);
      TensorD y = fully_connected(x, w, std::span<const double>(b.data));
      TensorD r = random_uniform<double>(y.shape, rng);
      auto grads = fully_connected_backward(r, x, w);
      rec.record("fully_connected/input", grads.input,
                 [&](const TensorD& probe) {
                   return project(fully_connected(probe, w, std::span<const double>(b.data)), r);
                 },
                 x);
      rec.record("fully_connected/weights", grads.weights,
                 [&](const TensorD& probe) {
                   return project(fully_connected(x, probe, std::span<const double>(b.data)), r);
                 },
                 w);
      rec.record("fully_connected/bias", TensorD(Shape{5}, std::vector<double>(grads.bias)),
                 [&](const TensorD& probe) {
                   return project(fully_connected(x, w, std::span<const double>(probe.data)), r);
                 },
                 b);
    }

    // Softmax.
    {
      TensorD x = random_uniform<double>(Shape{3, 5}, rng, -2.0, 2.0);
      TensorD y = softmax(x);
      TensorD r = random_uniform<double>(y.shape, rng);
      rec.record("softmax", softmax_backward(r, y),
                 [&](const TensorD& probe) { return project(softmax(probe), r); }, x);
    }

    // Softmax cross-entropy: analytic grad vs finite differences of the
    // loss itself.
    {
      TensorD x = random_uniform<double>(Shape{4, 6}, rng, -2.0, 2.0);
      std::vector<std::int32_t> labels(4);
      for (auto& l : labels) l = static_cast<std::int32_t>(rng.index(6));
      auto out = softmax_cross_entropy(x, std::span<const std::int32_t>(labels));
      rec.record("softmax_cross_entropy", out.grad_logits,
                 [&](const TensorD& probe) {
                   return softmax_cross_entropy(probe, std::span<const std::int32_t>(labels)).loss;
                 },
                 x);
    }

    // Composed chain conv -> relu -> weighted sum, gradient w.r.t. input.
    {
      ConvSpec spec;
      spec.kernel_h = spec.kernel_w = 3;
      spec.out_channels = 2;
      spec.padding = Padding::Same;
      TensorD x = random_uniform<double>(Shape::nhwc(1, 5, 5, 2), rng);
      TensorD w = random_uniform<double>(Shape{3, 3, 2, 2}, rng, -0.5, 0.5);
      TensorD b = random_uniform<double>(Shape{2}, rng, 0.2, 0.4);
      TensorD y = relu(conv2d_forward(x, w, std::span<const double>(b.data), spec));
      TensorD r = random_uniform<double>(y.shape, rng);
      TensorD dy = relu_backward(r, y);
      auto grads = conv2d_backward(dy, x, w, spec);
      rec.record("chain/conv_relu_sum", grads.input,
                 [&](const TensorD& probe) {
                   return project(
                       relu(conv2d_forward(probe, w, std::span<const double>(b.data), spec)), r);
                 },
                 x);
    }
  }
  return rec.results;
}

// ---------------------------------------------------------------------------
// Whole-graph parameter check
// ---------------------------------------------------------------------------

std::vector<ParamCheckResult> graph_gradcheck(const GraphSpec& graph, std::uint64_t seed,
                                              double h, std::int64_t max_coords_per_param) {
  ParamStore<double> params = init_params<double>(graph, seed);
  Rng rng(mix_seed(seed, 0xF00DULL));

  Shape in_shape = graph.input_shape;
  in_shape[0] = 2;
  TensorD input = random_uniform<double>(in_shape, rng);

  const NodeSpec& out_node = graph.node(graph.output_id);
  const std::string target =
      out_node.kind == NodeKind::Softmax ? out_node.inputs[0] : out_node.id;
  const std::uint64_t forward_seed = mix_seed(seed, 0xD0D0ULL);

  Executor<double> exec(graph);
  exec.forward(params, input, Mode::Train, forward_seed);
  const TensorD& target_out = exec.activation(target);

  // Loss: cross-entropy on rank-2 logits, random projection otherwise.
  std::vector<std::int32_t> labels;
  TensorD projection;
  const bool use_xent = target_out.shape.rank() == 2;
  if (use_xent) {
    labels.resize(static_cast<std::size_t>(target_out.shape[0]));
    for (auto& l : labels) l = static_cast<std::int32_t>(rng.index(target_out.shape[1]));
  } else {
    projection = random_uniform<double>(target_out.shape, rng);
  }

  auto loss_of = [&](ParamStore<double>& p) {
    exec.forward(p, input, Mode::Train, forward_seed);
    const TensorD& y = exec.activation(target);
    if (use_xent) return softmax_cross_entropy(y, std::span<const std::int32_t>(labels)).loss;
    double acc = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * projection.data[i];
    return acc;
  };

  // Analytic gradients.
  loss_of(params);
  TensorD seed_grad;
  if (use_xent) {
    seed_grad = softmax_cross_entropy(exec.activation(target),
                                      std::span<const std::int32_t>(labels))
                    .grad_logits;
  } else {
    seed_grad = projection;
  }
  ParamStore<double> analytic = exec.backward(params, target, seed_grad);

  // Relative error is measured against the scale of the whole gradient
  // field. Per-tensor norms would blow up on parameters whose gradient is
  // exactly zero by construction (a conv bias feeding a BatchNorm is
  // cancelled by the mean subtraction) where finite differences only see
  // roundoff noise.
  double global_norm = 1e-8;
  for (const auto& [name, g] : analytic)
    for (double v : g.data) global_norm = std::max(global_norm, std::fabs(v));

  std::vector<ParamCheckResult> results;
  for (const ParamInfo& info : parameter_manifest(graph)) {
    if (!info.trainable) continue;
    TensorD& tensor = params.at(info.name);
    const TensorD* agrad = nullptr;
    auto it = analytic.find(info.name);
    if (it != analytic.end()) agrad = &it->second;

    const std::int64_t count = tensor.count();
    std::int64_t checks = (max_coords_per_param > 0)
                              ? std::min<std::int64_t>(count, max_coords_per_param)
                              : count;
    ParamCheckResult res;
    res.param = info.name;
    res.checked_coords = checks;
    const double norm = global_norm;
    for (std::int64_t j = 0; j < checks; ++j) {
      // Evenly spread coordinates when subsampling.
      const std::int64_t i = (checks == count) ? j : (j * count) / checks;
      const double orig = tensor.data[static_cast<std::size_t>(i)];
      tensor.data[static_cast<std::size_t>(i)] = orig + h;
      const double up = loss_of(params);
      tensor.data[static_cast<std::size_t>(i)] = orig - h;
      const double down = loss_of(params);
      tensor.data[static_cast<std::size_t>(i)] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = agrad ? agrad->data[static_cast<std::size_t>(i)] : 0.0;
      const double rel =
          std::fabs(a - numeric) / std::max({norm, std::fabs(a), std::fabs(numeric)});
      if (rel > res.worst_rel_err) {
        res.worst_rel_err = rel;
        res.worst_coord = i;
      }
    }
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace incepkit
