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

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "incepkit/graph.hpp"

namespace incepkit {

template <typename T>
using ParamStore = std::map<std::string, TensorT<T>>;

struct ParamInfo {
  std::string name;     // "<node id>/w", "<node id>/gamma", ...
  std::string node_id;
  std::string role;     // conv_weight, conv_bias, bn_gamma, bn_beta,
                        // bn_running_mean, bn_running_var, fc_weight, fc_bias
  Shape shape;
  bool trainable = true;
};

// Flat manifest of every parameter the graph needs, in topological order.
std::vector<ParamInfo> parameter_manifest(const GraphSpec& graph);

// Variance-scaling normal init (std = sqrt(2/fan_in)) for conv and fc
// weights, zero biases, gamma=1 / beta=0 and mean=0 / var=1 for BatchNorm.
template <typename T>
ParamStore<T> init_params(const GraphSpec& graph, std::uint64_t seed);

// Evaluates a graph in topological order on top of the tensor kernels.
// Train mode keeps per-node contexts so backward() can run afterwards, and
// commits BatchNorm running-stat updates into the store.
//
// The batch dim of the input is free; H, W, C must match the graph's
// input_shape. An Executor instance is confined to one logical task.
template <typename T>
class Executor {
 public:
  explicit Executor(const GraphSpec& graph);

  const TensorT<T>& forward(ParamStore<T>& params, const TensorT<T>& input, Mode mode,
                            std::uint64_t seed = 0);

  // Output of the last forward() for any node.
  const TensorT<T>& activation(const std::string& id) const;

  // Reverse sweep from `at_node` with the given upstream gradient.
  // Gradients of fan-out nodes accumulate by summation. Returns gradients
  // for every trainable parameter; running stats get none.
  ParamStore<T> backward(const ParamStore<T>& params, const std::string& at_node,
                         const TensorT<T>& grad);

  // d(loss)/d(input) from the last backward().
  const TensorT<T>& input_gradient() const;

  // Id of the first node (in evaluation order) whose output holds a
  // non-finite value, if any. Diagnostic for aborted training runs.
  std::optional<std::string> first_nonfinite_node() const;

  const GraphSpec& graph() const { return *graph_; }

 private:
  struct NodeState {
    TensorT<T> output;
    TensorT<T> xhat;                    // BatchNorm
    std::vector<T> inv_std;             // BatchNorm
    std::vector<std::int64_t> argmax;   // MaxPool
    std::vector<std::uint8_t> mask;     // Dropout
  };

  const GraphSpec* graph_;
  std::vector<std::int64_t> order_;
  std::map<std::string, std::int64_t> index_;
  std::vector<NodeState> state_;
  TensorT<T> input_grad_;
  Mode last_mode_ = Mode::Infer;
  bool has_forward_ = false;
};

extern template class Executor<float>;
extern template class Executor<double>;
extern template ParamStore<float> init_params<float>(const GraphSpec&, std::uint64_t);
extern template ParamStore<double> init_params<double>(const GraphSpec&, std::uint64_t);

}  // namespace incepkit
