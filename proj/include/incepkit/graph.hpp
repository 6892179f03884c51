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
// Typed DAG description of a network. Two merge kinds are distinguished on
// purpose: Concat (filter concatenation) and ResidualAdd (scaled shortcut
// sum), so swapping one for the other is a structural graph operation.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "incepkit/kernels.hpp"
#include "incepkit/tensor.hpp"

namespace incepkit {

enum class NodeKind {
  Input,
  Conv,
  MaxPool,
  AvgPool,
  BatchNorm,
  ReLU,
  Concat,
  ResidualAdd,
  GlobalAvgPool,
  Dropout,
  FullyConnected,
  Softmax,
};

std::string to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

struct BatchNormNodeParams {
  double epsilon = 1e-3;
  double momentum = 0.99;
};

struct ResidualAddParams {
  double alpha = 1.0;  // alpha = 1 reproduces the plain residual sum
};

struct DropoutParams {
  double keep = 1.0;
};

struct FullyConnectedParams {
  std::int64_t units = 0;
};

using NodeParams = std::variant<std::monostate, ConvSpec, PoolSpec, BatchNormNodeParams,
                                ResidualAddParams, DropoutParams, FullyConnectedParams>;

struct NodeSpec {
  std::string id;
  NodeKind kind = NodeKind::Input;
  NodeParams params;
  std::vector<std::string> inputs;  // ResidualAdd: [shortcut, residual]

  const ConvSpec& conv() const { return std::get<ConvSpec>(params); }
  const PoolSpec& pool() const { return std::get<PoolSpec>(params); }
  const BatchNormNodeParams& batchnorm() const { return std::get<BatchNormNodeParams>(params); }
  const ResidualAddParams& residual_add() const { return std::get<ResidualAddParams>(params); }
  const DropoutParams& dropout() const { return std::get<DropoutParams>(params); }
  const FullyConnectedParams& fully_connected() const {
    return std::get<FullyConnectedParams>(params);
  }
};

struct GraphSpec {
  std::vector<NodeSpec> nodes;
  Shape input_shape;  // NHWC, batch dim conventionally 1
  std::string output_id;

  // Index of a node id in `nodes`, or -1.
  std::int64_t find(const std::string& id) const;
  const NodeSpec& node(const std::string& id) const;
};

using ShapeMap = std::map<std::string, Shape>;

// Node indices in evaluation order (stable: ties broken by list position).
// Throws BadInput on cycles or dangling input ids.
std::vector<std::int64_t> topo_order(const GraphSpec& graph);

// Per-node output shapes using the kernel grid rules. Shape conflicts are
// reported with the node id and both offending shapes; a conflict at a
// ResidualAdd is the signature of a missing filter-expansion layer.
// batch_override substitutes the leading dim of input_shape.
ShapeMap infer_shapes(const GraphSpec& graph,
                      std::optional<std::int64_t> batch_override = std::nullopt);

// Output shape of a single node given its input shapes. Input nodes take
// graph_input. Builders use this to track shapes incrementally.
Shape infer_node_shape(const NodeSpec& node, const std::vector<Shape>& inputs,
                       const Shape& graph_input);

enum class Ruleset { Generic, InceptionResNet };

struct Violation {
  std::string node_id;
  std::string rule;
  std::string message;
};

// Generic: unique ids, resolvable inputs, acyclicity, arity, one Input,
// reachable output. InceptionResNet adds: (a) no BatchNorm directly on a
// ResidualAdd output, (b) every ResidualAdd's residual input produced by a
// Conv with activation=None, (c) both ResidualAdd inputs channel-matched.
std::vector<Violation> validate(const GraphSpec& graph, Ruleset ruleset);

struct CountRow {
  std::string id;
  NodeKind kind;
  std::int64_t value = 0;
};

struct ParamCounts {
  std::int64_t trainable = 0;
  std::int64_t non_trainable = 0;  // BatchNorm running stats
  std::vector<CountRow> per_node;  // trainable counts
};

// Conv: Kh*Kw*Cin*Cout + Cout. BatchNorm: 2C trainable + 2C running stats.
// FullyConnected: In*Out + Out.
ParamCounts count_params(const GraphSpec& graph);

struct FlopCounts {
  std::int64_t macs = 0;         // multiply-accumulates, conv + fc
  std::int64_t elementwise = 0;  // output elements of all non-MAC nodes
  std::vector<CountRow> per_node_macs;
};

// MACs per input as shaped (shipped graphs use batch 1, so per image):
// Conv = Kh*Kw*Cin*Cout*Ho*Wo, FC = In*Out; pooling/BN/ReLU count as 0 MACs
// and are reported in the elementwise tally instead.
FlopCounts count_flops(const GraphSpec& graph);

// Graphviz text, one node per NodeSpec annotated with kind and (optionally)
// inferred shape. Deterministic: nodes in topological order.
std::string export_dot(const GraphSpec& graph, const ShapeMap* shapes = nullptr);

// JSON wire format:
//   {"nodes":[{"id","kind","params","inputs"}...],
//    "input_shape":[...], "output_id":"..."}
std::string graph_to_json(const GraphSpec& graph, int indent = 2);
GraphSpec graph_from_json(const std::string& text);

}  // namespace incepkit
