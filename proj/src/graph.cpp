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

#include "incepkit/graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace incepkit {

using nlohmann::json;

std::string to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "Input";
    case NodeKind::Conv: return "Conv";
    case NodeKind::MaxPool: return "MaxPool";
    case NodeKind::AvgPool: return "AvgPool";
    case NodeKind::BatchNorm: return "BatchNorm";
    case NodeKind::ReLU: return "ReLU";
    case NodeKind::Concat: return "Concat";
    case NodeKind::ResidualAdd: return "ResidualAdd";
    case NodeKind::GlobalAvgPool: return "GlobalAvgPool";
    case NodeKind::Dropout: return "Dropout";
    case NodeKind::FullyConnected: return "FullyConnected";
    case NodeKind::Softmax: return "Softmax";
  }
  throw Error("unreachable node kind");
}

NodeKind node_kind_from_string(const std::string& s) {
  static const std::unordered_map<std::string, NodeKind> table = {
      {"Input", NodeKind::Input},
      {"Conv", NodeKind::Conv},
      {"MaxPool", NodeKind::MaxPool},
      {"AvgPool", NodeKind::AvgPool},
      {"BatchNorm", NodeKind::BatchNorm},
      {"ReLU", NodeKind::ReLU},
      {"Concat", NodeKind::Concat},
      {"ResidualAdd", NodeKind::ResidualAdd},
      {"GlobalAvgPool", NodeKind::GlobalAvgPool},
      {"Dropout", NodeKind::Dropout},
      {"FullyConnected", NodeKind::FullyConnected},
      {"Softmax", NodeKind::Softmax},
  };
  auto it = table.find(s);
  if (it == table.end()) throw BadInput("unknown node kind: " + s);
  return it->second;
}

std::int64_t GraphSpec::find(const std::string& id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].id == id) return static_cast<std::int64_t>(i);
  return -1;
}

const NodeSpec& GraphSpec::node(const std::string& id) const {
  std::int64_t i = find(id);
  if (i < 0) throw BadInput("no such node: " + id);
  return nodes[static_cast<std::size_t>(i)];
}

// ---------------------------------------------------------------------------
// Topological order
// ---------------------------------------------------------------------------

namespace {

std::unordered_map<std::string, std::int64_t> id_index(const GraphSpec& g) {
  std::unordered_map<std::string, std::int64_t> m;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    auto [_, inserted] = m.emplace(g.nodes[i].id, static_cast<std::int64_t>(i));
    if (!inserted) throw BadInput("duplicate node id: " + g.nodes[i].id);
  }
  return m;
}

int expected_arity(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return 0;
    case NodeKind::ResidualAdd: return 2;
    case NodeKind::Concat: return -2;  // at least 2
    default: return 1;
  }
}

}  // namespace

std::vector<std::int64_t> topo_order(const GraphSpec& graph) {
  auto index = id_index(graph);
  const std::int64_t n = static_cast<std::int64_t>(graph.nodes.size());
  std::vector<std::int64_t> indegree(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<std::int64_t>> users(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    for (const auto& in : graph.nodes[static_cast<std::size_t>(i)].inputs) {
      auto it = index.find(in);
      if (it == index.end())
        throw BadInput("node " + graph.nodes[static_cast<std::size_t>(i)].id +
                       " references unknown input " + in);
      users[static_cast<std::size_t>(it->second)].push_back(i);
      ++indegree[static_cast<std::size_t>(i)];
    }
  }
  // Kahn's algorithm; the ready set is kept sorted by list position so the
  // order is deterministic.
  std::vector<std::int64_t> ready;
  for (std::int64_t i = 0; i < n; ++i)
    if (indegree[static_cast<std::size_t>(i)] == 0) ready.push_back(i);
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(n));
  std::size_t head = 0;
  while (head < ready.size()) {
    std::int64_t i = ready[head++];
    order.push_back(i);
    for (std::int64_t u : users[static_cast<std::size_t>(i)])
      if (--indegree[static_cast<std::size_t>(u)] == 0) ready.push_back(u);
  }
  if (order.size() != static_cast<std::size_t>(n)) throw BadInput("graph contains a cycle");
  return order;
}

// ---------------------------------------------------------------------------
// Shape inference
// ---------------------------------------------------------------------------

namespace {

Shape conv_out_shape(const std::string& id, const Shape& in, const ConvSpec& spec) {
  if (in.rank() != 4)
    throw BadInput("node " + id + ": Conv expects NHWC input, got " + in.str());
  std::int64_t oh, ow;
  try {
    oh = out_extent(in.h(), spec.kernel_h, spec.stride_h, spec.padding);
    ow = out_extent(in.w(), spec.kernel_w, spec.stride_w, spec.padding);
  } catch (const BadInput& e) {
    throw BadInput("node " + id + ": " + e.what() + " (input " + in.str() + ")");
  }
  return Shape::nhwc(in.n(), oh, ow, spec.out_channels);
}

Shape pool_out_shape(const std::string& id, const Shape& in, const PoolSpec& spec) {
  if (in.rank() != 4)
    throw BadInput("node " + id + ": pooling expects NHWC input, got " + in.str());
  std::int64_t oh, ow;
  try {
    oh = out_extent(in.h(), spec.kernel_h, spec.stride_h, spec.padding);
    ow = out_extent(in.w(), spec.kernel_w, spec.stride_w, spec.padding);
  } catch (const BadInput& e) {
    throw BadInput("node " + id + ": " + e.what() + " (input " + in.str() + ")");
  }
  return Shape::nhwc(in.n(), oh, ow, in.c());
}

void check_arity(const NodeSpec& node) {
  int want = expected_arity(node.kind);
  int got = static_cast<int>(node.inputs.size());
  if (want == -2) {
    if (got < 2)
      throw BadInput("node " + node.id + ": Concat needs at least 2 inputs, has " +
                     std::to_string(got));
  } else if (got != want) {
    throw BadInput("node " + node.id + ": " + to_string(node.kind) + " needs " +
                   std::to_string(want) + " input(s), has " + std::to_string(got));
  }
}

}  // namespace

Shape infer_node_shape(const NodeSpec& node, const std::vector<Shape>& inputs,
                       const Shape& graph_input) {
  check_arity(node);
  if (inputs.size() != node.inputs.size())
    throw BadInput("node " + node.id + ": wrong number of input shapes");
  switch (node.kind) {
    case NodeKind::Input:
      return graph_input;
    case NodeKind::Conv:
      return conv_out_shape(node.id, inputs[0], node.conv());
    case NodeKind::MaxPool:
    case NodeKind::AvgPool:
      return pool_out_shape(node.id, inputs[0], node.pool());
    case NodeKind::BatchNorm:
    case NodeKind::ReLU:
    case NodeKind::Dropout:
      return inputs[0];
    case NodeKind::Concat: {
      const Shape& first = inputs[0];
      if (first.rank() != 4) throw BadInput("node " + node.id + ": Concat expects NHWC inputs");
      std::int64_t total_c = first.c();
      for (std::size_t i = 1; i < inputs.size(); ++i) {
        const Shape& s = inputs[i];
        if (s.rank() != 4 || s.n() != first.n() || s.h() != first.h() || s.w() != first.w())
          throw BadInput("node " + node.id + ": Concat grid mismatch between " + first.str() +
                         " and " + s.str());
        total_c += s.c();
      }
      return Shape::nhwc(first.n(), first.h(), first.w(), total_c);
    }
    case NodeKind::ResidualAdd: {
      const Shape& a = inputs[0];
      const Shape& b = inputs[1];
      if (a != b)
        throw BadInput("node " + node.id + ": ResidualAdd shape conflict, shortcut " + a.str() +
                       " vs residual " + b.str() +
                       " (residual branch missing a filter-expansion conv?)");
      return a;
    }
    case NodeKind::GlobalAvgPool: {
      const Shape& s = inputs[0];
      if (s.rank() != 4)
        throw BadInput("node " + node.id + ": GlobalAvgPool expects NHWC input, got " + s.str());
      return Shape{s.n(), s.c()};
    }
    case NodeKind::FullyConnected: {
      const Shape& s = inputs[0];
      if (s.rank() != 2)
        throw BadInput("node " + node.id + ": FullyConnected expects rank-2 input, got " + s.str());
      return Shape{s[0], node.fully_connected().units};
    }
    case NodeKind::Softmax: {
      const Shape& s = inputs[0];
      if (s.rank() != 2)
        throw BadInput("node " + node.id + ": Softmax expects rank-2 input, got " + s.str());
      return s;
    }
  }
  throw Error("unreachable node kind");
}

ShapeMap infer_shapes(const GraphSpec& graph, std::optional<std::int64_t> batch_override) {
  Shape input_shape = graph.input_shape;
  if (batch_override) {
    if (input_shape.rank() < 1) throw BadInput("graph input_shape is empty");
    input_shape[0] = *batch_override;
  }
  ShapeMap shapes;
  auto order = topo_order(graph);
  std::vector<Shape> ins;
  for (std::int64_t idx : order) {
    const NodeSpec& node = graph.nodes[static_cast<std::size_t>(idx)];
    ins.clear();
    for (const auto& in : node.inputs) ins.push_back(shapes.at(in));
    shapes.emplace(node.id, infer_node_shape(node, ins, input_shape));
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

std::vector<Violation> validate(const GraphSpec& graph, Ruleset ruleset) {
  std::vector<Violation> out;
  auto flag = [&](const std::string& id, const std::string& rule, const std::string& msg) {
    out.push_back(Violation{id, rule, msg});
  };

  // Generic structure. Errors here usually make the deeper checks
  // meaningless, so they short-circuit.
  {
    std::unordered_set<std::string> ids;
    for (const auto& n : graph.nodes)
      if (!ids.insert(n.id).second) flag(n.id, "unique-ids", "duplicate node id");
    int input_nodes = 0;
    for (const auto& n : graph.nodes) {
      if (n.kind == NodeKind::Input) ++input_nodes;
      for (const auto& in : n.inputs)
        if (!ids.count(in)) flag(n.id, "resolvable-inputs", "references unknown node " + in);
      int want = expected_arity(n.kind);
      int got = static_cast<int>(n.inputs.size());
      if (want == -2 ? got < 2 : got != want)
        flag(n.id, "arity", to_string(n.kind) + " has " + std::to_string(got) + " input(s)");
    }
    if (input_nodes != 1)
      flag("", "single-input", "graph has " + std::to_string(input_nodes) + " Input nodes");
    if (!ids.count(graph.output_id))
      flag(graph.output_id, "output-exists", "output_id not found");
    if (!out.empty()) return out;
    try {
      auto order = topo_order(graph);
      // Output reachable from Input: walk ancestors of output.
      auto index = id_index(graph);
      std::unordered_set<std::int64_t> seen;
      std::deque<std::int64_t> work{index.at(graph.output_id)};
      bool reaches_input = false;
      while (!work.empty()) {
        std::int64_t i = work.front();
        work.pop_front();
        if (!seen.insert(i).second) continue;
        const NodeSpec& n = graph.nodes[static_cast<std::size_t>(i)];
        if (n.kind == NodeKind::Input) reaches_input = true;
        for (const auto& in : n.inputs) work.push_back(index.at(in));
      }
      if (!reaches_input)
        flag(graph.output_id, "output-reachable", "output is not reachable from the Input node");
    } catch (const BadInput& e) {
      flag("", "acyclic", e.what());
      return out;
    }
  }

  if (ruleset != Ruleset::InceptionResNet) return out;

  // Channel counts for rule (c); an inference failure is itself reported.
  ShapeMap shapes;
  bool have_shapes = true;
  try {
    shapes = infer_shapes(graph);
  } catch (const BadInput& e) {
    have_shapes = false;
    flag("", "shape-inference", e.what());
  }

  for (const auto& n : graph.nodes) {
    if (n.kind == NodeKind::BatchNorm) {
      const NodeSpec& src = graph.node(n.inputs[0]);
      if (src.kind == NodeKind::ResidualAdd)
        flag(n.id, "no-bn-on-sum",
             "BatchNorm consumes the output of ResidualAdd " + src.id);
    }
    if (n.kind == NodeKind::ResidualAdd) {
      const NodeSpec& residual = graph.node(n.inputs[1]);
      if (residual.kind != NodeKind::Conv)
        flag(n.id, "expansion-conv",
             "residual input " + residual.id + " is " + to_string(residual.kind) +
                 ", expected a 1x1 Conv without activation");
      else if (residual.conv().activation != Activation::None)
        flag(n.id, "expansion-conv",
             "residual input " + residual.id + " must have activation=None");
      if (have_shapes) {
        std::int64_t ca = shapes.at(n.inputs[0]).c();
        std::int64_t cb = shapes.at(n.inputs[1]).c();
        if (ca != cb)
          flag(n.id, "channel-match",
               "shortcut has " + std::to_string(ca) + " channels, residual " + std::to_string(cb));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counting
// ---------------------------------------------------------------------------

ParamCounts count_params(const GraphSpec& graph) {
  ShapeMap shapes = infer_shapes(graph);
  ParamCounts counts;
  for (std::int64_t idx : topo_order(graph)) {
    const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
    std::int64_t trainable = 0;
    switch (n.kind) {
      case NodeKind::Conv: {
        const ConvSpec& c = n.conv();
        std::int64_t cin = shapes.at(n.inputs[0]).c();
        trainable = static_cast<std::int64_t>(c.kernel_h) * c.kernel_w * cin * c.out_channels +
                    c.out_channels;
        break;
      }
      case NodeKind::BatchNorm: {
        std::int64_t ch = shapes.at(n.inputs[0]).c();
        trainable = 2 * ch;
        counts.non_trainable += 2 * ch;
        break;
      }
      case NodeKind::FullyConnected: {
        std::int64_t in = shapes.at(n.inputs[0])[1];
        trainable = in * n.fully_connected().units + n.fully_connected().units;
        break;
      }
      default:
        break;
    }
    if (trainable > 0) counts.per_node.push_back(CountRow{n.id, n.kind, trainable});
    counts.trainable += trainable;
  }
  return counts;
}

FlopCounts count_flops(const GraphSpec& graph) {
  ShapeMap shapes = infer_shapes(graph);
  FlopCounts counts;
  for (std::int64_t idx : topo_order(graph)) {
    const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
    const Shape& out = shapes.at(n.id);
    std::int64_t macs = 0;
    switch (n.kind) {
      case NodeKind::Conv: {
        const ConvSpec& c = n.conv();
        std::int64_t cin = shapes.at(n.inputs[0]).c();
        macs = static_cast<std::int64_t>(c.kernel_h) * c.kernel_w * cin * c.out_channels *
               out.h() * out.w();
        break;
      }
      case NodeKind::FullyConnected:
        macs = shapes.at(n.inputs[0])[1] * n.fully_connected().units;
        break;
      case NodeKind::Input:
        break;
      default:
        counts.elementwise += out.count();
        break;
    }
    if (macs > 0) counts.per_node_macs.push_back(CountRow{n.id, n.kind, macs});
    counts.macs += macs;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// DOT export
// ---------------------------------------------------------------------------

namespace {

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

std::string node_label(const NodeSpec& n, const ShapeMap* shapes) {
  std::string label = to_string(n.kind);
  switch (n.kind) {
    case NodeKind::Conv: {
      const ConvSpec& c = n.conv();
      label += " " + std::to_string(c.kernel_h) + "x" + std::to_string(c.kernel_w) + "/" +
               std::to_string(c.stride_h) + (c.padding == Padding::Valid ? " V" : "") + " -> " +
               std::to_string(c.out_channels);
      if (c.activation == Activation::ReLU) label += " relu";
      break;
    }
    case NodeKind::MaxPool:
    case NodeKind::AvgPool: {
      const PoolSpec& p = n.pool();
      label += " " + std::to_string(p.kernel_h) + "x" + std::to_string(p.kernel_w) + "/" +
               std::to_string(p.stride_h) + (p.padding == Padding::Valid ? " V" : "");
      break;
    }
    case NodeKind::ResidualAdd: {
      std::ostringstream os;
      os << " alpha=" << n.residual_add().alpha;
      label += os.str();
      break;
    }
    case NodeKind::Dropout: {
      std::ostringstream os;
      os << " keep=" << n.dropout().keep;
      label += os.str();
      break;
    }
    case NodeKind::FullyConnected:
      label += " -> " + std::to_string(n.fully_connected().units);
      break;
    default:
      break;
  }
  if (shapes != nullptr) {
    auto it = shapes->find(n.id);
    if (it != shapes->end()) label += "\\n" + it->second.str();
  }
  return label;
}

}  // namespace

std::string export_dot(const GraphSpec& graph, const ShapeMap* shapes) {
  std::ostringstream os;
  os << "digraph network {\n";
  os << "  rankdir=TB;\n";
  os << "  node [shape=box, fontsize=10];\n";
  auto order = topo_order(graph);
  for (std::int64_t idx : order) {
    const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
    os << "  \"" << dot_escape(n.id) << "\" [label=\"" << dot_escape(n.id) << "\\n"
       << node_label(n, shapes) << "\"];\n";
  }
  for (std::int64_t idx : order) {
    const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
    for (const auto& in : n.inputs)
      os << "  \"" << dot_escape(in) << "\" -> \"" << dot_escape(n.id) << "\";\n";
  }
  os << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

json params_to_json(const NodeSpec& n) {
  json j = json::object();
  switch (n.kind) {
    case NodeKind::Conv: {
      const ConvSpec& c = n.conv();
      j["kernel"] = {c.kernel_h, c.kernel_w};
      j["stride"] = {c.stride_h, c.stride_w};
      j["padding"] = c.padding == Padding::Same ? "Same" : "Valid";
      j["out_channels"] = c.out_channels;
      j["activation"] = c.activation == Activation::ReLU ? "ReLU" : "None";
      break;
    }
    case NodeKind::MaxPool:
    case NodeKind::AvgPool: {
      const PoolSpec& p = n.pool();
      j["kernel"] = {p.kernel_h, p.kernel_w};
      j["stride"] = {p.stride_h, p.stride_w};
      j["padding"] = p.padding == Padding::Same ? "Same" : "Valid";
      break;
    }
    case NodeKind::BatchNorm:
      j["epsilon"] = n.batchnorm().epsilon;
      j["momentum"] = n.batchnorm().momentum;
      break;
    case NodeKind::ResidualAdd:
      j["alpha"] = n.residual_add().alpha;
      break;
    case NodeKind::Dropout:
      j["keep"] = n.dropout().keep;
      break;
    case NodeKind::FullyConnected:
      j["units"] = n.fully_connected().units;
      break;
    default:
      break;
  }
  return j;
}

Padding padding_from_json(const json& j) {
  std::string s = j.get<std::string>();
  if (s == "Same") return Padding::Same;
  if (s == "Valid") return Padding::Valid;
  throw BadInput("unknown padding: " + s);
}

NodeParams params_from_json(NodeKind kind, const json& j) {
  switch (kind) {
    case NodeKind::Conv: {
      ConvSpec c;
      c.kernel_h = j.at("kernel").at(0).get<int>();
      c.kernel_w = j.at("kernel").at(1).get<int>();
      c.stride_h = j.at("stride").at(0).get<int>();
      c.stride_w = j.at("stride").at(1).get<int>();
      c.padding = padding_from_json(j.at("padding"));
      c.out_channels = j.at("out_channels").get<int>();
      std::string act = j.at("activation").get<std::string>();
      if (act == "ReLU")
        c.activation = Activation::ReLU;
      else if (act == "None")
        c.activation = Activation::None;
      else
        throw BadInput("unknown activation: " + act);
      return c;
    }
    case NodeKind::MaxPool:
    case NodeKind::AvgPool: {
      PoolSpec p;
      p.mode = kind == NodeKind::MaxPool ? PoolMode::Max : PoolMode::Avg;
      p.kernel_h = j.at("kernel").at(0).get<int>();
      p.kernel_w = j.at("kernel").at(1).get<int>();
      p.stride_h = j.at("stride").at(0).get<int>();
      p.stride_w = j.at("stride").at(1).get<int>();
      p.padding = padding_from_json(j.at("padding"));
      return p;
    }
    case NodeKind::BatchNorm: {
      BatchNormNodeParams b;
      b.epsilon = j.value("epsilon", 1e-3);
      b.momentum = j.value("momentum", 0.99);
      return b;
    }
    case NodeKind::ResidualAdd: {
      ResidualAddParams r;
      r.alpha = j.at("alpha").get<double>();
      return r;
    }
    case NodeKind::Dropout: {
      DropoutParams d;
      d.keep = j.at("keep").get<double>();
      return d;
    }
    case NodeKind::FullyConnected: {
      FullyConnectedParams f;
      f.units = j.at("units").get<std::int64_t>();
      return f;
    }
    default:
      return std::monostate{};
  }
}

Shape shape_from_json(const json& j) {
  std::vector<std::int64_t> dims = j.get<std::vector<std::int64_t>>();
  switch (dims.size()) {
    case 1: return Shape{dims[0]};
    case 2: return Shape{dims[0], dims[1]};
    case 4: return Shape{dims[0], dims[1], dims[2], dims[3]};
    default: throw BadInput("shape must have rank 1, 2 or 4");
  }
}

}  // namespace

std::string graph_to_json(const GraphSpec& graph, int indent) {
  json j;
  j["nodes"] = json::array();
  for (const auto& n : graph.nodes) {
    json node;
    node["id"] = n.id;
    node["kind"] = to_string(n.kind);
    node["params"] = params_to_json(n);
    node["inputs"] = n.inputs;
    j["nodes"].push_back(std::move(node));
  }
  j["input_shape"] = graph.input_shape.dims();
  j["output_id"] = graph.output_id;
  return j.dump(indent) + "\n";
}

GraphSpec graph_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw BadInput(std::string("graph JSON parse error: ") + e.what());
  }
  try {
    GraphSpec g;
    for (const auto& node : j.at("nodes")) {
      NodeSpec n;
      n.id = node.at("id").get<std::string>();
      n.kind = node_kind_from_string(node.at("kind").get<std::string>());
      n.params = params_from_json(n.kind, node.value("params", json::object()));
      n.inputs = node.value("inputs", std::vector<std::string>{});
      g.nodes.push_back(std::move(n));
    }
    g.input_shape = shape_from_json(j.at("input_shape"));
    g.output_id = j.at("output_id").get<std::string>();
    return g;
  } catch (const json::exception& e) {
    throw BadInput(std::string("graph JSON structure error: ") + e.what());
  }
}

}  // namespace incepkit
