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

#include "incepkit/zoo.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

namespace incepkit::zoo {

using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::InceptionV4: return "inception_v4";
    case Variant::InceptionResNetV1: return "inception_resnet_v1";
    case Variant::InceptionResNetV2: return "inception_resnet_v2";
  }
  throw Error("unreachable variant");
}

Variant variant_from_string(const std::string& s) {
  if (s == "inception_v4" || s == "v4") return Variant::InceptionV4;
  if (s == "inception_resnet_v1" || s == "ir1") return Variant::InceptionResNetV1;
  if (s == "inception_resnet_v2" || s == "ir2") return Variant::InceptionResNetV2;
  throw BadInput("unknown variant: " + s + " (expected v4, ir1 or ir2)");
}

// ---------------------------------------------------------------------------
// Definition files
// ---------------------------------------------------------------------------

std::string data_dir() {
  const char* env = std::getenv("INCEPKIT_DATA_DIR");
  if (env != nullptr && env[0] != '\0') return env;
#ifdef INCEPKIT_DEFAULT_DATA_DIR
  return INCEPKIT_DEFAULT_DATA_DIR;
#else
  return "data";
#endif
}

namespace {

StepDef parse_step(const json& j);

std::vector<std::vector<StepDef>> parse_branches(const json& j) {
  std::vector<std::vector<StepDef>> branches;
  for (const auto& branch : j) {
    std::vector<StepDef> steps;
    for (const auto& step : branch) steps.push_back(parse_step(step));
    branches.push_back(std::move(steps));
  }
  return branches;
}

StepDef parse_step(const json& j) {
  StepDef s;
  std::string op = j.at("op").get<std::string>();
  if (op == "split") {
    s.op = StepDef::Op::Split;
    s.branches = parse_branches(j.at("branches"));
    if (s.branches.size() < 2) throw BadInput("definition: split needs at least 2 branches");
    return s;
  }
  if (op == "conv")
    s.op = StepDef::Op::Conv;
  else if (op == "maxpool")
    s.op = StepDef::Op::MaxPool;
  else if (op == "avgpool")
    s.op = StepDef::Op::AvgPool;
  else
    throw BadInput("definition: unknown step op " + op);
  s.kernel_h = j.at("kernel").at(0).get<int>();
  s.kernel_w = j.at("kernel").at(1).get<int>();
  s.stride = j.value("stride", 1);
  std::string padding = j.value("padding", "same");
  if (padding == "same")
    s.padding = Padding::Same;
  else if (padding == "valid")
    s.padding = Padding::Valid;
  else
    throw BadInput("definition: unknown padding " + padding);
  if (s.op == StepDef::Op::Conv) {
    const json& f = j.at("filters");
    if (f.is_string()) {
      s.symbol = f.get<std::string>();
      if (s.symbol != "k" && s.symbol != "l" && s.symbol != "m" && s.symbol != "n")
        throw BadInput("definition: unknown filter symbol " + s.symbol);
    } else {
      s.filters = f.get<int>();
      if (s.filters <= 0) throw BadInput("definition: filter counts must be positive");
    }
  }
  return s;
}

BlockDef parse_block(const json& j) {
  BlockDef b;
  b.branches = parse_branches(j.at("branches"));
  if (b.branches.size() < 2) throw BadInput("definition: block needs at least 2 branches");
  return b;
}

ArchDefinition parse_definition(const json& j) {
  ArchDefinition def;
  def.name = j.at("name").get<std::string>();
  def.residual = j.at("residual").get<bool>();
  const json& d = j.at("defaults");
  auto counts = d.at("block_counts").get<std::vector<int>>();
  if (counts.size() != 3) throw BadInput("definition: block_counts must have 3 entries");
  def.default_block_counts = {counts[0], counts[1], counts[2]};
  const json& ra = d.at("reduction_a");
  def.default_reduction_a = {ra.at("k").get<int>(), ra.at("l").get<int>(), ra.at("m").get<int>(),
                             ra.at("n").get<int>()};
  def.default_dropout_keep = d.at("dropout_keep").get<double>();
  def.default_residual_scale = d.at("residual_scale").get<double>();
  for (const auto& step : j.at("stem")) def.stem.push_back(parse_step(step));
  def.block_a = parse_block(j.at("block_a"));
  def.block_b = parse_block(j.at("block_b"));
  def.block_c = parse_block(j.at("block_c"));
  def.reduction_a = parse_block(j.at("reduction_a"));
  def.reduction_b = parse_block(j.at("reduction_b"));
  return def;
}

}  // namespace

const ArchDefinition& load_definition(Variant v) {
  static std::mutex mutex;
  static std::map<Variant, ArchDefinition> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(v);
  if (it != cache.end()) return it->second;
  std::string path = data_dir() + "/" + to_string(v) + ".json";
  std::ifstream is(path);
  if (!is)
    throw BadInput("cannot open architecture definition " + path +
                   " (set INCEPKIT_DATA_DIR to the data directory)");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw BadInput("definition " + path + ": " + e.what());
  }
  try {
    auto [pos, _] = cache.emplace(v, parse_definition(j));
    return pos->second;
  } catch (const json::exception& e) {
    throw BadInput("definition " + path + ": " + e.what());
  }
}

int scale_filters(int filters, double width) {
  if (filters <= 0) throw BadInput("filter count must be positive");
  if (!(width > 0.0 && width <= 1.0)) throw BadInput("width multiplier must be in (0, 1]");
  int scaled = static_cast<int>(std::llround(static_cast<double>(filters) * width / 4.0)) * 4;
  if (scaled < 4)
    throw BadInput("infeasible width " + std::to_string(width) + ": a bank of " +
                   std::to_string(filters) + " filters would round below 4");
  return scaled;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ArchConfig ArchConfig::defaults(Variant v) {
  const ArchDefinition& def = load_definition(v);
  ArchConfig c;
  c.variant = v;
  c.block_counts = def.default_block_counts;
  c.reduction_a = def.default_reduction_a;
  c.dropout_keep = def.default_dropout_keep;
  c.residual_scale = def.default_residual_scale;
  return c;
}

namespace {

void check_config(const ArchConfig& c) {
  if (c.num_classes < 1) throw BadInput("num_classes must be positive");
  if (!(c.width_multiplier > 0.0 && c.width_multiplier <= 1.0))
    throw BadInput("width_multiplier must be in (0, 1]");
  if (!(c.residual_scale >= 0.0 && c.residual_scale <= 1.0))
    throw BadInput("residual_scale must be in [0, 1]");
  if (!(c.dropout_keep > 0.0 && c.dropout_keep <= 1.0))
    throw BadInput("dropout_keep must be in (0, 1]");
  if (c.input_h < 16 || c.input_w < 16) throw BadInput("input size too small");
  for (int n : c.block_counts)
    if (n < 1) throw BadInput("block counts must be >= 1");
  if (c.reduction_a.k <= 0 || c.reduction_a.l <= 0 || c.reduction_a.m <= 0 ||
      c.reduction_a.n <= 0)
    throw BadInput("reduction_a filter banks must be positive");
}

}  // namespace

std::string arch_config_to_json(const ArchConfig& config, int indent) {
  json j;
  j["variant"] = to_string(config.variant);
  j["num_classes"] = config.num_classes;
  j["width_multiplier"] = config.width_multiplier;
  j["residual_scale"] = config.residual_scale;
  j["block_counts"] = {config.block_counts[0], config.block_counts[1], config.block_counts[2]};
  j["reduction_a"] = {{"k", config.reduction_a.k},
                      {"l", config.reduction_a.l},
                      {"m", config.reduction_a.m},
                      {"n", config.reduction_a.n}};
  j["dropout_keep"] = config.dropout_keep;
  j["input_size"] = {config.input_h, config.input_w};
  return j.dump(indent) + "\n";
}

ArchConfig arch_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw BadInput(std::string("arch config parse error: ") + e.what());
  }
  try {
    ArchConfig c = ArchConfig::defaults(variant_from_string(j.at("variant").get<std::string>()));
    if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int>();
    if (j.contains("width_multiplier")) c.width_multiplier = j["width_multiplier"].get<double>();
    if (j.contains("residual_scale")) c.residual_scale = j["residual_scale"].get<double>();
    if (j.contains("block_counts")) {
      auto counts = j["block_counts"].get<std::vector<int>>();
      if (counts.size() != 3) throw BadInput("block_counts must have 3 entries");
      c.block_counts = {counts[0], counts[1], counts[2]};
    }
    if (j.contains("reduction_a")) {
      const json& ra = j["reduction_a"];
      c.reduction_a = {ra.at("k").get<int>(), ra.at("l").get<int>(), ra.at("m").get<int>(),
                       ra.at("n").get<int>()};
    }
    if (j.contains("dropout_keep")) c.dropout_keep = j["dropout_keep"].get<double>();
    if (j.contains("input_size")) {
      auto sz = j["input_size"].get<std::vector<int>>();
      if (sz.size() != 2) throw BadInput("input_size must be [H, W]");
      c.input_h = sz[0];
      c.input_w = sz[1];
    }
    check_config(c);
    return c;
  } catch (const json::exception& e) {
    throw BadInput(std::string("arch config structure error: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

// Appends nodes to a GraphSpec while tracking shapes incrementally, so
// builders can size the filter-expansion convolutions from the shortcut.
class Builder {
 public:
  std::string add(NodeSpec node) {
    std::vector<Shape> ins;
    ins.reserve(node.inputs.size());
    for (const auto& i : node.inputs) ins.push_back(shapes_.at(i));
    Shape out = infer_node_shape(node, ins, graph_.input_shape);
    if (!shapes_.emplace(node.id, out).second)
      throw Error("builder: duplicate node id " + node.id);
    graph_.nodes.push_back(std::move(node));
    return graph_.nodes.back().id;
  }

  std::string add_input(Shape s) {
    graph_.input_shape = s;
    return add(NodeSpec{"input", NodeKind::Input, std::monostate{}, {}});
  }

  const Shape& shape(const std::string& id) const { return shapes_.at(id); }

  GraphSpec finish(std::string output_id) {
    graph_.output_id = std::move(output_id);
    return std::move(graph_);
  }

 private:
  GraphSpec graph_;
  ShapeMap shapes_;
};

int resolve_filters(const StepDef& step, const ReductionAParams* ra) {
  if (step.symbol.empty()) return step.filters;
  if (ra == nullptr) throw BadInput("definition: filter symbol outside reduction_a");
  if (step.symbol == "k") return ra->k;
  if (step.symbol == "l") return ra->l;
  if (step.symbol == "m") return ra->m;
  return ra->n;
}

// Conv nodes carry no fused activation in built graphs; each definition
// conv becomes Conv -> BatchNorm -> ReLU. The filter-expansion conv is the
// exception and is emitted bare.
std::string emit_conv_bn_relu(Builder& b, const std::string& base, const std::string& input,
                              const StepDef& step, int filters) {
  ConvSpec spec;
  spec.kernel_h = step.kernel_h;
  spec.kernel_w = step.kernel_w;
  spec.stride_h = step.stride;
  spec.stride_w = step.stride;
  spec.padding = step.padding;
  spec.out_channels = filters;
  spec.activation = Activation::None;
  b.add(NodeSpec{base, NodeKind::Conv, spec, {input}});
  b.add(NodeSpec{base + "/bn", NodeKind::BatchNorm, BatchNormNodeParams{}, {base}});
  return b.add(NodeSpec{base + "/relu", NodeKind::ReLU, std::monostate{}, {base + "/bn"}});
}

std::string emit_steps(Builder& b, const std::string& prefix, std::string current,
                       const std::vector<StepDef>& steps, double width,
                       const ReductionAParams* ra) {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const StepDef& step = steps[i];
    std::string base = prefix + "/" + std::to_string(i);
    switch (step.op) {
      case StepDef::Op::Conv:
        current = emit_conv_bn_relu(b, base, current, step,
                                    scale_filters(resolve_filters(step, ra), width));
        break;
      case StepDef::Op::MaxPool:
      case StepDef::Op::AvgPool: {
        PoolSpec spec;
        spec.mode = step.op == StepDef::Op::MaxPool ? PoolMode::Max : PoolMode::Avg;
        spec.kernel_h = step.kernel_h;
        spec.kernel_w = step.kernel_w;
        spec.stride_h = step.stride;
        spec.stride_w = step.stride;
        spec.padding = step.padding;
        current = b.add(NodeSpec{base, step.op == StepDef::Op::MaxPool ? NodeKind::MaxPool
                                                                       : NodeKind::AvgPool,
                                 spec, {current}});
        break;
      }
      case StepDef::Op::Split: {
        std::vector<std::string> outs;
        for (std::size_t j = 0; j < step.branches.size(); ++j)
          outs.push_back(emit_steps(b, base + "/b" + std::to_string(j), current,
                                    step.branches[j], width, ra));
        current = b.add(NodeSpec{base + "/cat", NodeKind::Concat, std::monostate{}, outs});
        break;
      }
    }
  }
  return current;
}

std::string emit_block(Builder& b, const std::string& prefix, const std::string& input,
                       const BlockDef& def, double width, const ReductionAParams* ra,
                       bool residual, double alpha) {
  std::vector<std::string> outs;
  for (std::size_t j = 0; j < def.branches.size(); ++j)
    outs.push_back(emit_steps(b, prefix + "/b" + std::to_string(j), input, def.branches[j],
                              width, ra));
  std::string merged = b.add(NodeSpec{prefix + "/cat", NodeKind::Concat, std::monostate{}, outs});
  if (!residual) return merged;

  // Filter expansion: 1x1 conv without activation or normalization, sized
  // so the residual matches the shortcut depth.
  ConvSpec expand;
  expand.out_channels = static_cast<int>(b.shape(input).c());
  expand.activation = Activation::None;
  std::string expanded = b.add(NodeSpec{prefix + "/expand", NodeKind::Conv, expand, {merged}});
  std::string sum = b.add(NodeSpec{prefix + "/add", NodeKind::ResidualAdd,
                                   ResidualAddParams{alpha}, {input, expanded}});
  return b.add(NodeSpec{prefix + "/out", NodeKind::ReLU, std::monostate{}, {sum}});
}

// Inputs below 149 px run the stem's first reducing conv at stride 1; the
// rest of the stem and everything above it are untouched.
std::vector<StepDef> stem_for_input(const ArchDefinition& def, int input_h) {
  std::vector<StepDef> steps = def.stem;
  if (input_h < 149) {
    for (auto& step : steps) {
      if (step.op == StepDef::Op::Conv && step.stride == 2) {
        step.stride = 1;
        break;
      }
    }
  }
  return steps;
}

int chain_channels(const std::vector<StepDef>& steps, int in_c, double width,
                   const ReductionAParams* ra);

int split_channels(const std::vector<std::vector<StepDef>>& branches, int in_c, double width,
                   const ReductionAParams* ra) {
  int total = 0;
  for (const auto& branch : branches) total += chain_channels(branch, in_c, width, ra);
  return total;
}

int chain_channels(const std::vector<StepDef>& steps, int in_c, double width,
                   const ReductionAParams* ra) {
  int c = in_c;
  for (const StepDef& step : steps) {
    switch (step.op) {
      case StepDef::Op::Conv:
        c = scale_filters(resolve_filters(step, ra), width);
        break;
      case StepDef::Op::Split:
        c = split_channels(step.branches, c, width, ra);
        break;
      default:
        break;  // pooling keeps channels
    }
  }
  return c;
}

struct StageChannels {
  int a_in, a_out, b_in, b_out, c_in, c_out;
};

StageChannels stage_channels(const ArchDefinition& def, const ReductionAParams& ra,
                             double width) {
  StageChannels s{};
  s.a_in = chain_channels(def.stem, 3, width, nullptr);
  s.a_out = def.residual ? s.a_in : split_channels(def.block_a.branches, s.a_in, width, nullptr);
  s.b_in = split_channels(def.reduction_a.branches, s.a_out, width, &ra);
  s.b_out = def.residual ? s.b_in : split_channels(def.block_b.branches, s.b_in, width, nullptr);
  s.c_in = split_channels(def.reduction_b.branches, s.b_out, width, nullptr);
  s.c_out = def.residual ? s.c_in : split_channels(def.block_c.branches, s.c_in, width, nullptr);
  return s;
}

GraphSpec assemble_impl(const ArchConfig& config, bool force_residual) {
  check_config(config);
  const ArchDefinition& def = load_definition(config.variant);
  const bool residual = def.residual || force_residual;
  const double width = config.width_multiplier;

  Builder b;
  b.add_input(Shape::nhwc(1, config.input_h, config.input_w, 3));
  std::string cur = emit_steps(b, "stem", "input", stem_for_input(def, config.input_h), width,
                               nullptr);
  for (int i = 0; i < config.block_counts[0]; ++i)
    cur = emit_block(b, "a" + std::to_string(i + 1), cur, def.block_a, width, nullptr, residual,
                     config.residual_scale);
  cur = emit_block(b, "reduction_a", cur, def.reduction_a, width, &config.reduction_a, false, 0);
  for (int i = 0; i < config.block_counts[1]; ++i)
    cur = emit_block(b, "b" + std::to_string(i + 1), cur, def.block_b, width, nullptr, residual,
                     config.residual_scale);
  cur = emit_block(b, "reduction_b", cur, def.reduction_b, width, nullptr, false, 0);
  for (int i = 0; i < config.block_counts[2]; ++i)
    cur = emit_block(b, "c" + std::to_string(i + 1), cur, def.block_c, width, nullptr, residual,
                     config.residual_scale);

  cur = b.add(NodeSpec{"head/gap", NodeKind::GlobalAvgPool, std::monostate{}, {cur}});
  cur = b.add(NodeSpec{"head/dropout", NodeKind::Dropout, DropoutParams{config.dropout_keep},
                       {cur}});
  cur = b.add(NodeSpec{"head/fc", NodeKind::FullyConnected,
                       FullyConnectedParams{config.num_classes}, {cur}});
  cur = b.add(NodeSpec{"head/softmax", NodeKind::Softmax, std::monostate{}, {cur}});
  GraphSpec g = b.finish(cur);

  auto violations = validate(g, residual ? Ruleset::InceptionResNet : Ruleset::Generic);
  if (!violations.empty())
    throw Error("assemble: built an invalid graph: " + violations.front().node_id + ": " +
                violations.front().message);
  return g;
}

}  // namespace

GraphSpec build_stem(Variant v, double width, int input_h, int input_w) {
  const ArchDefinition& def = load_definition(v);
  Builder b;
  b.add_input(Shape::nhwc(1, input_h, input_w, 3));
  std::string out = emit_steps(b, "stem", "input", stem_for_input(def, input_h), width, nullptr);
  return b.finish(out);
}

GraphSpec build_inception_block(Variant v, GridStage stage, double width, double residual_scale) {
  const ArchDefinition& def = load_definition(v);
  StageChannels ch = stage_channels(def, def.default_reduction_a, width);
  int grid = stage == GridStage::A35 ? 35 : stage == GridStage::B17 ? 17 : 8;
  int in_c = stage == GridStage::A35 ? ch.a_in : stage == GridStage::B17 ? ch.b_in : ch.c_in;
  const BlockDef& block = stage == GridStage::A35   ? def.block_a
                          : stage == GridStage::B17 ? def.block_b
                                                    : def.block_c;
  Builder b;
  b.add_input(Shape::nhwc(1, grid, grid, in_c));
  std::string out = emit_block(b, "block", "input", block, width, nullptr, def.residual,
                               residual_scale);
  return b.finish(out);
}

GraphSpec build_reduction_a(Variant v, const ReductionAParams& params, double width) {
  const ArchDefinition& def = load_definition(v);
  StageChannels ch = stage_channels(def, def.default_reduction_a, width);
  Builder b;
  b.add_input(Shape::nhwc(1, 35, 35, ch.a_out));
  std::string out = emit_block(b, "reduction_a", "input", def.reduction_a, width, &params, false,
                               0);
  return b.finish(out);
}

GraphSpec build_reduction_b(Variant v, double width) {
  const ArchDefinition& def = load_definition(v);
  StageChannels ch = stage_channels(def, def.default_reduction_a, width);
  Builder b;
  b.add_input(Shape::nhwc(1, 17, 17, ch.b_out));
  std::string out = emit_block(b, "reduction_b", "input", def.reduction_b, width, nullptr, false,
                               0);
  return b.finish(out);
}

GraphSpec assemble(const ArchConfig& config) { return assemble_impl(config, false); }

GraphSpec assemble_residualized_pure(const ArchConfig& config) {
  if (config.variant != Variant::InceptionV4)
    throw BadInput("assemble_residualized_pure expects the pure variant");
  return assemble_impl(config, true);
}

GraphSpec residualize(const GraphSpec& fragment, double alpha) {
  const NodeSpec& out = fragment.node(fragment.output_id);
  if (out.kind != NodeKind::Concat)
    throw BadInput("residualize: fragment must end in a Concat merge, found " +
                   to_string(out.kind));
  std::string input_id;
  for (const auto& n : fragment.nodes)
    if (n.kind == NodeKind::Input) input_id = n.id;
  if (input_id.empty()) throw BadInput("residualize: fragment has no Input node");

  ShapeMap shapes = infer_shapes(fragment);
  const Shape& in_shape = shapes.at(input_id);
  const Shape& out_shape = shapes.at(fragment.output_id);
  if (in_shape.n() != out_shape.n() || in_shape.h() != out_shape.h() ||
      in_shape.w() != out_shape.w())
    throw BadInput("residualize: fragment changes grid size (" + in_shape.str() + " -> " +
                   out_shape.str() + "); reduction modules cannot be residualized");

  GraphSpec g = fragment;
  ConvSpec expand;
  expand.out_channels = static_cast<int>(in_shape.c());
  expand.activation = Activation::None;
  std::string base = fragment.output_id;
  g.nodes.push_back(NodeSpec{base + "/expand", NodeKind::Conv, expand, {fragment.output_id}});
  g.nodes.push_back(NodeSpec{base + "/add", NodeKind::ResidualAdd, ResidualAddParams{alpha},
                             {input_id, base + "/expand"}});
  g.nodes.push_back(NodeSpec{base + "/out", NodeKind::ReLU, std::monostate{}, {base + "/add"}});
  g.output_id = base + "/out";
  return g;
}

}  // namespace incepkit::zoo
