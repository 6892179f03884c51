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
// incepkit command line: build/check/summarize graphs, run inference and
// training, finite-difference gradient checks, and the paired desk-scale
// experiments.
//
// Exit codes: 0 success, 1 assertion/violation, 2 bad input, 3 numeric
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "incepkit/gradcheck.hpp"
#include "incepkit/train.hpp"
#include "incepkit/zoo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace incepkit;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BadInput("cannot open: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw BadInput("cannot write: " + path);
  os << content;
}

GraphSpec load_graph(const std::string& path) { return graph_from_json(read_file(path)); }

// Depth: number of Conv/FullyConnected layers on the longest input->output
// path.
std::int64_t layer_depth(const GraphSpec& g) {
  std::map<std::string, std::int64_t> depth;
  for (std::int64_t idx : topo_order(g)) {
    const NodeSpec& n = g.nodes[static_cast<std::size_t>(idx)];
    std::int64_t d = 0;
    for (const auto& in : n.inputs) d = std::max(d, depth.at(in));
    if (n.kind == NodeKind::Conv || n.kind == NodeKind::FullyConnected) ++d;
    depth[n.id] = d;
  }
  return depth.at(g.output_id);
}

std::string pre_pool_shape(const GraphSpec& g, const ShapeMap& shapes) {
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::GlobalAvgPool) return shapes.at(n.inputs[0]).str();
  return shapes.at(g.output_id).str();
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

struct BuildFlags {
  std::string arch;
  std::string config_path;
  double width = 0.0;  // 0 = keep config/default
  int classes = 0;
  int input_size = 0;
  double residual_scale = -1.0;
  std::string out_path;
  std::string dot_path;
  bool residualized_pure = false;
};

zoo::ArchConfig resolve_arch_config(const BuildFlags& f) {
  zoo::ArchConfig cfg;
  if (!f.config_path.empty())
    cfg = zoo::arch_config_from_json(read_file(f.config_path));
  else if (!f.arch.empty())
    cfg = zoo::ArchConfig::defaults(zoo::variant_from_string(f.arch));
  else
    throw BadInput("build: pass --arch or --config");
  if (!f.arch.empty() && !f.config_path.empty() &&
      zoo::variant_from_string(f.arch) != cfg.variant)
    throw BadInput("build: --arch disagrees with --config variant");
  if (f.width > 0.0) cfg.width_multiplier = f.width;
  if (f.classes > 0) cfg.num_classes = f.classes;
  if (f.input_size > 0) cfg.input_h = cfg.input_w = f.input_size;
  if (f.residual_scale >= 0.0) cfg.residual_scale = f.residual_scale;
  return cfg;
}

int cmd_build(const BuildFlags& f) {
  zoo::ArchConfig cfg = resolve_arch_config(f);
  GraphSpec g = f.residualized_pure ? zoo::assemble_residualized_pure(cfg) : zoo::assemble(cfg);
  write_file(f.out_path, graph_to_json(g));
  ShapeMap shapes = infer_shapes(g);
  if (!f.dot_path.empty()) write_file(f.dot_path, export_dot(g, &shapes));
  ParamCounts params = count_params(g);
  FlopCounts flops = count_flops(g);
  std::printf("%s: nodes=%zu depth=%lld params=%lld macs=%lld pre_pool=%s -> %s\n",
              zoo::to_string(cfg.variant).c_str(), g.nodes.size(),
              static_cast<long long>(layer_depth(g)), static_cast<long long>(params.trainable),
              static_cast<long long>(flops.macs), pre_pool_shape(g, shapes).c_str(),
              f.out_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

int cmd_check(const std::string& graph_path, const std::string& ruleset_name) {
  GraphSpec g = load_graph(graph_path);
  Ruleset ruleset = ruleset_name == "generic" ? Ruleset::Generic : Ruleset::InceptionResNet;
  auto violations = validate(g, ruleset);
  for (const auto& v : violations)
    std::printf("violation [%s] %s: %s\n", v.rule.c_str(), v.node_id.c_str(), v.message.c_str());
  if (violations.empty()) {
    std::printf("ok: %zu nodes, no violations\n", g.nodes.size());
    return 0;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

int cmd_summarize(const std::string& graph_path, bool per_node) {
  GraphSpec g = load_graph(graph_path);
  ShapeMap shapes = infer_shapes(g);
  ParamCounts params = count_params(g);
  FlopCounts flops = count_flops(g);
  std::map<std::string, std::int64_t> node_params, node_macs;
  for (const auto& row : params.per_node) node_params[row.id] = row.value;
  for (const auto& row : flops.per_node_macs) node_macs[row.id] = row.value;
  if (per_node) {
    std::printf("%-28s %-14s %-16s %14s %16s\n", "node", "kind", "shape", "params", "macs");
    for (std::int64_t idx : topo_order(g)) {
      const NodeSpec& n = g.nodes[static_cast<std::size_t>(idx)];
      std::printf("%-28s %-14s %-16s %14lld %16lld\n", n.id.c_str(), to_string(n.kind).c_str(),
                  shapes.at(n.id).str().c_str(),
                  static_cast<long long>(node_params.count(n.id) ? node_params[n.id] : 0),
                  static_cast<long long>(node_macs.count(n.id) ? node_macs[n.id] : 0));
    }
  }
  std::printf("totals: params=%lld non_trainable=%lld macs=%lld elementwise=%lld\n",
              static_cast<long long>(params.trainable),
              static_cast<long long>(params.non_trainable), static_cast<long long>(flops.macs),
              static_cast<long long>(flops.elementwise));
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

std::string ema_manifest_path(const std::string& manifest_path) {
  fs::path p(manifest_path);
  fs::path alt = p.parent_path() / (p.stem().string() + "_ema" + p.extension().string());
  return alt.string();
}

template <typename T>
int run_infer(const GraphSpec& g, const std::string& manifest, const std::string& input_path,
              int topk) {
  ParamStore<T> weights = train::load_checkpoint<T>(manifest);
  TensorT<T> input = load_tbin_as<T>(input_path);
  Executor<T> exec(g);
  exec.forward(weights, input, Mode::Infer);
  const TensorT<T>& out = exec.activation(g.output_id);
  TensorT<T> probs = g.node(g.output_id).kind == NodeKind::Softmax ? out : softmax(out);
  const std::int64_t classes = probs.shape[1];
  const std::int64_t k = std::min<std::int64_t>(topk, classes);
  for (std::int64_t row = 0; row < probs.shape[0]; ++row) {
    const T* p = probs.data.data() + row * classes;
    std::vector<std::int64_t> order(static_cast<std::size_t>(classes));
    for (std::int64_t i = 0; i < classes; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) { return p[a] > p[b]; });
    std::printf("row %lld:", static_cast<long long>(row));
    for (std::int64_t i = 0; i < k; ++i)
      std::printf(" %lld:%.6f", static_cast<long long>(order[static_cast<std::size_t>(i)]),
                  static_cast<double>(p[order[static_cast<std::size_t>(i)]]));
    std::printf("\n");
  }
  return 0;
}

int cmd_infer(const std::string& graph_path, const std::string& manifest_path,
              const std::string& input_path, bool use_ema, int topk) {
  GraphSpec g = load_graph(graph_path);
  std::string manifest = use_ema ? ema_manifest_path(manifest_path) : manifest_path;
  if (train::checkpoint_dtype(manifest) == DType::Float64)
    return run_infer<double>(g, manifest, input_path, topk);
  return run_infer<float>(g, manifest, input_path, topk);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct DataParams {
  int samples_per_class = 64;
  int image_size = 75;
  std::uint64_t seed = 123;
};

struct TrainJob {
  zoo::ArchConfig arch;
  train::TrainConfig config;
  DataParams data;
  std::int64_t max_steps = 0;
  int eval_topk = 5;
  bool float64 = false;
  bool residualized_pure = false;
};

train::TrainConfig train_config_from_json(const json& j) {
  train::TrainConfig c;
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    std::string kind = o.value("kind", "rmsprop");
    if (kind == "rmsprop")
      c.optimizer.kind = train::OptimizerConfig::Kind::RMSProp;
    else if (kind == "momentum")
      c.optimizer.kind = train::OptimizerConfig::Kind::Momentum;
    else
      throw BadInput("train config: unknown optimizer kind " + kind);
    c.optimizer.decay = o.value("decay", 0.9);
    c.optimizer.epsilon = o.value("epsilon", 1.0);
    c.optimizer.momentum = o.value("momentum", 0.9);
  }
  c.base_lr = j.value("base_lr", 0.045);
  c.lr_decay_rate = j.value("lr_decay_rate", 0.94);
  c.lr_decay_epochs = j.value("lr_decay_epochs", 2);
  c.batch_size = j.value("batch_size", 32);
  c.epochs = j.value("epochs", 1);
  c.ema_decay = j.value("ema_decay", 0.9999);
  c.seed = j.value("seed", 1);
  if (j.contains("residual_scale")) c.residual_scale = j["residual_scale"].get<double>();
  return c;
}

json train_config_to_json(const train::TrainConfig& c) {
  json o;
  o["kind"] = c.optimizer.kind == train::OptimizerConfig::Kind::RMSProp ? "rmsprop" : "momentum";
  o["decay"] = c.optimizer.decay;
  o["epsilon"] = c.optimizer.epsilon;
  o["momentum"] = c.optimizer.momentum;
  json j;
  j["optimizer"] = o;
  j["base_lr"] = c.base_lr;
  j["lr_decay_rate"] = c.lr_decay_rate;
  j["lr_decay_epochs"] = c.lr_decay_epochs;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["ema_decay"] = c.ema_decay;
  j["seed"] = c.seed;
  if (c.residual_scale) j["residual_scale"] = *c.residual_scale;
  return j;
}

TrainJob train_job_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw BadInput(std::string("train config parse error: ") + e.what());
  }
  try {
    TrainJob job;
    job.arch = zoo::arch_config_from_json(j.at("arch").dump());
    if (j.contains("train")) job.config = train_config_from_json(j["train"]);
    if (j.contains("data")) {
      const json& d = j["data"];
      job.data.samples_per_class = d.value("samples_per_class", 64);
      job.data.image_size = d.value("image_size", 75);
      job.data.seed = d.value("seed", 123);
    }
    job.max_steps = j.value("max_steps", 0);
    job.eval_topk = j.value("eval_topk", 5);
    job.float64 = j.value("float64", false);
    job.residualized_pure = j.value("residualized_pure", false);
    return job;
  } catch (const json::exception& e) {
    throw BadInput(std::string("train config structure error: ") + e.what());
  }
}

template <typename T>
train::RunReport run_train_job(const TrainJob& job, const std::string& out_dir) {
  zoo::ArchConfig arch = job.arch;
  arch.input_h = arch.input_w = job.data.image_size;
  if (job.config.residual_scale) arch.residual_scale = *job.config.residual_scale;
  GraphSpec graph =
      job.residualized_pure ? zoo::assemble_residualized_pure(arch) : zoo::assemble(arch);

  auto dataset = train::synthetic_dataset<T>(arch.num_classes, job.data.samples_per_class,
                                             job.data.image_size, job.data.seed);
  ParamStore<T> init = init_params<T>(graph, job.config.seed);
  auto result = train::train(graph, std::move(init), dataset, job.config, job.max_steps);

  fs::create_directories(out_dir);
  write_file(out_dir + "/report.csv", train::report_to_csv(result.report));
  train::save_checkpoint(out_dir + "/checkpoint", "manifest.json", "", graph, result.weights);
  train::save_checkpoint(out_dir + "/checkpoint", "manifest_ema.json", "_ema", graph,
                         result.ema_weights);

  json sidecar;
  sidecar["arch"] = json::parse(zoo::arch_config_to_json(arch));
  sidecar["train"] = train_config_to_json(job.config);
  sidecar["data"] = json{{"samples_per_class", job.data.samples_per_class},
                     {"image_size", job.data.image_size},
                     {"seed", job.data.seed}};
  sidecar["max_steps"] = job.max_steps;
  sidecar["float64"] = job.float64;
  sidecar["residualized_pure"] = job.residualized_pure;
  sidecar["init_scheme"] = result.report.init_scheme;
  sidecar["steps_run"] = result.report.rows.empty() ? 0 : result.report.rows.back().step;
  sidecar["final"] = json{{"top1_error", result.report.final_top1_error},
                      {"topk_error", result.report.final_topk_error},
                      {"k", result.report.topk}};
  sidecar["dead_network"] = result.report.dead_network;
  write_file(out_dir + "/report.json", sidecar.dump(2) + "\n");
  return result.report;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  TrainJob job = train_job_from_json(read_file(config_path));
  train::RunReport report =
      job.float64 ? run_train_job<double>(job, out_dir) : run_train_job<float>(job, out_dir);
  std::printf("trained %lld steps, final top-1 error %.4f, top-%d error %.4f%s -> %s\n",
              static_cast<long long>(report.rows.empty() ? 0 : report.rows.back().step),
              report.final_top1_error, report.topk, report.final_topk_error,
              report.dead_network ? " (dead network)" : "", out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& graph_path, bool all_ops, double tolerance, double step,
                  std::uint64_t seed, int instances, std::int64_t max_coords, bool corrupt) {
  bool ok = true;
  if (all_ops) {
    auto results = run_op_gradchecks(seed, instances, step, corrupt);
    for (const auto& r : results) {
      bool pass = r.worst_rel_err <= tolerance;
      if (!pass) ok = false;
      std::printf("%-28s worst_rel_err=%.3e at coord %lld %s\n", r.op.c_str(), r.worst_rel_err,
                  static_cast<long long>(r.worst_coord), pass ? "ok" : "FAIL");
    }
  } else {
    GraphSpec g = load_graph(graph_path);
    auto results = graph_gradcheck(g, seed, step, max_coords);
    for (const auto& r : results) {
      bool pass = r.worst_rel_err <= tolerance;
      if (!pass) ok = false;
      std::printf("%-36s coords=%lld worst_rel_err=%.3e at %lld %s\n", r.param.c_str(),
                  static_cast<long long>(r.checked_coords), r.worst_rel_err,
                  static_cast<long long>(r.worst_coord), pass ? "ok" : "FAIL");
    }
  }
  std::printf(ok ? "gradcheck ok (tolerance %.3e)\n" : "gradcheck FAILED (tolerance %.3e)\n",
              tolerance);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

struct ExperimentFlags {
  std::string out_dir;
  double width = 0.25;
  int image_size = 75;
  int classes = 10;
  int per_class = 64;
  int batch = 32;
  std::int64_t steps = 600;
  double threshold = 0.10;
  std::uint64_t seed = 7;
  double scale = 0.1;
};

TrainJob experiment_job(const ExperimentFlags& f, zoo::Variant variant, bool residualized,
                        double residual_scale, double width) {
  TrainJob job;
  job.arch = zoo::ArchConfig::defaults(variant);
  job.arch.num_classes = f.classes;
  job.arch.width_multiplier = width;
  job.arch.residual_scale = residual_scale;
  job.arch.input_h = job.arch.input_w = f.image_size;
  job.config.batch_size = f.batch;
  job.config.seed = f.seed;
  const std::int64_t samples = static_cast<std::int64_t>(f.classes) * f.per_class;
  job.config.epochs = static_cast<int>((f.steps * f.batch + samples - 1) / samples + 1);
  job.data.samples_per_class = f.per_class;
  job.data.image_size = f.image_size;
  job.data.seed = f.seed + 1000;
  job.max_steps = f.steps;
  job.residualized_pure = residualized;
  return job;
}

// First step whose trailing-window mean batch top-1 error drops below the
// threshold; -1 when never reached.
std::int64_t steps_to_threshold(const train::RunReport& report, double threshold, int window) {
  double sum = 0.0;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    sum += report.rows[i].top1;
    if (i >= static_cast<std::size_t>(window)) sum -= report.rows[i - window].top1;
    const int have = std::min<int>(window, static_cast<int>(i) + 1);
    if (have == window && sum / have < threshold) return report.rows[i].step;
  }
  return -1;
}

int cmd_experiment_residual_vs_plain(const ExperimentFlags& f) {
  fs::create_directories(f.out_dir);
  constexpr int kWindow = 20;

  TrainJob plain = experiment_job(f, zoo::Variant::InceptionV4, false, 1.0, f.width);
  TrainJob residual = experiment_job(f, zoo::Variant::InceptionV4, true, f.scale, f.width);

  std::printf("training plain variant (%lld steps)...\n", static_cast<long long>(f.steps));
  train::RunReport plain_report = run_train_job<float>(plain, f.out_dir + "/plain");
  std::printf("training residualized variant (%lld steps)...\n",
              static_cast<long long>(f.steps));
  train::RunReport residual_report = run_train_job<float>(residual, f.out_dir + "/residual");

  write_file(f.out_dir + "/plain.csv", train::report_to_csv(plain_report));
  write_file(f.out_dir + "/residual.csv", train::report_to_csv(residual_report));

  const std::int64_t sp = steps_to_threshold(plain_report, f.threshold, kWindow);
  const std::int64_t sr = steps_to_threshold(residual_report, f.threshold, kWindow);
  json summary;
  summary["threshold"] = f.threshold;
  summary["window"] = kWindow;
  summary["steps"] = f.steps;
  summary["width"] = f.width;
  summary["residual_scale"] = f.scale;
  summary["plain"] = json{{"steps_to_threshold", sp},
                      {"final_top1_error", plain_report.final_top1_error},
                      {"dead_network", plain_report.dead_network}};
  summary["residual"] = json{{"steps_to_threshold", sr},
                         {"final_top1_error", residual_report.final_top1_error},
                         {"dead_network", residual_report.dead_network}};
  // The direction is recorded, not asserted: desk scale need not preserve it.
  summary["faster"] = (sr >= 0 && (sp < 0 || sr < sp))   ? "residual"
                      : (sp >= 0 && (sr < 0 || sp < sr)) ? "plain"
                                                         : "tie_or_neither";
  write_file(f.out_dir + "/summary.json", summary.dump(2) + "\n");
  std::printf("steps to %.0f%% threshold: plain=%lld residual=%lld -> %s\n", f.threshold * 100,
              static_cast<long long>(sp), static_cast<long long>(sr),
              summary["faster"].get<std::string>().c_str());
  return 0;
}

int cmd_experiment_scaling_sweep(const ExperimentFlags& f, const std::vector<double>& scales,
                                 const std::vector<double>& widths) {
  fs::create_directories(f.out_dir);
  std::string runs_csv = "scale,width,dead_network,final_loss,final_top1,steps\n";
  json summary = json::array();
  for (double width : widths) {
    for (double scale : scales) {
      TrainJob job = experiment_job(f, zoo::Variant::InceptionResNetV2, false, scale, width);
      char name[64];
      std::snprintf(name, sizeof(name), "run_s%.2f_w%.3f", scale, width);
      std::printf("training %s (%lld steps)...\n", name, static_cast<long long>(f.steps));
      train::RunReport report = run_train_job<float>(job, f.out_dir + "/" + name);
      const double final_loss = report.rows.empty() ? 0.0 : report.rows.back().loss;
      char line[256];
      std::snprintf(line, sizeof(line), "%.2f,%.3f,%d,%.17g,%.17g,%lld\n", scale, width,
                    report.dead_network ? 1 : 0, final_loss, report.final_top1_error,
                    static_cast<long long>(report.rows.empty() ? 0 : report.rows.back().step));
      runs_csv += line;
      summary.push_back(json{{"scale", scale},
                         {"width", width},
                         {"dead_network", report.dead_network},
                         {"final_loss", final_loss},
                         {"final_top1_error", report.final_top1_error}});
    }
  }
  write_file(f.out_dir + "/runs.csv", runs_csv);
  write_file(f.out_dir + "/summary.json", summary.dump(2) + "\n");
  std::printf("scaling sweep complete: %zu runs -> %s\n", summary.size(), f.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"incepkit: Inception-v4 / Inception-ResNet micro-framework"};
  app.require_subcommand(1);
  int exit_code = 0;

  // build
  BuildFlags bf;
  auto* build = app.add_subcommand("build", "Assemble an architecture and write its graph JSON");
  build->add_option("--arch", bf.arch, "v4 | ir1 | ir2");
  build->add_option("--config", bf.config_path, "ArchConfig JSON file");
  build->add_option("--width", bf.width, "width multiplier in (0, 1]");
  build->add_option("--classes", bf.classes, "number of classes");
  build->add_option("--input-size", bf.input_size, "square input size");
  build->add_option("--residual-scale", bf.residual_scale, "residual scaling factor");
  build->add_option("--out", bf.out_path, "output graph JSON")->required();
  build->add_option("--dot", bf.dot_path, "also write Graphviz DOT");
  build->add_flag("--residualized-pure", bf.residualized_pure,
                  "residualize the pure variant's blocks");
  build->callback([&] { exit_code = cmd_build(bf); });

  // check
  std::string check_path, check_ruleset = "inception-resnet";
  auto* check = app.add_subcommand("check", "Validate a graph JSON file");
  check->add_option("graph", check_path, "graph JSON")->required();
  check->add_option("--ruleset", check_ruleset, "generic | inception-resnet");
  check->callback([&] { exit_code = cmd_check(check_path, check_ruleset); });

  // summarize
  std::string sum_path;
  bool sum_per_node = false;
  auto* summarize = app.add_subcommand("summarize", "Shapes, parameter and MAC counts");
  summarize->add_option("graph", sum_path, "graph JSON")->required();
  summarize->add_flag("--per-node", sum_per_node, "print one row per node");
  summarize->callback([&] { exit_code = cmd_summarize(sum_path, sum_per_node); });

  // infer
  std::string inf_graph, inf_weights, inf_input;
  bool inf_ema = false;
  int inf_topk = 5;
  auto* infer = app.add_subcommand("infer", "Run inference on a TBIN tensor");
  infer->add_option("graph", inf_graph, "graph JSON")->required();
  infer->add_option("--weights", inf_weights, "checkpoint manifest JSON")->required();
  infer->add_option("--input", inf_input, "input tensor (TBIN)")->required();
  infer->add_flag("--ema", inf_ema, "use the EMA shadow weights");
  infer->add_option("--topk", inf_topk, "classes to print per row");
  infer->callback(
      [&] { exit_code = cmd_infer(inf_graph, inf_weights, inf_input, inf_ema, inf_topk); });

  // train
  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic dataset");
  train_cmd->add_option("--config", train_config, "train job JSON")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->callback([&] { exit_code = cmd_train(train_config, train_out); });

  // gradcheck
  std::string gc_graph;
  bool gc_all = false, gc_corrupt = false;
  double gc_tol = 1e-4;
  double gc_step = 1e-5;
  std::uint64_t gc_seed = 42;
  int gc_instances = 3;
  std::int64_t gc_max_coords = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--graph", gc_graph, "graph JSON to check parameter-wise");
  gradcheck->add_flag("--all-ops", gc_all, "check every kernel");
  gradcheck->add_option("--tolerance", gc_tol, "max relative error");
  gradcheck->add_option("--step", gc_step,
                        "central-difference step; deep graphs need a smaller one because "
                        "units flip inside the probe window");
  gradcheck->add_option("--seed", gc_seed, "random seed");
  gradcheck->add_option("--instances", gc_instances, "random instances per op");
  gradcheck->add_option("--max-coords", gc_max_coords,
                        "coordinates checked per parameter (0 = all)");
  gradcheck->add_flag("--corrupt", gc_corrupt, "inject an analytic-gradient error (self test)")
      ->group("");
  gradcheck->callback([&] {
    if (!gc_all && gc_graph.empty()) throw BadInput("gradcheck: pass --all-ops or --graph");
    exit_code = cmd_gradcheck(gc_graph, gc_all, gc_tol, gc_step, gc_seed, gc_instances,
                              gc_max_coords, gc_corrupt);
  });

  // experiment
  ExperimentFlags ef;
  std::vector<double> sweep_scales{1.0, 0.3, 0.1};
  std::vector<double> sweep_widths{0.25, 0.5};
  auto* experiment = app.add_subcommand("experiment", "Desk-scale paired experiments");
  experiment->require_subcommand(1);
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", ef.out_dir, "output directory")->required();
    sub->add_option("--width", ef.width, "width multiplier");
    sub->add_option("--size", ef.image_size, "square image size");
    sub->add_option("--classes", ef.classes, "synthetic classes");
    sub->add_option("--per-class", ef.per_class, "samples per class");
    sub->add_option("--batch", ef.batch, "batch size");
    sub->add_option("--steps", ef.steps, "steps per run");
    sub->add_option("--seed", ef.seed, "seed shared by the paired runs");
  };
  auto* rvp = experiment->add_subcommand("residual-vs-plain",
                                         "Pure vs residualized training on identical data");
  add_common(rvp);
  rvp->add_option("--threshold", ef.threshold, "top-1 error threshold for steps-to-threshold");
  rvp->add_option("--scale", ef.scale, "residual scaling factor for the residual arm");
  rvp->callback([&] { exit_code = cmd_experiment_residual_vs_plain(ef); });
  auto* sweep = experiment->add_subcommand(
      "scaling-sweep", "Residual-scale x width sweep recording dead-network outcomes");
  add_common(sweep);
  sweep->add_option("--scales", sweep_scales, "residual scales to sweep");
  sweep->add_option("--widths", sweep_widths, "width multipliers to sweep");
  sweep->callback(
      [&] { exit_code = cmd_experiment_scaling_sweep(ef, sweep_scales, sweep_widths); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const BadInput& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return exit_code;
}
