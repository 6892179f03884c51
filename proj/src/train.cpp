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

#include "incepkit/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace incepkit::train {

using nlohmann::json;

double lr_at(double epoch, const TrainConfig& config) {
  if (epoch < 0) throw BadInput("lr_at: epoch must be >= 0");
  double decays = std::floor(epoch / static_cast<double>(config.lr_decay_epochs));
  return config.base_lr * std::pow(config.lr_decay_rate, decays);
}

template <typename T>
void rmsprop_step(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& mean_square, T lr,
                  T decay, T epsilon) {
  if (param.shape != grad.shape || param.shape != mean_square.shape)
    throw BadInput("rmsprop_step: shape mismatch");
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const T g = grad.data[i];
    mean_square.data[i] = decay * mean_square.data[i] + (T(1) - decay) * g * g;
    param.data[i] -= lr * g / (std::sqrt(mean_square.data[i]) + epsilon);
  }
}

template <typename T>
void momentum_step(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& velocity, T lr,
                   T momentum) {
  if (param.shape != grad.shape || param.shape != velocity.shape)
    throw BadInput("momentum_step: shape mismatch");
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    velocity.data[i] = momentum * velocity.data[i] + grad.data[i];
    param.data[i] -= lr * velocity.data[i];
  }
}

template <typename T>
void ema_update(const ParamStore<T>& params, ParamStore<T>& shadow, T ema_decay) {
  if (params.size() != shadow.size()) throw BadInput("ema_update: manifest mismatch");
  auto ps = params.begin();
  auto sh = shadow.begin();
  for (; ps != params.end(); ++ps, ++sh) {
    if (ps->first != sh->first || ps->second.shape != sh->second.shape)
      throw BadInput("ema_update: manifest mismatch at " + ps->first);
    for (std::size_t i = 0; i < ps->second.data.size(); ++i)
      sh->second.data[i] = ema_decay * sh->second.data[i] +
                           (T(1) - ema_decay) * ps->second.data[i];
  }
}

template <typename T>
OptimizerState<T> make_optimizer_state(const GraphSpec& graph, const ParamStore<T>& params) {
  OptimizerState<T> state;
  for (const ParamInfo& info : parameter_manifest(graph)) {
    auto it = params.find(info.name);
    if (it == params.end()) throw BadInput("missing parameter: " + info.name);
    if (info.trainable) state.slots.emplace(info.name, TensorT<T>(it->second.shape));
  }
  state.ema = params;
  return state;
}

template <typename T>
void apply_gradients(const GraphSpec& graph, const OptimizerConfig& opt, ParamStore<T>& params,
                     const ParamStore<T>& grads, OptimizerState<T>& state, T lr) {
  for (const ParamInfo& info : parameter_manifest(graph)) {
    if (!info.trainable) continue;
    auto g = grads.find(info.name);
    if (g == grads.end()) continue;  // parameter got no gradient this step
    TensorT<T>& param = params.at(info.name);
    TensorT<T>& slot = state.slots.at(info.name);
    if (opt.kind == OptimizerConfig::Kind::RMSProp)
      rmsprop_step(param, g->second, slot, lr, static_cast<T>(opt.decay),
                   static_cast<T>(opt.epsilon));
    else
      momentum_step(param, g->second, slot, lr, static_cast<T>(opt.momentum));
  }
  ++state.step;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> Dataset<T>::gather_images(std::span<const std::int64_t> indices) const {
  const std::int64_t h = images.shape[1], w = images.shape[2], c = images.shape[3];
  const std::int64_t stride = h * w * c;
  TensorT<T> batch(Shape::nhwc(static_cast<std::int64_t>(indices.size()), h, w, c));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const T* src = images.data.data() + indices[i] * stride;
    std::copy(src, src + stride, batch.data.data() + static_cast<std::int64_t>(i) * stride);
  }
  return batch;
}

template <typename T>
std::vector<std::int32_t> Dataset<T>::gather_labels(
    std::span<const std::int64_t> indices) const {
  std::vector<std::int32_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i)
    out[i] = labels[static_cast<std::size_t>(indices[i])];
  return out;
}

template <typename T>
Dataset<T> synthetic_dataset(int num_classes, int samples_per_class, int image_size,
                             std::uint64_t seed) {
  if (num_classes < 1 || samples_per_class < 1 || image_size < 1)
    throw BadInput("synthetic_dataset: parameters must be positive");
  const std::int64_t total = static_cast<std::int64_t>(num_classes) * samples_per_class;
  Dataset<T> d;
  d.images = TensorT<T>(Shape::nhwc(total, image_size, image_size, 3));
  d.labels.resize(static_cast<std::size_t>(total));
  d.num_classes = num_classes;

  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::int64_t idx = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    // Orientation cycles through 4 angles, frequency steps every 4 classes.
    const double theta = std::numbers::pi * (cls % 4) / 4.0;
    const double cycles = 3.0 + 2.5 * (cls / 4);
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    for (int s = 0; s < samples_per_class; ++s, ++idx) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls) * 1000003ULL +
                                 static_cast<std::uint64_t>(s)));
      const double phase = rng.uniform(0.0, two_pi);
      const double amplitude = rng.uniform(0.6, 1.2);
      const double dc = rng.uniform(-0.2, 0.2);
      T* pixel = d.images.data.data() + idx * image_size * image_size * 3;
      for (int y = 0; y < image_size; ++y) {
        const double v = static_cast<double>(y) / image_size;
        for (int x = 0; x < image_size; ++x) {
          const double u = static_cast<double>(x) / image_size;
          const double t = two_pi * cycles * (u * cos_t + v * sin_t) + phase;
          for (int ch = 0; ch < 3; ++ch) {
            const double clean = amplitude * std::sin(t + ch * two_pi / 3.0) + dc;
            *pixel++ = static_cast<T>(clean + 0.25 * rng.normal());
          }
        }
      }
      d.labels[static_cast<std::size_t>(idx)] = cls;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string report_to_csv(const RunReport& report) {
  std::string out = "step,epoch,lr,loss,top1\n";
  char line[256];
  for (const auto& row : report.rows) {
    std::snprintf(line, sizeof(line), "%lld,%lld,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(row.step), static_cast<long long>(row.epoch), row.lr,
                  row.loss, row.top1);
    out += line;
  }
  return out;
}

std::vector<RunReportRow> report_rows_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "step,epoch,lr,loss,top1")
    throw BadInput("run report CSV: bad header");
  std::vector<RunReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    RunReportRow row;
    long long step = 0, epoch = 0;
    if (std::sscanf(line.c_str(), "%lld,%lld,%lg,%lg,%lg", &step, &epoch, &row.lr, &row.loss,
                    &row.top1) != 5)
      throw BadInput("run report CSV: bad row: " + line);
    row.step = step;
    row.epoch = epoch;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

// Rank of the label under descending logits with lower-index tie-break.
template <typename T>
int label_rank(const T* logits, int num_classes, std::int32_t label) {
  int rank = 0;
  const T label_logit = logits[label];
  for (int j = 0; j < num_classes; ++j) {
    if (logits[j] > label_logit || (logits[j] == label_logit && j < label)) ++rank;
  }
  return rank;
}

std::string find_gap_input(const GraphSpec& graph) {
  for (const auto& n : graph.nodes)
    if (n.kind == NodeKind::GlobalAvgPool) return n.inputs[0];
  throw BadInput("graph has no GlobalAvgPool node");
}

// Logits live on the input of the trailing Softmax when there is one.
std::string logits_node(const GraphSpec& graph) {
  const NodeSpec& out = graph.node(graph.output_id);
  return out.kind == NodeKind::Softmax ? out.inputs[0] : out.id;
}

}  // namespace

template <typename T>
EvalResult evaluate_topk(const GraphSpec& graph, ParamStore<T>& weights,
                         const Dataset<T>& dataset, int k, int batch_size) {
  if (k < 1 || k > dataset.num_classes)
    throw BadInput("evaluate_topk: k must be in [1, num_classes]");
  if (batch_size < 1) throw BadInput("evaluate_topk: batch_size must be positive");
  Executor<T> exec(graph);
  const std::string logits_id = logits_node(graph);
  std::int64_t wrong1 = 0, wrongk = 0;
  for (std::int64_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::int64_t end = std::min(dataset.size(), begin + batch_size);
    std::vector<std::int64_t> indices(static_cast<std::size_t>(end - begin));
    std::iota(indices.begin(), indices.end(), begin);
    TensorT<T> batch = dataset.gather_images(indices);
    exec.forward(weights, batch, Mode::Infer);
    const TensorT<T>& logits = exec.activation(logits_id);
    const int classes = static_cast<int>(logits.shape[1]);
    for (std::int64_t r = 0; r < end - begin; ++r) {
      const std::int32_t label = dataset.labels[static_cast<std::size_t>(begin + r)];
      int rank = label_rank(logits.data.data() + r * classes, classes, label);
      if (rank != 0) ++wrong1;
      if (rank >= k) ++wrongk;
    }
  }
  EvalResult res;
  res.top1_error = static_cast<double>(wrong1) / static_cast<double>(dataset.size());
  res.topk_error = static_cast<double>(wrongk) / static_cast<double>(dataset.size());
  return res;
}

template <typename T>
bool detect_dead_network(const GraphSpec& graph, ParamStore<T>& weights,
                         const TensorT<T>& probe_batch) {
  const std::string pre_pool = find_gap_input(graph);
  Executor<T> exec(graph);
  exec.forward(weights, probe_batch, Mode::Infer);
  const TensorT<T>& act = exec.activation(pre_pool);
  T peak = T(0);
  for (const T& v : act.data) peak = std::max(peak, static_cast<T>(std::fabs(static_cast<double>(v))));
  return static_cast<double>(peak) < 1e-12;
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

template <typename T>
TrainResult<T> train(const GraphSpec& graph, ParamStore<T> weights, const Dataset<T>& dataset,
                     const TrainConfig& config, std::int64_t max_steps) {
  if (config.batch_size < 1 || config.epochs < 1)
    throw BadInput("train: batch_size and epochs must be positive");
  if (dataset.size() < config.batch_size)
    throw BadInput("train: dataset smaller than one batch");
  if (!(config.ema_decay > 0.0 && config.ema_decay < 1.0) && config.ema_decay != 0.0)
    throw BadInput("train: ema_decay must be in [0, 1)");

  Executor<T> exec(graph);
  OptimizerState<T> state = make_optimizer_state(graph, weights);
  const std::string logits_id = logits_node(graph);
  const std::int64_t steps_per_epoch = dataset.size() / config.batch_size;

  // Fixed probe batch for the dead-network check.
  std::vector<std::int64_t> probe_idx(static_cast<std::size_t>(
      std::min<std::int64_t>(config.batch_size, dataset.size())));
  std::iota(probe_idx.begin(), probe_idx.end(), 0);
  TensorT<T> probe = dataset.gather_images(probe_idx);

  RunReport report;
  report.topk = std::min(5, dataset.num_classes);
  std::int64_t step = 0;
  bool stopped = false;
  for (int epoch = 0; epoch < config.epochs && !stopped; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(dataset.size()));
    std::iota(order.begin(), order.end(), 0);
    // Shuffle stream is decoupled from the dropout stream (offset keyspace).
    Rng shuffle_rng(mix_seed(config.seed, 0x9e3779b9ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const double lr = lr_at(static_cast<double>(epoch), config);
    for (std::int64_t bi = 0; bi < steps_per_epoch; ++bi) {
      ++step;
      std::span<const std::int64_t> idx(order.data() + bi * config.batch_size,
                                        static_cast<std::size_t>(config.batch_size));
      TensorT<T> batch = dataset.gather_images(idx);
      std::vector<std::int32_t> labels = dataset.gather_labels(idx);

      exec.forward(weights, batch, Mode::Train,
                   mix_seed(config.seed, static_cast<std::uint64_t>(step)));
      const TensorT<T>& logits = exec.activation(logits_id);
      auto xent = softmax_cross_entropy(logits, std::span<const std::int32_t>(labels));
      if (!std::isfinite(static_cast<double>(xent.loss))) {
        auto culprit = exec.first_nonfinite_node();
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           (culprit ? "; first non-finite node output: " + *culprit
                                    : "; logits are finite, loss overflowed"));
      }
      const int classes = static_cast<int>(logits.shape[1]);
      std::int64_t wrong = 0;
      for (std::int64_t r = 0; r < config.batch_size; ++r)
        if (label_rank(logits.data.data() + r * classes, classes,
                       labels[static_cast<std::size_t>(r)]) != 0)
          ++wrong;

      ParamStore<T> grads = exec.backward(weights, logits_id, xent.grad_logits);
      apply_gradients(graph, config.optimizer, weights, grads, state, static_cast<T>(lr));
      ema_update(weights, state.ema, static_cast<T>(config.ema_decay));

      report.rows.push_back(RunReportRow{step, epoch, lr, static_cast<double>(xent.loss),
                                         static_cast<double>(wrong) / config.batch_size});
      if (max_steps > 0 && step >= max_steps) {
        stopped = true;
        break;
      }
    }
    if (detect_dead_network(graph, weights, probe)) report.dead_network = true;
  }

  EvalResult eval = evaluate_topk(graph, weights, dataset, report.topk,
                                  std::max(config.batch_size, 1));
  report.final_top1_error = eval.top1_error;
  report.final_topk_error = eval.topk_error;
  return TrainResult<T>{std::move(weights), std::move(state.ema), std::move(report)};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string sanitize(const std::string& name) {
  std::string out = name;
  for (char& ch : out)
    if (ch == '/') ch = '_';
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& dir, const std::string& manifest_name,
                     const std::string& file_suffix, const GraphSpec& graph,
                     const ParamStore<T>& store) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["dtype"] = dtype_of<T>() == DType::Float32 ? "float32" : "float64";
  json params = json::object();
  for (const ParamInfo& info : parameter_manifest(graph)) {
    auto it = store.find(info.name);
    if (it == store.end()) throw BadInput("checkpoint: missing parameter " + info.name);
    std::string file = sanitize(info.name) + file_suffix + ".tbin";
    save_tbin(dir + "/" + file, it->second);
    params[info.name] = {{"file", file},
                         {"shape", it->second.shape.dims()},
                         {"role", info.role},
                         {"trainable", info.trainable}};
  }
  manifest["params"] = std::move(params);
  std::ofstream os(dir + "/" + manifest_name);
  if (!os) throw BadInput("cannot write manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

namespace {

json load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw BadInput("cannot open manifest: " + manifest_path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw BadInput("manifest " + manifest_path + ": " + e.what());
  }
}

}  // namespace

DType checkpoint_dtype(const std::string& manifest_path) {
  json manifest = load_manifest(manifest_path);
  std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype == "float32") return DType::Float32;
  if (dtype == "float64") return DType::Float64;
  throw BadInput("manifest: unknown dtype " + dtype);
}

template <typename T>
ParamStore<T> load_checkpoint(const std::string& manifest_path) {
  json manifest = load_manifest(manifest_path);
  if (checkpoint_dtype(manifest_path) != dtype_of<T>())
    throw BadInput("checkpoint dtype does not match the requested element type");
  std::string base = std::filesystem::path(manifest_path).parent_path().string();
  if (base.empty()) base = ".";
  ParamStore<T> store;
  try {
    for (const auto& [name, entry] : manifest.at("params").items()) {
      std::string file = entry.at("file").template get<std::string>();
      store.emplace(name, load_tbin_as<T>(base + "/" + file));
    }
  } catch (const json::exception& e) {
    throw BadInput("manifest " + manifest_path + ": " + e.what());
  }
  return store;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define INCEPKIT_TRAIN_INSTANTIATE(T)                                                           \
  template void rmsprop_step<T>(TensorT<T>&, const TensorT<T>&, TensorT<T>&, T, T, T);          \
  template void momentum_step<T>(TensorT<T>&, const TensorT<T>&, TensorT<T>&, T, T);            \
  template void ema_update<T>(const ParamStore<T>&, ParamStore<T>&, T);                         \
  template OptimizerState<T> make_optimizer_state<T>(const GraphSpec&, const ParamStore<T>&);   \
  template void apply_gradients<T>(const GraphSpec&, const OptimizerConfig&, ParamStore<T>&,    \
                                   const ParamStore<T>&, OptimizerState<T>&, T);                \
  template struct Dataset<T>;                                                                   \
  template Dataset<T> synthetic_dataset<T>(int, int, int, std::uint64_t);                       \
  template EvalResult evaluate_topk<T>(const GraphSpec&, ParamStore<T>&, const Dataset<T>&,     \
                                       int, int);                                              \
  template bool detect_dead_network<T>(const GraphSpec&, ParamStore<T>&, const TensorT<T>&);    \
  template TrainResult<T> train<T>(const GraphSpec&, ParamStore<T>, const Dataset<T>&,          \
                                   const TrainConfig&, std::int64_t);                           \
  template void save_checkpoint<T>(const std::string&, const std::string&, const std::string&,  \
                                   const GraphSpec&, const ParamStore<T>&);                     \
  template ParamStore<T> load_checkpoint<T>(const std::string&);

INCEPKIT_TRAIN_INSTANTIATE(float)
INCEPKIT_TRAIN_INSTANTIATE(double)

#undef INCEPKIT_TRAIN_INSTANTIATE

}  // namespace incepkit::train
