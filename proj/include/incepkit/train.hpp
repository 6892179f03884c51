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
// Training loop: RMSProp / classical momentum, exponential learning-rate
// schedule, parameter EMA for evaluation, single-crop top-k evaluation and
// a deterministic synthetic dataset for desk-scale experiments.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "incepkit/executor.hpp"

namespace incepkit::train {

struct OptimizerConfig {
  enum class Kind { RMSProp, Momentum };
  Kind kind = Kind::RMSProp;
  double decay = 0.9;     // RMSProp second-moment decay
  double epsilon = 1.0;   // RMSProp, added outside the square root
  double momentum = 0.9;  // velocity decay for the momentum optimizer
};

struct TrainConfig {
  OptimizerConfig optimizer;
  double base_lr = 0.045;
  double lr_decay_rate = 0.94;
  int lr_decay_epochs = 2;
  int batch_size = 32;
  int epochs = 1;
  double ema_decay = 0.9999;
  std::uint64_t seed = 1;
  // Overrides ArchConfig::residual_scale when building the model for a run.
  std::optional<double> residual_scale;
};

// base_lr * lr_decay_rate^floor(epoch / lr_decay_epochs); piecewise
// constant with jumps exactly at multiples of lr_decay_epochs.
double lr_at(double epoch, const TrainConfig& config);

// ms <- decay*ms + (1-decay)*grad^2;  param <- param - lr*grad/(sqrt(ms)+eps)
template <typename T>
void rmsprop_step(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& mean_square, T lr,
                  T decay, T epsilon);

// v <- momentum*v + grad;  param <- param - lr*v   (classical momentum)
template <typename T>
void momentum_step(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& velocity, T lr,
                   T momentum);

// shadow <- ema_decay*shadow + (1-ema_decay)*params, elementwise over the
// whole manifest. Throws BadInput when the manifests disagree.
template <typename T>
void ema_update(const ParamStore<T>& params, ParamStore<T>& shadow, T ema_decay);

template <typename T>
struct OptimizerState {
  ParamStore<T> slots;  // second moments (RMSProp) or velocities (momentum)
  ParamStore<T> ema;    // shadow parameters, start equal to the initial ones
  std::int64_t step = 0;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const GraphSpec& graph, const ParamStore<T>& params);

// One optimizer step over every trainable parameter (running stats are
// left to the forward pass).
template <typename T>
void apply_gradients(const GraphSpec& graph, const OptimizerConfig& opt, ParamStore<T>& params,
                     const ParamStore<T>& grads, OptimizerState<T>& state, T lr);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

template <typename T>
struct Dataset {
  TensorT<T> images;  // [S, H, W, C]
  std::vector<std::int32_t> labels;
  int num_classes = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  TensorT<T> gather_images(std::span<const std::int64_t> indices) const;
  std::vector<std::int32_t> gather_labels(std::span<const std::int64_t> indices) const;
};

// Deterministic, learnable stand-in for a real image corpus: each class is
// an oriented sinusoidal grating with a class-specific orientation and
// frequency; instances vary by random phase, amplitude, DC offset and
// pixel noise. Exactly samples_per_class examples per label.
template <typename T>
Dataset<T> synthetic_dataset(int num_classes, int samples_per_class, int image_size,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunReportRow {
  std::int64_t step = 0;   // 1-based
  std::int64_t epoch = 0;  // completed epochs when the step ran
  double lr = 0.0;
  double loss = 0.0;
  double top1 = 0.0;  // batch top-1 error
};

struct RunReport {
  std::vector<RunReportRow> rows;
  double final_top1_error = 1.0;
  double final_topk_error = 1.0;
  int topk = 5;
  bool dead_network = false;  // latched: any post-epoch probe found dead activations
  std::string init_scheme = "variance_scaling_normal(std=sqrt(2/fan_in))";
};

// CSV with header "step,epoch,lr,loss,top1"; floats are %.17g so values
// round-trip exactly.
std::string report_to_csv(const RunReport& report);
std::vector<RunReportRow> report_rows_from_csv(const std::string& csv);

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
  ParamStore<T> weights;
  ParamStore<T> ema_weights;
  RunReport report;
};

// Steps through epochs of shuffled fixed-size batches: forward (Train) ->
// softmax cross-entropy on the logits -> backward -> optimizer step at
// lr_at(epoch) -> EMA update. A dead-network probe runs after every epoch.
// Aborts with NumericError on a non-finite loss, naming the first node
// whose output went non-finite. max_steps > 0 truncates the run.
template <typename T>
TrainResult<T> train(const GraphSpec& graph, ParamStore<T> weights, const Dataset<T>& dataset,
                     const TrainConfig& config, std::int64_t max_steps = 0);

// True iff max |input activation of the GlobalAvgPool node| < 1e-12 over
// the probe batch (Infer mode).
template <typename T>
bool detect_dead_network(const GraphSpec& graph, ParamStore<T>& weights,
                         const TensorT<T>& probe_batch);

struct EvalResult {
  double top1_error = 1.0;
  double topk_error = 1.0;
};

// Single-crop evaluation; ties broken toward the lower class index.
template <typename T>
EvalResult evaluate_topk(const GraphSpec& graph, ParamStore<T>& weights,
                         const Dataset<T>& dataset, int k, int batch_size = 64);

// ---------------------------------------------------------------------------
// Checkpoints: one TBIN file per parameter plus a JSON manifest
// (name -> file, shape, role).
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& dir, const std::string& manifest_name,
                     const std::string& file_suffix, const GraphSpec& graph,
                     const ParamStore<T>& store);

DType checkpoint_dtype(const std::string& manifest_path);

// Loads with the element type the checkpoint was written in; T must match.
template <typename T>
ParamStore<T> load_checkpoint(const std::string& manifest_path);

}  // namespace incepkit::train
