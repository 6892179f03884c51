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

#include <functional>
#include <string>
#include <vector>

#include "incepkit/tensor.hpp"

namespace incepkit {

struct GraphSpec;

using ScalarFn = std::function<double(const TensorD&)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / (2h), one coordinate
// at a time. float64 only; the caller owns the tolerance.
TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h);

struct GradCompare {
  double max_rel_err = 0.0;   // ||a - b||_inf / max(||a||_inf, ||b||_inf, 1e-8)
  std::int64_t worst_index = -1;
  double analytic = 0.0;      // values at the worst coordinate
  double numeric = 0.0;
};

GradCompare compare_gradients(const TensorD& analytic, const TensorD& numeric);

struct OpCheckResult {
  std::string op;
  double worst_rel_err = 0.0;
  std::int64_t worst_coord = -1;
};

// Finite-difference checks (float64, central differences) of every
// differentiable kernel against its analytic backward. `instances` random
// cases per op. corrupt_analytic injects an error into one analytic
// gradient so the detector itself can be exercised.
std::vector<OpCheckResult> run_op_gradchecks(std::uint64_t seed, int instances = 3,
                                             double h = 1e-5, bool corrupt_analytic = false);

struct ParamCheckResult {
  std::string param;
  double worst_rel_err = 0.0;
  std::int64_t worst_coord = -1;
  std::int64_t checked_coords = 0;
};

// Finite-difference check of d(loss)/d(param) for every trainable
// parameter of a graph, each coordinate perturbed through a full forward
// pass. max_coords_per_param == 0 checks every coordinate.
std::vector<ParamCheckResult> graph_gradcheck(const GraphSpec& graph, std::uint64_t seed,
                                              double h = 1e-5,
                                              std::int64_t max_coords_per_param = 0);

}  // namespace incepkit
