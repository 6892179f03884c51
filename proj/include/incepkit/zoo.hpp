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
// Builders for the Inception-v4, Inception-ResNet-v1 and
// Inception-ResNet-v2 architectures. Filter counts live in JSON definition
// files (data/*.json) so the transcribed numbers stay reviewable and
// diffable; the builders only wire structure.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "incepkit/graph.hpp"

namespace incepkit::zoo {

enum class Variant { InceptionV4, InceptionResNetV1, InceptionResNetV2 };

std::string to_string(Variant v);             // "inception_v4", ...
Variant variant_from_string(const std::string& s);  // accepts short aliases v4/ir1/ir2

// Filter bank sizes of the four convolutions in the shared 35->17
// reduction module.
struct ReductionAParams {
  int k = 0, l = 0, m = 0, n = 0;
};

// Every knob of one architecture variant.
struct ArchConfig {
  Variant variant = Variant::InceptionV4;
  int num_classes = 1000;
  double width_multiplier = 1.0;
  double residual_scale = 0.1;  // only meaningful for the ResNet variants
  std::array<int, 3> block_counts{0, 0, 0};  // A, B, C repeats
  ReductionAParams reduction_a;
  double dropout_keep = 0.8;
  int input_h = 299;
  int input_w = 299;

  static ArchConfig defaults(Variant v);
};

std::string arch_config_to_json(const ArchConfig& config, int indent = 2);
// Fields other than "variant" are optional and fall back to the variant's
// defaults.
ArchConfig arch_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Definition files
// ---------------------------------------------------------------------------

struct StepDef {
  enum class Op { Conv, MaxPool, AvgPool, Split };
  Op op = Op::Conv;
  int kernel_h = 1, kernel_w = 1;
  int stride = 1;
  Padding padding = Padding::Same;
  int filters = 0;          // Conv only; 0 when symbol is set
  std::string symbol;       // "k" | "l" | "m" | "n" inside reduction_a
  std::vector<std::vector<StepDef>> branches;  // Split only
};

struct BlockDef {
  std::vector<std::vector<StepDef>> branches;
};

struct ArchDefinition {
  std::string name;
  bool residual = false;
  std::array<int, 3> default_block_counts{0, 0, 0};
  ReductionAParams default_reduction_a;
  double default_dropout_keep = 0.8;
  double default_residual_scale = 1.0;
  std::vector<StepDef> stem;
  BlockDef block_a, block_b, block_c;
  BlockDef reduction_a;  // filter counts are the symbols k/l/m/n
  BlockDef reduction_b;
};

// Directory holding the definition files: $INCEPKIT_DATA_DIR if set, else
// the build-time default.
std::string data_dir();

// Loads (and caches) the definition for a variant from
// <data_dir>/<variant>.json.
const ArchDefinition& load_definition(Variant v);

// Width scaling: nearest multiple of 4. A count that would round to zero
// makes the width infeasible and throws BadInput.
int scale_filters(int filters, double width);

// ---------------------------------------------------------------------------
// Fragment builders
//
// Each fragment is a standalone GraphSpec with a single Input node shaped
// to the architecture's natural tensor at that point (scaled by `width`),
// so fragments can be shape-checked and executed in isolation.
// ---------------------------------------------------------------------------

enum class GridStage { A35, B17, C8 };

GraphSpec build_stem(Variant v, double width = 1.0, int input_h = 299, int input_w = 299);

GraphSpec build_inception_block(Variant v, GridStage stage, double width = 1.0,
                                double residual_scale = 0.1);

GraphSpec build_reduction_a(Variant v, const ReductionAParams& params, double width = 1.0);

GraphSpec build_reduction_b(Variant v, double width = 1.0);

// Full network:
//   Input -> stem -> a x A -> Reduction-A -> b x B -> Reduction-B -> c x C
//         -> GlobalAvgPool -> Dropout -> FullyConnected -> Softmax
// Inputs smaller than 149 px run the stem's first reducing conv at stride 1
// so desk-scale inputs keep a usable grid pyramid; everything above the
// stem is unchanged.
GraphSpec assemble(const ArchConfig& config);

// The pure Inception-v4 topology with every A/B/C block converted to a
// residual block (expansion conv + scaled shortcut sum). Width-matched to
// assemble() on the same config by construction.
GraphSpec assemble_residualized_pure(const ArchConfig& config);

// Converts a grid-preserving fragment that ends in a Concat into a residual
// block: Concat -> 1x1 expansion conv (no activation, channels matched to
// the fragment input) -> ResidualAdd(alpha) -> ReLU, with the shortcut
// wired from the fragment input. Throws BadInput if the fragment changes
// grid size or does not end in a Concat.
GraphSpec residualize(const GraphSpec& fragment, double alpha);

}  // namespace incepkit::zoo
