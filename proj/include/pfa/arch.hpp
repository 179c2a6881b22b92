#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pfa/error.hpp"

namespace pfa {

enum class LayerKind { Conv2d, Dense, BatchNorm, Relu, MaxPool, GlobalAvgPool, AddSkip };
enum class PadMode { Same, Valid };
enum class SkipMode { Padding, Projection };

const char* to_string(LayerKind k);

// One node of the network graph. Layers form a feed-forward chain: each
// consumes the previous layer's output unless `input` names an earlier layer
// ("@input" is the network input). add_skip layers take a second operand via
// `skip_from`. Projection-style skips must point at a conv2d marked
// analyzable=false; that conv is sliced in lock-step with the block it feeds.
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::Conv2d;

  int filters = 0;  // conv2d output channels; dense units
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  PadMode padding = PadMode::Same;
  bool bias = true;

  int pool = 0;         // maxpool window
  int pool_stride = 0;  // defaults to pool

  std::string input;      // "" = previous layer
  std::string skip_from;  // add_skip only
  SkipMode skip_mode = SkipMode::Padding;

  bool analyzable = false;  // conv2d/dense only
};

struct ArchSpec {
  std::vector<int> input_shape;  // [H,W,C] or [C]
  std::vector<LayerSpec> layers;
};

struct LayerCost {
  std::string id;
  long long params = 0;
  long long flops = 0;
};

struct CostReport {
  long long params = 0;
  long long flops = 0;
  std::vector<LayerCost> per_layer;
};

// Index of the layer named `id`, or -1.
int find_layer(const ArchSpec& arch, const std::string& id);

// Chain input of every layer: index of the feeding layer, -1 for the network
// input. Throws InvalidInput for unknown or forward references.
std::vector<int> main_inputs(const ArchSpec& arch);
// Skip operand per layer: feeding layer index, or -1 for the network input,
// or -2 when the layer has no skip operand.
std::vector<int> skip_inputs(const ArchSpec& arch);

void validate_arch(const ArchSpec& arch);

// Output shape of every layer ({H,W,C} or {C}); also the static shape check.
std::vector<std::vector<int>> infer_shapes(const ArchSpec& arch);

// Trainable-parameter and FLOP accounting. Conventions: 2 ops per
// multiply-accumulate; conv params f_h*f_w*C_in*C_out (+C_out bias); dense
// C_in*C_out (+C_out); batchnorm 2*C trainable (moving stats excluded);
// relu/pool/add counted at their elementwise op counts.
CostReport cost_report(const ArchSpec& arch);
long long footprint(const ArchSpec& arch);
long long flops(const ArchSpec& arch);

std::vector<std::string> analyzable_layers(const ArchSpec& arch);

ArchSpec load_arch(const std::filesystem::path& path);
void save_arch(const ArchSpec& arch, const std::filesystem::path& path);

}  // namespace pfa
