#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pfa/tensor.hpp"

namespace pfa {

struct ArchSpec;

enum class WeightRole { Kernel, Bias, Scale, Shift, MovingMean, MovingVariance };

const char* to_string(WeightRole role);
WeightRole weight_role_from_string(const std::string& s);

// All tensors of a model, keyed by layer id and role. Conv kernels are
// [f_h, f_w, C_in, C_out], dense kernels [C_in, C_out], everything else
// per-channel vectors [C]. `order` preserves manifest order on load.
struct WeightBundle {
  std::vector<std::string> order;
  std::map<std::string, std::map<WeightRole, TensorData>> by_layer;

  bool has(const std::string& layer) const { return by_layer.count(layer) != 0; }
  bool has(const std::string& layer, WeightRole role) const;
  const TensorData& at(const std::string& layer, WeightRole role) const;
  void set(const std::string& layer, WeightRole role, TensorData tensor);
};

WeightBundle load_weights(const std::filesystem::path& manifest);
void save_weights(const WeightBundle& bundle, const std::filesystem::path& manifest);

// Checks that the bundle provides exactly the tensors the architecture
// requires, with matching shapes.
void validate_weights(const WeightBundle& bundle, const ArchSpec& arch);

}  // namespace pfa
