#include "pfa/weights.hpp"

#include <json.hpp>

#include "pfa/arch.hpp"

namespace pfa {

using json = nlohmann::ordered_json;

const char* to_string(WeightRole role) {
  switch (role) {
    case WeightRole::Kernel: return "kernel";
    case WeightRole::Bias: return "bias";
    case WeightRole::Scale: return "scale";
    case WeightRole::Shift: return "shift";
    case WeightRole::MovingMean: return "moving_mean";
    case WeightRole::MovingVariance: return "moving_variance";
  }
  return "?";
}

WeightRole weight_role_from_string(const std::string& s) {
  if (s == "kernel") return WeightRole::Kernel;
  if (s == "bias") return WeightRole::Bias;
  if (s == "scale") return WeightRole::Scale;
  if (s == "shift") return WeightRole::Shift;
  if (s == "moving_mean") return WeightRole::MovingMean;
  if (s == "moving_variance") return WeightRole::MovingVariance;
  fail(ErrorCode::ParseError, "unknown weight role: " + s);
}

bool WeightBundle::has(const std::string& layer, WeightRole role) const {
  auto it = by_layer.find(layer);
  return it != by_layer.end() && it->second.count(role) != 0;
}

const TensorData& WeightBundle::at(const std::string& layer, WeightRole role) const {
  auto it = by_layer.find(layer);
  if (it == by_layer.end())
    fail(ErrorCode::ShapeMismatch, "weight bundle has no layer '" + layer + "'");
  auto jt = it->second.find(role);
  if (jt == it->second.end())
    fail(ErrorCode::ShapeMismatch,
         "layer '" + layer + "' has no " + std::string(to_string(role)) + " tensor");
  return jt->second;
}

void WeightBundle::set(const std::string& layer, WeightRole role, TensorData tensor) {
  if (!by_layer.count(layer)) order.push_back(layer);
  by_layer[layer][role] = std::move(tensor);
}

WeightBundle load_weights(const std::filesystem::path& manifest) {
  const std::string text = read_text_file(manifest);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded())
    fail(ErrorCode::ParseError, "malformed weights manifest: " + manifest.string());
  if (j.value("version", std::string()) != "pfa/1" ||
      j.value("kind", std::string()) != "weights")
    fail(ErrorCode::ParseError, "not a pfa/1 weights file: " + manifest.string());

  WeightBundle bundle;
  const std::filesystem::path base = manifest.parent_path();
  try {
    for (const auto& entry : j.at("layers")) {
      const std::string layer = entry.at("layer").get<std::string>();
      if (bundle.has(layer))
        fail(ErrorCode::DuplicateLayerId, "weights listed twice for layer: " + layer);
      for (const auto& [role_name, rel] : entry.at("tensors").items()) {
        const WeightRole role = weight_role_from_string(role_name);
        const std::filesystem::path file = base / rel.get<std::string>();
        try {
          bundle.set(layer, role, read_tensor_file(file));
        } catch (const Error& e) {
          throw Error(e.code(), "layer '" + layer + "': " + e.what());
        }
      }
      if (!bundle.has(layer)) bundle.order.push_back(layer);  // layer with no tensors
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }
  return bundle;
}

void save_weights(const WeightBundle& bundle, const std::filesystem::path& manifest) {
  std::filesystem::path dir = manifest;
  dir.replace_extension(".tensors");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

  json j;
  j["version"] = "pfa/1";
  j["kind"] = "weights";
  j["layers"] = json::array();
  for (const std::string& layer : bundle.order) {
    json entry;
    entry["layer"] = layer;
    entry["tensors"] = json::object();
    for (const auto& [role, tensor] : bundle.by_layer.at(layer)) {
      const std::string name = layer + "." + to_string(role) + ".pfat";
      write_tensor_file(dir / name, tensor);
      entry["tensors"][to_string(role)] = (dir.filename() / name).generic_string();
    }
    j["layers"].push_back(std::move(entry));
  }
  write_file_atomic(manifest, j.dump(2) + "\n");
}

namespace {

void require_shape(const WeightBundle& bundle, const std::string& layer, WeightRole role,
                   const std::vector<std::size_t>& want) {
  if (!bundle.has(layer, role))
    fail(ErrorCode::ShapeMismatch,
         "layer '" + layer + "' is missing its " + to_string(role) + " tensor");
  const auto& got = tensor_shape(bundle.at(layer, role));
  if (got != want)
    fail(ErrorCode::ShapeMismatch, "layer '" + layer + "' " + to_string(role) + " is " +
                                       shape_to_string(got) + ", expected " +
                                       shape_to_string(want));
}

}  // namespace

void validate_weights(const WeightBundle& bundle, const ArchSpec& arch) {
  const auto shapes = infer_shapes(arch);
  const auto inputs = main_inputs(arch);

  std::size_t expected_layers = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::vector<int>& in = inputs[i] < 0 ? arch.input_shape : shapes[inputs[i]];
    const std::size_t cin = static_cast<std::size_t>(in.back());
    const std::size_t c = static_cast<std::size_t>(l.filters);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        ++expected_layers;
        require_shape(bundle, l.id, WeightRole::Kernel,
                      {static_cast<std::size_t>(l.kernel_h),
                       static_cast<std::size_t>(l.kernel_w), cin, c});
        if (l.bias) require_shape(bundle, l.id, WeightRole::Bias, {c});
        break;
      }
      case LayerKind::Dense:
        ++expected_layers;
        require_shape(bundle, l.id, WeightRole::Kernel, {cin, c});
        if (l.bias) require_shape(bundle, l.id, WeightRole::Bias, {c});
        break;
      case LayerKind::BatchNorm: {
        ++expected_layers;
        const std::size_t ch = static_cast<std::size_t>(in.back());
        for (WeightRole r : {WeightRole::Scale, WeightRole::Shift, WeightRole::MovingMean,
                             WeightRole::MovingVariance})
          require_shape(bundle, l.id, r, {ch});
        break;
      }
      default:
        if (bundle.has(l.id))
          fail(ErrorCode::ShapeMismatch,
               "layer '" + l.id + "' takes no weights but the bundle provides some");
        break;
    }
  }

  if (bundle.order.size() != expected_layers)
    for (const std::string& layer : bundle.order)
      if (find_layer(arch, layer) < 0)
        fail(ErrorCode::ShapeMismatch, "bundle names unknown layer '" + layer + "'");
}

}  // namespace pfa
