#include "pfa/arch.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include <json.hpp>

#include "pfa/tensor.hpp"

namespace pfa {

using json = nlohmann::ordered_json;

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::AddSkip: return "add_skip";
  }
  return "?";
}

namespace {

LayerKind kind_from_string(const std::string& s) {
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "dense") return LayerKind::Dense;
  if (s == "batchnorm") return LayerKind::BatchNorm;
  if (s == "relu") return LayerKind::Relu;
  if (s == "maxpool") return LayerKind::MaxPool;
  if (s == "global_avg_pool") return LayerKind::GlobalAvgPool;
  if (s == "add_skip") return LayerKind::AddSkip;
  fail(ErrorCode::ParseError, "unknown layer kind: " + s);
}

bool valid_id(const std::string& id) {
  if (id.empty() || id == "@input") return false;
  for (char c : id)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
      return false;
  return true;
}

int channels_of(const std::vector<int>& shape) { return shape.back(); }

}  // namespace

int find_layer(const ArchSpec& arch, const std::string& id) {
  for (std::size_t i = 0; i < arch.layers.size(); ++i)
    if (arch.layers[i].id == id) return static_cast<int>(i);
  return -1;
}

std::vector<int> main_inputs(const ArchSpec& arch) {
  std::vector<int> in(arch.layers.size(), -1);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const std::string& ref = arch.layers[i].input;
    if (ref.empty()) {
      in[i] = static_cast<int>(i) - 1;
    } else if (ref == "@input") {
      in[i] = -1;
    } else {
      int j = find_layer(arch, ref);
      if (j < 0 || j >= static_cast<int>(i))
        fail(ErrorCode::InvalidInput,
             "layer '" + arch.layers[i].id + "' input '" + ref +
                 "' must name an earlier layer");
      in[i] = j;
    }
  }
  return in;
}

std::vector<int> skip_inputs(const ArchSpec& arch) {
  std::vector<int> in(arch.layers.size(), -2);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.kind != LayerKind::AddSkip) continue;
    if (l.skip_from == "@input") {
      in[i] = -1;
      continue;
    }
    int j = find_layer(arch, l.skip_from);
    if (j < 0 || j >= static_cast<int>(i))
      fail(ErrorCode::InvalidInput,
           "add_skip '" + l.id + "' skip_from '" + l.skip_from +
               "' must name an earlier layer");
    in[i] = j;
  }
  return in;
}

void validate_arch(const ArchSpec& arch) {
  if (arch.input_shape.size() != 1 && arch.input_shape.size() != 3)
    fail(ErrorCode::ShapeError, "input_shape must be [H,W,C] or [C]");
  for (int d : arch.input_shape)
    if (d <= 0) fail(ErrorCode::ShapeError, "input_shape dims must be positive");
  if (arch.layers.empty()) fail(ErrorCode::InvalidInput, "architecture has no layers");

  std::map<std::string, int> seen;
  for (const LayerSpec& l : arch.layers) {
    if (!valid_id(l.id))
      fail(ErrorCode::InvalidInput, "bad layer id: '" + l.id + "'");
    if (++seen[l.id] > 1) fail(ErrorCode::DuplicateLayerId, "duplicate layer id: " + l.id);
  }

  for (const LayerSpec& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (l.filters < 1 || l.kernel_h < 1 || l.kernel_w < 1 || l.stride < 1)
          fail(ErrorCode::InvalidInput, "conv2d '" + l.id + "' needs positive filters/kernel/stride");
        break;
      case LayerKind::Dense:
        if (l.filters < 1) fail(ErrorCode::InvalidInput, "dense '" + l.id + "' needs positive units");
        break;
      case LayerKind::MaxPool:
        if (l.pool < 1) fail(ErrorCode::InvalidInput, "maxpool '" + l.id + "' needs positive window");
        break;
      case LayerKind::AddSkip:
        if (l.skip_from.empty())
          fail(ErrorCode::InvalidInput, "add_skip '" + l.id + "' needs skip_from");
        break;
      default:
        break;
    }
    if (l.analyzable && l.kind != LayerKind::Conv2d && l.kind != LayerKind::Dense)
      fail(ErrorCode::InvalidInput, "layer '" + l.id + "' cannot be analyzable");
  }

  main_inputs(arch);
  const std::vector<int> skips = skip_inputs(arch);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.kind != LayerKind::AddSkip || l.skip_mode != SkipMode::Projection) continue;
    if (skips[i] < 0)
      fail(ErrorCode::InvalidInput, "projection add_skip '" + l.id + "' cannot skip from the network input");
    const LayerSpec& proj = arch.layers[skips[i]];
    if (proj.kind != LayerKind::Conv2d || proj.analyzable)
      fail(ErrorCode::InvalidInput,
           "projection add_skip '" + l.id + "' must skip from a non-analyzable conv2d; '" +
               proj.id + "' is sliced via the block it feeds, not analyzed on its own");
  }
}

std::vector<std::vector<int>> infer_shapes(const ArchSpec& arch) {
  validate_arch(arch);
  const std::vector<int> main_in = main_inputs(arch);
  const std::vector<int> skip_in = skip_inputs(arch);
  std::vector<std::vector<int>> shapes(arch.layers.size());

  auto shape_at = [&](int idx) -> const std::vector<int>& {
    return idx < 0 ? arch.input_shape : shapes[idx];
  };

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::vector<int>& in = shape_at(main_in[i]);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (in.size() != 3)
          fail(ErrorCode::ShapeError, "conv2d '" + l.id + "' needs an [H,W,C] input");
        int ho, wo;
        if (l.padding == PadMode::Same) {
          ho = (in[0] + l.stride - 1) / l.stride;
          wo = (in[1] + l.stride - 1) / l.stride;
        } else {
          if (in[0] < l.kernel_h || in[1] < l.kernel_w)
            fail(ErrorCode::ShapeError, "conv2d '" + l.id + "' kernel larger than input");
          ho = (in[0] - l.kernel_h) / l.stride + 1;
          wo = (in[1] - l.kernel_w) / l.stride + 1;
        }
        shapes[i] = {ho, wo, l.filters};
        break;
      }
      case LayerKind::Dense:
        if (in.size() != 1)
          fail(ErrorCode::ShapeError, "dense '" + l.id + "' needs a flat [C] input");
        shapes[i] = {l.filters};
        break;
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        shapes[i] = in;
        break;
      case LayerKind::MaxPool: {
        if (in.size() != 3)
          fail(ErrorCode::ShapeError, "maxpool '" + l.id + "' needs an [H,W,C] input");
        const int s = l.pool_stride > 0 ? l.pool_stride : l.pool;
        if (in[0] < l.pool || in[1] < l.pool)
          fail(ErrorCode::ShapeError, "maxpool '" + l.id + "' window larger than input");
        shapes[i] = {(in[0] - l.pool) / s + 1, (in[1] - l.pool) / s + 1, in[2]};
        break;
      }
      case LayerKind::GlobalAvgPool:
        if (in.size() != 3)
          fail(ErrorCode::ShapeError, "global_avg_pool '" + l.id + "' needs an [H,W,C] input");
        shapes[i] = {in[2]};
        break;
      case LayerKind::AddSkip: {
        const std::vector<int>& skip = shape_at(skip_in[i]);
        if (in.size() != skip.size())
          fail(ErrorCode::ShapeError, "add_skip '" + l.id + "' joins tensors of different rank");
        if (in.size() == 3 && (in[0] != skip[0] || in[1] != skip[1]))
          fail(ErrorCode::ShapeError, "add_skip '" + l.id + "' joins different spatial dims");
        const int cm = channels_of(in), cs = channels_of(skip);
        if (l.skip_mode == SkipMode::Projection && cm != cs)
          fail(ErrorCode::ShapeError,
               "projection add_skip '" + l.id + "' joins mismatched channel counts");
        std::vector<int> out = in;
        out.back() = std::max(cm, cs);  // padding mode zero-fills the smaller side
        shapes[i] = out;
        break;
      }
    }
  }
  return shapes;
}

CostReport cost_report(const ArchSpec& arch) {
  const std::vector<std::vector<int>> shapes = infer_shapes(arch);
  const std::vector<int> main_in = main_inputs(arch);
  auto shape_at = [&](int idx) -> const std::vector<int>& {
    return idx < 0 ? arch.input_shape : shapes[idx];
  };
  auto numel = [](const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
  };

  CostReport rep;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::vector<int>& in = shape_at(main_in[i]);
    const std::vector<int>& out = shapes[i];
    LayerCost cost{l.id, 0, 0};
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const long long cin = in[2], cout = l.filters;
        const long long spatial = static_cast<long long>(out[0]) * out[1];
        cost.params = static_cast<long long>(l.kernel_h) * l.kernel_w * cin * cout +
                      (l.bias ? cout : 0);
        cost.flops = 2LL * l.kernel_h * l.kernel_w * cin * cout * spatial +
                     (l.bias ? cout * spatial : 0);
        break;
      }
      case LayerKind::Dense: {
        const long long cin = in[0], cout = l.filters;
        cost.params = cin * cout + (l.bias ? cout : 0);
        cost.flops = 2LL * cin * cout + (l.bias ? cout : 0);
        break;
      }
      case LayerKind::BatchNorm:
        cost.params = 2LL * channels_of(in);
        cost.flops = 2LL * numel(out);  // folded scale + shift per element
        break;
      case LayerKind::Relu:
        cost.flops = numel(out);
        break;
      case LayerKind::MaxPool:
        cost.flops = static_cast<long long>(l.pool) * l.pool * numel(out);
        break;
      case LayerKind::GlobalAvgPool:
        cost.flops = numel(in) + channels_of(in);
        break;
      case LayerKind::AddSkip:
        cost.flops = numel(out);
        break;
    }
    rep.params += cost.params;
    rep.flops += cost.flops;
    rep.per_layer.push_back(std::move(cost));
  }
  return rep;
}

long long footprint(const ArchSpec& arch) { return cost_report(arch).params; }
long long flops(const ArchSpec& arch) { return cost_report(arch).flops; }

std::vector<std::string> analyzable_layers(const ArchSpec& arch) {
  std::vector<std::string> out;
  for (const LayerSpec& l : arch.layers)
    if (l.analyzable) out.push_back(l.id);
  return out;
}

namespace {

json layer_to_json(const LayerSpec& l) {
  json j;
  j["id"] = l.id;
  j["kind"] = to_string(l.kind);
  switch (l.kind) {
    case LayerKind::Conv2d:
      j["filters"] = l.filters;
      j["kernel"] = {l.kernel_h, l.kernel_w};
      j["stride"] = l.stride;
      j["padding"] = l.padding == PadMode::Same ? "same" : "valid";
      j["bias"] = l.bias;
      j["analyzable"] = l.analyzable;
      break;
    case LayerKind::Dense:
      j["units"] = l.filters;
      j["bias"] = l.bias;
      j["analyzable"] = l.analyzable;
      break;
    case LayerKind::MaxPool:
      j["pool"] = l.pool;
      j["stride"] = l.pool_stride > 0 ? l.pool_stride : l.pool;
      break;
    case LayerKind::AddSkip:
      j["skip_from"] = l.skip_from;
      j["mode"] = l.skip_mode == SkipMode::Padding ? "padding" : "projection";
      break;
    default:
      break;
  }
  if (!l.input.empty()) j["input"] = l.input;
  return j;
}

LayerSpec layer_from_json(const json& j) {
  if (!j.is_object() || !j.contains("id") || !j.contains("kind"))
    fail(ErrorCode::ParseError, "layer entry needs 'id' and 'kind'");
  LayerSpec l;
  l.id = j.at("id").get<std::string>();
  l.kind = kind_from_string(j.at("kind").get<std::string>());
  switch (l.kind) {
    case LayerKind::Conv2d: {
      l.filters = j.at("filters").get<int>();
      const auto& k = j.at("kernel");
      if (!k.is_array() || k.size() != 2)
        fail(ErrorCode::ParseError, "conv2d kernel must be [h,w]");
      l.kernel_h = k[0].get<int>();
      l.kernel_w = k[1].get<int>();
      l.stride = j.value("stride", 1);
      const std::string pad = j.value("padding", std::string("same"));
      if (pad != "same" && pad != "valid")
        fail(ErrorCode::ParseError, "conv2d padding must be same|valid");
      l.padding = pad == "same" ? PadMode::Same : PadMode::Valid;
      l.bias = j.value("bias", true);
      l.analyzable = j.value("analyzable", true);
      break;
    }
    case LayerKind::Dense:
      l.filters = j.at("units").get<int>();
      l.bias = j.value("bias", true);
      l.analyzable = j.value("analyzable", true);
      break;
    case LayerKind::MaxPool:
      l.pool = j.at("pool").get<int>();
      l.pool_stride = j.value("stride", l.pool);
      break;
    case LayerKind::AddSkip: {
      l.skip_from = j.at("skip_from").get<std::string>();
      const std::string mode = j.value("mode", std::string("padding"));
      if (mode != "padding" && mode != "projection")
        fail(ErrorCode::ParseError, "add_skip mode must be padding|projection");
      l.skip_mode = mode == "padding" ? SkipMode::Padding : SkipMode::Projection;
      break;
    }
    default:
      break;
  }
  l.input = j.value("input", std::string());
  return l;
}

}  // namespace

ArchSpec load_arch(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded())
    fail(ErrorCode::ParseError, "malformed architecture file: " + path.string());
  if (j.value("version", std::string()) != "pfa/1" || j.value("kind", std::string()) != "arch")
    fail(ErrorCode::ParseError, "not a pfa/1 arch file: " + path.string());

  ArchSpec arch;
  try {
    for (const auto& d : j.at("input_shape")) arch.input_shape.push_back(d.get<int>());
    for (const auto& lj : j.at("layers")) arch.layers.push_back(layer_from_json(lj));
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  validate_arch(arch);
  return arch;
}

void save_arch(const ArchSpec& arch, const std::filesystem::path& path) {
  validate_arch(arch);
  json j;
  j["version"] = "pfa/1";
  j["kind"] = "arch";
  j["input_shape"] = arch.input_shape;
  j["layers"] = json::array();
  for (const LayerSpec& l : arch.layers) j["layers"].push_back(layer_to_json(l));
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace pfa
