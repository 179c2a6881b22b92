#include "pfa/dump.hpp"

#include <set>

#include <json.hpp>

namespace pfa {

using json = nlohmann::ordered_json;

ActivationDump load_dump(const std::filesystem::path& manifest) {
  const std::string text = read_text_file(manifest);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded())
    fail(ErrorCode::ParseError, "malformed dump manifest: " + manifest.string());
  if (j.value("version", std::string()) != "pfa/1" ||
      j.value("kind", std::string()) != "activation_dump")
    fail(ErrorCode::ParseError, "not a pfa/1 activation dump: " + manifest.string());

  ActivationDump dump;
  dump.manifest_path = manifest;
  dump.note = j.value("note", std::string());
  const std::filesystem::path base = manifest.parent_path();

  try {
    dump.sample_count = j.at("sample_count").get<std::size_t>();
    for (const auto& e : j.at("layers")) {
      LayerDumpEntry entry;
      entry.layer_id = e.at("layer").get<std::string>();
      entry.tensor_file = base / e.at("file").get<std::string>();
      for (const auto& d : e.at("shape")) entry.shape.push_back(d.get<std::size_t>());
      const std::string dtype = e.at("dtype").get<std::string>();
      if (dtype == "f32")
        entry.dtype = Dtype::F32;
      else if (dtype == "f64")
        entry.dtype = Dtype::F64;
      else
        fail(ErrorCode::UnsupportedDtype,
             "layer '" + entry.layer_id + "': dtype '" + dtype + "' is not supported");
      dump.layers.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }

  if (dump.sample_count == 0)
    fail(ErrorCode::ShapeMismatch, "dump declares zero samples: " + manifest.string());

  std::set<std::string> ids;
  for (const LayerDumpEntry& entry : dump.layers) {
    if (!ids.insert(entry.layer_id).second)
      fail(ErrorCode::DuplicateLayerId, "dump lists layer '" + entry.layer_id + "' twice");
    if (entry.shape.size() != 2 && entry.shape.size() != 4)
      fail(ErrorCode::ShapeMismatch,
           "layer '" + entry.layer_id + "': dumped shape must be [M,C] or [M,H,W,C], got " +
               shape_to_string(entry.shape));
    if (entry.shape[0] != dump.sample_count)
      fail(ErrorCode::ShapeMismatch,
           "layer '" + entry.layer_id + "': leading dim " + std::to_string(entry.shape[0]) +
               " does not match sample_count " + std::to_string(dump.sample_count));
    // Full read: checks declared shape/dtype against the file and rejects
    // non-finite values up front.
    TensorData t;
    try {
      t = read_tensor_file(entry.tensor_file);
    } catch (const Error& e) {
      throw Error(e.code(), "layer '" + entry.layer_id + "': " + e.what());
    }
    if (tensor_shape(t) != entry.shape)
      fail(ErrorCode::ShapeMismatch,
           "layer '" + entry.layer_id + "': manifest declares " + shape_to_string(entry.shape) +
               " but " + entry.tensor_file.filename().string() + " holds " +
               shape_to_string(tensor_shape(t)));
    if (tensor_dtype(t) != entry.dtype)
      fail(ErrorCode::UnsupportedDtype,
           "layer '" + entry.layer_id + "': manifest dtype does not match tensor file");
  }
  return dump;
}

TensorData load_dump_tensor(const LayerDumpEntry& entry) {
  try {
    return read_tensor_file(entry.tensor_file);
  } catch (const Error& e) {
    throw Error(e.code(), "layer '" + entry.layer_id + "': " + e.what());
  }
}

const LayerDumpEntry* find_entry(const ActivationDump& dump, const std::string& layer_id) {
  for (const LayerDumpEntry& e : dump.layers)
    if (e.layer_id == layer_id) return &e;
  return nullptr;
}

void save_dump(const std::filesystem::path& manifest,
               const std::vector<std::pair<std::string, TensorData>>& layers,
               const std::string& note) {
  if (layers.empty()) fail(ErrorCode::EmptyInput, "refusing to write a dump with no layers");
  const std::filesystem::path base = manifest.parent_path();
  std::error_code ec;
  if (!base.empty()) std::filesystem::create_directories(base, ec);

  const std::size_t m = tensor_shape(layers.front().second)[0];
  json j;
  j["version"] = "pfa/1";
  j["kind"] = "activation_dump";
  j["sample_count"] = m;
  if (!note.empty()) j["note"] = note;
  j["layers"] = json::array();

  for (const auto& [layer_id, tensor] : layers) {
    const auto& shape = tensor_shape(tensor);
    if (shape.size() != 2 && shape.size() != 4)
      fail(ErrorCode::ShapeError, "layer '" + layer_id + "': dump tensors must be rank 2 or 4");
    if (shape[0] != m)
      fail(ErrorCode::ShapeMismatch, "layer '" + layer_id + "': inconsistent sample count");
    const std::string file = layer_id + ".pfat";
    write_tensor_file(base / file, tensor);
    json e;
    e["layer"] = layer_id;
    e["file"] = file;
    e["shape"] = shape;
    e["dtype"] = dtype_name(tensor_dtype(tensor));
    j["layers"].push_back(std::move(e));
  }
  write_file_atomic(manifest, j.dump(2) + "\n");
}

}  // namespace pfa
