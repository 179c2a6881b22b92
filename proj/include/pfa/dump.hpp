#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pfa/tensor.hpp"

namespace pfa {

struct LayerDumpEntry {
  std::string layer_id;
  std::filesystem::path tensor_file;
  std::vector<std::size_t> shape;  // [M,H,W,C] or [M,C]
  Dtype dtype = Dtype::F32;
};

// On-disk bundle of recorded layer outputs: a manifest plus one tensor file
// per layer, all sharing the same leading sample count M. Whether responses
// were captured before or after the nonlinearity is up to the producer; the
// free-text `note` records it.
struct ActivationDump {
  std::filesystem::path manifest_path;
  std::vector<LayerDumpEntry> layers;
  std::size_t sample_count = 0;
  std::string note;
};

// Parses and fully validates a dump: shapes against file contents, unique
// ids, consistent M, finite values. Tensor payloads are re-read on demand via
// load_dump_tensor rather than held in memory.
ActivationDump load_dump(const std::filesystem::path& manifest);
TensorData load_dump_tensor(const LayerDumpEntry& entry);
const LayerDumpEntry* find_entry(const ActivationDump& dump, const std::string& layer_id);

void save_dump(const std::filesystem::path& manifest,
               const std::vector<std::pair<std::string, TensorData>>& layers,
               const std::string& note = "");

}  // namespace pfa
