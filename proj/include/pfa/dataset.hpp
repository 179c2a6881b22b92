#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pfa/tensor.hpp"

namespace pfa {

// Procedurally generated image-classification set. Class identity is carried
// by stripe orientation; phase, frequency jitter, and additive noise make raw
// pixels a poor predictor while staying easily learnable for a small CNN.
struct SynthDataset {
  NdArray<float> images;  // [N,H,W,C]
  std::vector<int> labels;
  std::uint64_t seed = 0;
  std::string split;
  int classes = 0;
};

// Deterministic given (seed, split); class-balanced within one sample. Each
// sample is generated from its own derived seed, so subsets and order are
// stable. Requires K >= 2 and N >= 10*K.
SynthDataset generate_dataset(std::uint64_t seed, int classes, int samples,
                              std::array<int, 3> shape, const std::string& split);

// Dataset restricted to labels in [0, keep_classes); labels are unchanged.
SynthDataset class_subset(const SynthDataset& ds, int keep_classes);

// Raw-pixel baseline: classify test images by nearest per-class mean of the
// train images. Used to show the dataset is not linearly trivial.
double nearest_centroid_accuracy(const SynthDataset& train, const SynthDataset& test);

}  // namespace pfa
