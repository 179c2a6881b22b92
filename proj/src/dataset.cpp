#include "pfa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pfa/rng.hpp"

namespace pfa {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;
constexpr double kBaseFrequency = 0.22;  // cycles per pixel
constexpr double kFreqJitter = 0.15;
constexpr double kNoiseSigma = 0.35;

}  // namespace

SynthDataset generate_dataset(std::uint64_t seed, int classes, int samples,
                              std::array<int, 3> shape, const std::string& split) {
  if (classes < 2) fail(ErrorCode::InvalidParams, "need at least 2 classes");
  if (samples < 10 * classes)
    fail(ErrorCode::InvalidParams, "need at least 10 samples per class, got " +
                                       std::to_string(samples) + " for " +
                                       std::to_string(classes) + " classes");
  const int h = shape[0], w = shape[1], c = shape[2];
  if (h < 4 || w < 4 || c < 1)
    fail(ErrorCode::InvalidParams, "image shape too small");

  SynthDataset ds;
  ds.seed = seed;
  ds.split = split;
  ds.classes = classes;
  ds.labels.resize(samples);
  for (int i = 0; i < samples; ++i) ds.labels[i] = i % classes;
  Rng order(derive_seed(seed, split + "-order"));
  order.shuffle(ds.labels);

  ds.images = NdArray<float>({static_cast<std::size_t>(samples), static_cast<std::size_t>(h),
                              static_cast<std::size_t>(w), static_cast<std::size_t>(c)});

  for (int i = 0; i < samples; ++i) {
    Rng rng(derive_seed(seed, split + "-sample-" + std::to_string(i)));
    const int k = ds.labels[i];
    // Stripes at the class angle; everything else is nuisance variation.
    const double theta = kTau / 2.0 * k / classes;
    const double freq = kBaseFrequency * (1.0 + kFreqJitter * (rng.uniform() - 0.5));
    const double phase = kTau * rng.uniform();
    const double cx = std::cos(theta) * freq * kTau;
    const double cy = std::sin(theta) * freq * kTau;
    for (int ch = 0; ch < c; ++ch) {
      const double channel_shift = ch * kTau / (2.0 * c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double v = std::cos(cx * x + cy * y + phase + channel_shift) +
                           kNoiseSigma * rng.normal();
          ds.images(static_cast<std::size_t>(i), static_cast<std::size_t>(y),
                    static_cast<std::size_t>(x), static_cast<std::size_t>(ch)) =
              static_cast<float>(v);
        }
    }
  }
  return ds;
}

SynthDataset class_subset(const SynthDataset& ds, int keep_classes) {
  if (keep_classes < 1 || keep_classes > ds.classes)
    fail(ErrorCode::InvalidParams, "subset class count out of range");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (ds.labels[i] < keep_classes) keep.push_back(i);

  SynthDataset out;
  out.seed = ds.seed;
  out.split = ds.split;
  out.classes = ds.classes;
  const std::size_t row = ds.images.numel() / ds.images.shape[0];
  out.images = NdArray<float>({keep.size(), ds.images.shape[1], ds.images.shape[2],
                               ds.images.shape[3]});
  for (std::size_t j = 0; j < keep.size(); ++j) {
    out.labels.push_back(ds.labels[keep[j]]);
    std::copy_n(ds.images.data.begin() + keep[j] * row, row,
                out.images.data.begin() + j * row);
  }
  return out;
}

double nearest_centroid_accuracy(const SynthDataset& train, const SynthDataset& test) {
  const std::size_t dim = train.images.numel() / train.images.shape[0];
  std::vector<std::vector<double>> centroid(train.classes, std::vector<double>(dim, 0.0));
  std::vector<int> count(train.classes, 0);
  for (std::size_t i = 0; i < train.labels.size(); ++i) {
    const int k = train.labels[i];
    ++count[k];
    for (std::size_t d = 0; d < dim; ++d)
      centroid[k][d] += train.images.data[i * dim + d];
  }
  for (int k = 0; k < train.classes; ++k)
    if (count[k] > 0)
      for (double& v : centroid[k]) v /= count[k];

  int hits = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < train.classes; ++k) {
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = test.images.data[i * dim + d] - centroid[k][d];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    if (best == test.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test.labels.size());
}

}  // namespace pfa
