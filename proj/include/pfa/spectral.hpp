#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfa/dump.hpp"
#include "pfa/tensor.hpp"

namespace pfa {

enum class PoolMode { Max, Avg };

// M x C matrix of per-sample layer responses (rows = samples, columns =
// filters/neurons).
struct ResponseMatrix {
  std::string layer_id;
  Eigen::MatrixXd data;
};

// Eigenvalues of the response covariance, sorted descending and normalized to
// sum 1. A layer whose responses have (near-)zero covariance trace is flagged
// degenerate and carries an all-zero vector instead.
struct Spectrum {
  std::string layer_id;
  Eigen::VectorXd values;
  bool degenerate = false;
};

// Collapses [M,H,W,C] activations to [M,C] by spatial pooling (max by
// default); [M,C] inputs pass through unchanged.
ResponseMatrix pool_responses(const std::string& layer_id, const TensorData& tensor,
                              PoolMode mode = PoolMode::Max);

// Unbiased column covariance (f64 accumulation), symmetric eigendecomposition,
// eigenvalues clamped at 1e-12 * largest, sorted descending, normalized.
Spectrum compute_spectrum(const ResponseMatrix& responses);

// Sum_k values[k] * ln(values[k] * C), with 0*ln(0) = 0. Range [0, ln C].
double kl_to_uniform(const Spectrum& spectrum);

struct SpectraSet {
  std::string source;  // provenance label, e.g. the dump manifest path
  PoolMode pooling = PoolMode::Max;
  std::vector<Spectrum> layers;
};

// Pool + spectrum for every dump entry, in manifest order. Layers are
// processed in parallel up to `threads` (see thread_budget); results do not
// depend on scheduling.
SpectraSet analyze_dump(const ActivationDump& dump, PoolMode mode = PoolMode::Max,
                        int threads = 0);

SpectraSet load_spectra(const std::filesystem::path& path);
void save_spectra(const SpectraSet& set, const std::filesystem::path& path);

const Spectrum* find_spectrum(const SpectraSet& set, const std::string& layer_id);

}  // namespace pfa
