#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pfa/net.hpp"
#include "pfa/recipes.hpp"
#include "pfa/spectral.hpp"

namespace pfa {

// One end-to-end compression study on the desk-scale reference CNN:
// train -> dump -> spectra -> recipes -> prune -> fine-tune -> compare
// against footprint-matched random pruning.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out_dir;

  int classes = 4;
  int train_samples = 600;
  int test_samples = 400;
  std::array<int, 3> image_shape{16, 16, 1};

  std::vector<double> taus{0.95};  // one energy recipe per entry
  int model_seeds = 5;             // S: trainings per variant
  int random_trials = 20;          // R: random-pruning draws per footprint

  TrainConfig train_cfg;   // full-model hyperparameters (reused everywhere)
  int finetune_epochs = 8; // epoch budget after pruning (both inits)

  bool domain_adapt = false;  // extra arm: recipe from a class-subset dump
  int domain_classes = 2;

  PoolMode pooling = PoolMode::Max;
  int threads = 0;  // 0 = hardware (bounded by PFA_THREADS)
};

void validate_experiment_config(const ExperimentConfig& config);

struct ReportRow {
  std::string variant;  // full | pfa_en(tau) | pfa_kl | random(variant) | pfa_kl_domain
  std::string init;     // random | filter_selection
  int runs = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  long long params = 0;
  long long flops = 0;
  double params_pct = 100.0;
  double flops_pct = 100.0;
};

struct RandomTrialInfo {
  std::string variant;  // which recipe's footprint this trial matched
  int trial = 0;
  long long params = 0;
  double acc_selection = 0.0;  // fine-tuned from sliced full-model weights
  double acc_random = 0.0;     // trained from a fresh initialization
};

struct DomainReport {
  Recipe recipe;               // PFA-KL from the subset dump
  int differing_layers = 0;    // kept_count disagreements vs the full-data recipe
  double subset_accuracy = 0.0;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  double full_accuracy = 0.0;  // best of the S full trainings
  long long full_params = 0;
  long long full_flops = 0;
  std::map<std::string, Recipe> recipes;  // keyed by variant name
  std::vector<RandomTrialInfo> random_trials;
  std::optional<DomainReport> domain;
  std::filesystem::path csv_path;
  std::filesystem::path summary_path;
};

// Variant label for an energy recipe, e.g. "pfa_en(0.95)".
std::string variant_en(double tau);

// Draws kept-counts uniformly per layer until the pruned parameter count
// lands within 2% of target, refining the closest draw by single-filter
// moves if sampling alone does not land in the band.
std::map<std::string, int> random_footprint(const ArchSpec& arch,
                                            const std::vector<std::string>& layers,
                                            long long target, std::uint64_t seed);

ExperimentReport run_experiment(const ExperimentConfig& config);

}  // namespace pfa
