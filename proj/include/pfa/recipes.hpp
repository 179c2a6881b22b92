#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pfa/arch.hpp"
#include "pfa/spectral.hpp"

namespace pfa {

enum class RecipeMethod { En, EnFootprint, KL };
enum class BudgetKind { Params, Flops };

// Divergence measures for the parameter-free recipe. Only KL is implemented;
// ChiSquare and Wasserstein are declared as extension points and rejected at
// runtime.
enum class Divergence { KL, ChiSquare, Wasserstein };

struct RecipeEntry {
  std::string layer_id;
  int channels = 0;      // filter count at analysis time
  double gamma = 1.0;    // keep-ratio in (0,1]
  int kept_count = 0;    // = ceil(gamma * channels), never 0
  std::optional<std::vector<int>> kept_indices;

  bool operator==(const RecipeEntry&) const = default;
};

struct Recipe {
  RecipeMethod method = RecipeMethod::KL;
  double tau = 0.0;                             // En
  BudgetKind budget_kind = BudgetKind::Params;  // EnFootprint
  long long budget_target = 0;                  // EnFootprint
  double tau_star = 0.0;                        // EnFootprint: resolved threshold
  std::string provenance;
  std::vector<std::string> warnings;
  std::vector<RecipeEntry> entries;

  bool operator==(const Recipe&) const = default;
};

// ceil(gamma * channels) with the product snapped to the nearest integer when
// within 1e-9 relative, so grid values k/C never straddle the boundary.
// Result clamped to [1, channels].
int kept_from_gamma(double gamma, int channels);

// Energy retained when keeping the first ceil(gamma*C) eigenvalues.
double energy_at(const Spectrum& spectrum, double gamma);

// Keep the minimal filter prefix reaching energy tau in every layer.
Recipe recipe_en(const std::vector<Spectrum>& spectra, double tau);
Recipe recipe_en(const SpectraSet& spectra, double tau);

// Largest energy threshold whose pruned model fits the target budget. The
// search walks the exact cumulative-energy breakpoints of the spectra in
// decreasing order, so the result is exact rather than grid-approximate.
Recipe recipe_en_for_budget(const std::vector<Spectrum>& spectra, const ArchSpec& arch,
                            BudgetKind kind, long long target);
Recipe recipe_en_for_budget(const SpectraSet& spectra, const ArchSpec& arch,
                            BudgetKind kind, long long target);

// Parameter-free recipe: gamma = 1 - KL(spectrum, uniform) / ln(C) per layer.
Recipe recipe_kl(const std::vector<Spectrum>& spectra);
Recipe recipe_kl(const SpectraSet& spectra);
Recipe recipe_divergence(const std::vector<Spectrum>& spectra, Divergence divergence);

// All distinct cumulative-energy values across the spectra plus 1.0, sorted
// descending (the budget search set).
std::vector<double> energy_breakpoints(const std::vector<Spectrum>& spectra);

void validate_recipe(const Recipe& recipe);

std::map<std::string, int> kept_counts(const Recipe& recipe);

Recipe load_recipe(const std::filesystem::path& path);
void save_recipe(const Recipe& recipe, const std::filesystem::path& path);

}  // namespace pfa
