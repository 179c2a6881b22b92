#include "pfa/recipes.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "pfa/prune.hpp"

namespace pfa {

using json = nlohmann::ordered_json;

int kept_from_gamma(double gamma, int channels) {
  const double r = gamma * static_cast<double>(channels);
  const double nearest = std::round(r);
  double k;
  if (std::abs(r - nearest) <= 1e-9 * std::max(1.0, std::abs(r)))
    k = nearest;
  else
    k = std::ceil(r);
  return std::clamp(static_cast<int>(k), 1, channels);
}

double energy_at(const Spectrum& spectrum, double gamma) {
  if (spectrum.degenerate)
    fail(ErrorCode::DegenerateSpectrum,
         "layer '" + spectrum.layer_id + "' has no spectral energy");
  if (!(gamma > 0.0) || gamma > 1.0)
    fail(ErrorCode::GammaOutOfRange, "gamma must be in (0,1], got " + std::to_string(gamma));
  const int k = kept_from_gamma(gamma, static_cast<int>(spectrum.values.size()));
  return spectrum.values.head(k).sum();
}

namespace {

RecipeEntry entry_for_en(const Spectrum& s, double tau, std::vector<std::string>& warnings) {
  const int c = static_cast<int>(s.values.size());
  RecipeEntry e;
  e.layer_id = s.layer_id;
  e.channels = c;
  if (s.degenerate) {
    e.kept_count = 1;
    e.gamma = 1.0 / c;
    warnings.push_back("layer '" + s.layer_id +
                       "': degenerate spectrum, kept_count forced to 1");
    return e;
  }
  int k = c;  // full-sum shortfall below tau can only be rounding; keep all
  double cum = 0.0;
  for (int i = 0; i < c; ++i) {
    cum += s.values(i);
    if (cum >= tau) {
      k = i + 1;
      break;
    }
  }
  e.kept_count = k;
  e.gamma = static_cast<double>(k) / static_cast<double>(c);
  return e;
}

}  // namespace

Recipe recipe_en(const std::vector<Spectrum>& spectra, double tau) {
  if (spectra.empty()) fail(ErrorCode::EmptyInput, "no spectra given");
  if (!(tau > 0.0) || tau > 1.0)
    fail(ErrorCode::TauOutOfRange, "tau must be in (0,1], got " + std::to_string(tau));
  Recipe r;
  r.method = RecipeMethod::En;
  r.tau = tau;
  for (const Spectrum& s : spectra) r.entries.push_back(entry_for_en(s, tau, r.warnings));
  validate_recipe(r);
  return r;
}

Recipe recipe_en(const SpectraSet& spectra, double tau) {
  Recipe r = recipe_en(spectra.layers, tau);
  r.provenance = spectra.source;
  return r;
}

std::vector<double> energy_breakpoints(const std::vector<Spectrum>& spectra) {
  std::set<double> points;
  points.insert(1.0);
  for (const Spectrum& s : spectra) {
    if (s.degenerate) continue;
    double cum = 0.0;
    for (Eigen::Index i = 0; i < s.values.size(); ++i) {
      cum += s.values(i);
      if (cum > 0.0) points.insert(std::min(cum, 1.0));
    }
  }
  return {points.rbegin(), points.rend()};
}

Recipe recipe_en_for_budget(const std::vector<Spectrum>& spectra, const ArchSpec& arch,
                            BudgetKind kind, long long target) {
  if (spectra.empty()) fail(ErrorCode::EmptyInput, "no spectra given");
  if (target < 1) fail(ErrorCode::InfeasibleBudget, "budget target must be positive");

  for (const Spectrum& s : spectra) {
    const int idx = find_layer(arch, s.layer_id);
    if (idx < 0 || !arch.layers[idx].analyzable)
      fail(ErrorCode::LayerMismatch,
           "spectrum layer '" + s.layer_id + "' is not an analyzable layer of the arch");
    if (arch.layers[idx].filters != static_cast<int>(s.values.size()))
      fail(ErrorCode::LayerMismatch,
           "layer '" + s.layer_id + "': spectrum has " + std::to_string(s.values.size()) +
               " channels but the arch declares " + std::to_string(arch.layers[idx].filters));
  }

  long long min_cost = -1;
  for (const double bp : energy_breakpoints(spectra)) {
    Recipe r = recipe_en(spectra, bp);
    const long long cost = recipe_cost(arch, r, kind);
    if (cost <= target) {
      r.method = RecipeMethod::EnFootprint;
      r.tau = 0.0;  // lives in tau_star for this method
      r.budget_kind = kind;
      r.budget_target = target;
      r.tau_star = bp;
      return r;
    }
    min_cost = cost;  // breakpoints descend, so the last value is the floor
  }
  fail(ErrorCode::InfeasibleBudget,
       "target " + std::to_string(target) + " is below the minimal model cost of " +
           std::to_string(min_cost));
}

Recipe recipe_en_for_budget(const SpectraSet& spectra, const ArchSpec& arch, BudgetKind kind,
                            long long target) {
  Recipe r = recipe_en_for_budget(spectra.layers, arch, kind, target);
  r.provenance = spectra.source;
  return r;
}

Recipe recipe_divergence(const std::vector<Spectrum>& spectra, Divergence divergence) {
  if (divergence != Divergence::KL)
    fail(ErrorCode::InvalidParams,
         "only the KL divergence is implemented; chi-square/Wasserstein are extension points");
  if (spectra.empty()) fail(ErrorCode::EmptyInput, "no spectra given");

  Recipe r;
  r.method = RecipeMethod::KL;
  for (const Spectrum& s : spectra) {
    const int c = static_cast<int>(s.values.size());
    RecipeEntry e;
    e.layer_id = s.layer_id;
    e.channels = c;
    if (c == 1) {
      // ln(1) = 0: the mapping is undefined, and there is nothing to compress.
      e.gamma = 1.0;
      e.kept_count = 1;
    } else if (s.degenerate) {
      e.gamma = 1.0 / c;
      e.kept_count = 1;
      r.warnings.push_back("layer '" + s.layer_id +
                           "': degenerate spectrum, kept_count forced to 1");
    } else {
      const double upper = std::log(static_cast<double>(c));
      const double gamma = 1.0 - kl_to_uniform(s) / upper;
      e.kept_count = gamma > 0.0 ? kept_from_gamma(gamma, c) : 1;
      if (gamma > 0.0) {
        e.gamma = gamma;
      } else {
        e.gamma = 1.0 / c;  // keep-ratio of the single surviving filter
        r.warnings.push_back("layer '" + s.layer_id +
                             "': keep-ratio clamped up from " + std::to_string(gamma));
      }
    }
    r.entries.push_back(std::move(e));
  }
  validate_recipe(r);
  return r;
}

Recipe recipe_kl(const std::vector<Spectrum>& spectra) {
  return recipe_divergence(spectra, Divergence::KL);
}

Recipe recipe_kl(const SpectraSet& spectra) {
  Recipe r = recipe_kl(spectra.layers);
  r.provenance = spectra.source;
  return r;
}

void validate_recipe(const Recipe& recipe) {
  if (recipe.method == RecipeMethod::En && (!(recipe.tau > 0.0) || recipe.tau > 1.0))
    fail(ErrorCode::TauOutOfRange, "recipe tau out of (0,1]");
  if (recipe.method == RecipeMethod::EnFootprint && recipe.budget_target < 1)
    fail(ErrorCode::InvalidRecipe, "recipe budget target must be positive");

  std::set<std::string> ids;
  for (const RecipeEntry& e : recipe.entries) {
    if (!ids.insert(e.layer_id).second)
      fail(ErrorCode::DuplicateLayerId, "recipe lists layer '" + e.layer_id + "' twice");
    if (e.channels < 1)
      fail(ErrorCode::InvalidRecipe, "layer '" + e.layer_id + "': channels must be positive");
    if (!(e.gamma > 0.0) || e.gamma > 1.0)
      fail(ErrorCode::GammaOutOfRange,
           "layer '" + e.layer_id + "': gamma " + std::to_string(e.gamma) + " not in (0,1]");
    if (e.kept_count < 1 || e.kept_count > e.channels)
      fail(ErrorCode::InvalidRecipe, "layer '" + e.layer_id + "': kept_count out of range");
    if (e.kept_count != kept_from_gamma(e.gamma, e.channels))
      fail(ErrorCode::InvalidRecipe,
           "layer '" + e.layer_id + "': kept_count does not equal ceil(gamma*channels)");
    if (e.kept_indices) {
      if (static_cast<int>(e.kept_indices->size()) != e.kept_count)
        fail(ErrorCode::InvalidRecipe,
             "layer '" + e.layer_id + "': kept_indices length differs from kept_count");
      int prev = -1;
      for (int idx : *e.kept_indices) {
        if (idx <= prev || idx < 0 || idx >= e.channels)
          fail(ErrorCode::InvalidRecipe,
               "layer '" + e.layer_id + "': kept_indices must be sorted unique in [0,C)");
        prev = idx;
      }
    }
  }
}

std::map<std::string, int> kept_counts(const Recipe& recipe) {
  std::map<std::string, int> counts;
  for (const RecipeEntry& e : recipe.entries) counts[e.layer_id] = e.kept_count;
  return counts;
}

Recipe load_recipe(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::ParseError, "malformed recipe file: " + path.string());
  if (j.value("version", std::string()) != "pfa/1" ||
      j.value("kind", std::string()) != "recipe")
    fail(ErrorCode::ParseError, "not a pfa/1 recipe file: " + path.string());

  Recipe r;
  try {
    const json& m = j.at("method");
    const std::string name = m.at("name").get<std::string>();
    if (name == "energy") {
      r.method = RecipeMethod::En;
      r.tau = m.at("tau").get<double>();
    } else if (name == "energy_budget") {
      r.method = RecipeMethod::EnFootprint;
      const std::string kind = m.at("budget").get<std::string>();
      if (kind != "params" && kind != "flops")
        fail(ErrorCode::ParseError, "recipe budget must be params|flops");
      r.budget_kind = kind == "params" ? BudgetKind::Params : BudgetKind::Flops;
      r.budget_target = m.at("target").get<long long>();
      r.tau_star = m.at("tau_star").get<double>();
    } else if (name == "kl") {
      r.method = RecipeMethod::KL;
    } else {
      fail(ErrorCode::ParseError, "unknown recipe method: " + name);
    }
    r.provenance = j.value("provenance", std::string());
    for (const auto& w : j.value("warnings", json::array()))
      r.warnings.push_back(w.get<std::string>());
    for (const auto& le : j.at("layers")) {
      RecipeEntry e;
      e.layer_id = le.at("layer").get<std::string>();
      e.channels = le.at("channels").get<int>();
      e.gamma = le.at("gamma").get<double>();
      e.kept_count = le.at("kept_count").get<int>();
      if (le.contains("kept_indices")) {
        std::vector<int> idx;
        for (const auto& v : le.at("kept_indices")) idx.push_back(v.get<int>());
        e.kept_indices = std::move(idx);
      }
      r.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  validate_recipe(r);
  return r;
}

void save_recipe(const Recipe& recipe, const std::filesystem::path& path) {
  validate_recipe(recipe);
  json j;
  j["version"] = "pfa/1";
  j["kind"] = "recipe";
  json m;
  switch (recipe.method) {
    case RecipeMethod::En:
      m["name"] = "energy";
      m["tau"] = recipe.tau;
      break;
    case RecipeMethod::EnFootprint:
      m["name"] = "energy_budget";
      m["budget"] = recipe.budget_kind == BudgetKind::Params ? "params" : "flops";
      m["target"] = recipe.budget_target;
      m["tau_star"] = recipe.tau_star;
      break;
    case RecipeMethod::KL:
      m["name"] = "kl";
      break;
  }
  j["method"] = std::move(m);
  j["provenance"] = recipe.provenance;
  j["warnings"] = recipe.warnings;
  j["layers"] = json::array();
  for (const RecipeEntry& e : recipe.entries) {
    json le;
    le["layer"] = e.layer_id;
    le["channels"] = e.channels;
    le["gamma"] = e.gamma;
    le["kept_count"] = e.kept_count;
    if (e.kept_indices) le["kept_indices"] = *e.kept_indices;
    j["layers"].push_back(std::move(le));
  }
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace pfa
