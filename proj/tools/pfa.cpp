// pfa — structured-pruning toolkit front-end.
//
// Subcommands compose the library: analyze (dump -> spectra), recipe
// (spectra -> compression plan), select (pick concrete filters), apply
// (slice weights), cost (params/FLOPs accounting), demo (end-to-end
// experiment). Exit codes: 0 success, 1 usage, 2 validation, 3 numerical.

#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfa/arch.hpp"
#include "pfa/dump.hpp"
#include "pfa/error.hpp"
#include "pfa/experiment.hpp"
#include "pfa/prune.hpp"
#include "pfa/recipes.hpp"
#include "pfa/selection.hpp"
#include "pfa/spectral.hpp"
#include "pfa/tensor.hpp"
#include "pfa/weights.hpp"

namespace {

pfa::PoolMode parse_pool(const std::string& name) {
  return name == "avg" ? pfa::PoolMode::Avg : pfa::PoolMode::Max;
}

std::vector<int> parse_shape(const std::string& text) {
  std::vector<int> dims;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, 'x')) {
    std::size_t pos = 0;
    const int v = std::stoi(token, &pos);
    if (pos != token.size() || v < 1) throw std::invalid_argument(text);
    dims.push_back(v);
  }
  if (dims.empty() || dims.size() > 3) throw std::invalid_argument(text);
  return dims;
}

std::string method_label(const pfa::Recipe& r) {
  switch (r.method) {
    case pfa::RecipeMethod::En:
      return "energy(tau=" + std::to_string(r.tau) + ")";
    case pfa::RecipeMethod::EnFootprint:
      return "energy_budget(tau*=" + std::to_string(r.tau_star) + ")";
    case pfa::RecipeMethod::KL:
      return "kl";
  }
  return "?";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfa: spectral filter-pruning toolkit"};
  app.require_subcommand(1);

  // --- analyze --------------------------------------------------------------
  auto* analyze = app.add_subcommand("analyze", "compute eigenspectra from an activation dump");
  std::string an_dump, an_out, an_pool = "max";
  bool an_summary = false;
  analyze->add_option("--dump", an_dump, "activation dump manifest")->required();
  analyze->add_option("--out", an_out, "output spectra file")->required();
  analyze->add_option("--pool", an_pool, "spatial pooling for 4-d responses")
      ->check(CLI::IsMember({"max", "avg"}));
  analyze->add_flag("--summary", an_summary, "print a prose summary");

  // --- recipe ---------------------------------------------------------------
  auto* recipe = app.add_subcommand("recipe", "derive per-layer compression factors");
  std::string rc_spectra, rc_arch, rc_out;
  double rc_energy = 0.0;
  bool rc_kl = false, rc_summary = false;
  long long rc_params = 0, rc_flops = 0;
  recipe->add_option("--spectra", rc_spectra, "spectra file")->required();
  recipe->add_option("--energy", rc_energy, "keep spectral energy >= tau");
  recipe->add_flag("--kl", rc_kl, "parameter-free KL rule");
  recipe->add_option("--target-params", rc_params, "largest tau fitting a parameter budget");
  recipe->add_option("--target-flops", rc_flops, "largest tau fitting a FLOPs budget");
  recipe->add_option("--arch", rc_arch, "architecture file (budget methods)");
  recipe->add_option("--out", rc_out, "output recipe file")->required();
  recipe->add_flag("--summary", rc_summary, "print a prose summary");

  // --- select ---------------------------------------------------------------
  auto* select = app.add_subcommand("select", "choose concrete filters by correlation");
  std::string se_dump, se_recipe, se_out, se_pool = "max";
  bool se_summary = false;
  select->add_option("--dump", se_dump, "activation dump manifest")->required();
  select->add_option("--recipe", se_recipe, "recipe file")->required();
  select->add_option("--out", se_out, "output recipe file with kept_indices")->required();
  select->add_option("--pool", se_pool, "spatial pooling for 4-d responses")
      ->check(CLI::IsMember({"max", "avg"}));
  select->add_flag("--summary", se_summary, "print a prose summary");

  // --- apply ----------------------------------------------------------------
  auto* apply = app.add_subcommand("apply", "slice an architecture and weights by a recipe");
  std::string ap_arch, ap_weights, ap_recipe, ap_prefix;
  bool ap_summary = false;
  apply->add_option("--arch", ap_arch, "architecture file")->required();
  apply->add_option("--weights", ap_weights, "weight manifest")->required();
  apply->add_option("--recipe", ap_recipe, "recipe with kept_indices")->required();
  apply->add_option("--out-prefix", ap_prefix, "prefix for .arch.json/.weights.json")->required();
  apply->add_flag("--summary", ap_summary, "print a prose summary");

  // --- cost -----------------------------------------------------------------
  auto* cost = app.add_subcommand("cost", "parameter and FLOP accounting");
  std::string co_arch, co_shape;
  bool co_summary = false;
  cost->add_option("--arch", co_arch, "architecture file")->required();
  cost->add_option("--input-shape", co_shape, "override input shape, e.g. 32x32x3");
  cost->add_flag("--summary", co_summary, "print a per-layer table");

  // --- demo -----------------------------------------------------------------
  auto* demo = app.add_subcommand("demo", "end-to-end compression study on a small CNN");
  pfa::ExperimentConfig cfg;
  std::string de_out, de_pool = "max";
  bool de_summary = false, de_domain = false;
  std::vector<double> de_taus;
  demo->add_option("--seed", cfg.seed, "master seed");
  demo->add_option("--out-dir", de_out, "artifact directory")->required();
  demo->add_flag("--domain-adapt", de_domain, "extra recipe from a class-subset dump");
  demo->add_option("--taus", de_taus, "energy thresholds")->delimiter(',');
  demo->add_option("--seeds", cfg.model_seeds, "trainings per variant");
  demo->add_option("--trials", cfg.random_trials, "random-pruning draws per footprint");
  demo->add_option("--epochs", cfg.train_cfg.epochs, "full-model epochs");
  demo->add_option("--lr", cfg.train_cfg.lr, "SGD learning rate");
  demo->add_option("--ft-epochs", cfg.finetune_epochs, "fine-tune epochs");
  demo->add_option("--train-n", cfg.train_samples, "training samples");
  demo->add_option("--test-n", cfg.test_samples, "test samples");
  demo->add_option("--classes", cfg.classes, "dataset classes");
  demo->add_option("--threads", cfg.threads, "worker threads (0 = auto)");
  demo->add_option("--pool", de_pool, "spatial pooling")->check(CLI::IsMember({"max", "avg"}));
  demo->add_flag("--summary", de_summary, "print the study summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (analyze->parsed()) {
      const pfa::ActivationDump dump = pfa::load_dump(an_dump);
      const pfa::SpectraSet spectra = pfa::analyze_dump(dump, parse_pool(an_pool));
      pfa::save_spectra(spectra, an_out);
      if (an_summary) {
        std::cout << "spectra for " << spectra.layers.size() << " layer(s) -> " << an_out
                  << "\n";
        for (const pfa::Spectrum& s : spectra.layers)
          std::cout << "  " << s.layer_id << ": " << s.values.size() << " channels"
                    << (s.degenerate
                            ? std::string(", degenerate")
                            : ", kl_to_uniform=" + std::to_string(pfa::kl_to_uniform(s)))
                    << "\n";
      }
      return 0;
    }

    if (recipe->parsed()) {
      const int methods = (recipe->count("--energy") ? 1 : 0) + (rc_kl ? 1 : 0) +
                          (recipe->count("--target-params") ? 1 : 0) +
                          (recipe->count("--target-flops") ? 1 : 0);
      if (methods != 1) {
        std::cerr << "recipe: exactly one of --energy/--kl/--target-params/--target-flops\n";
        return 1;
      }
      const bool budget = recipe->count("--target-params") || recipe->count("--target-flops");
      if (budget && rc_arch.empty()) {
        std::cerr << "recipe: budget methods need --arch\n";
        return 1;
      }
      const pfa::SpectraSet spectra = pfa::load_spectra(rc_spectra);
      pfa::Recipe r;
      if (recipe->count("--energy")) {
        r = pfa::recipe_en(spectra, rc_energy);
      } else if (rc_kl) {
        r = pfa::recipe_kl(spectra);
      } else {
        const pfa::ArchSpec arch = pfa::load_arch(rc_arch);
        r = recipe->count("--target-params")
                ? pfa::recipe_en_for_budget(spectra, arch, pfa::BudgetKind::Params, rc_params)
                : pfa::recipe_en_for_budget(spectra, arch, pfa::BudgetKind::Flops, rc_flops);
      }
      pfa::save_recipe(r, rc_out);
      for (const std::string& w : r.warnings) std::cerr << "warning: " << w << "\n";
      if (rc_summary) {
        std::cout << "method " << method_label(r) << " -> " << rc_out << "\n";
        for (const pfa::RecipeEntry& e : r.entries)
          std::cout << "  " << e.layer_id << ": keep " << e.kept_count << "/" << e.channels
                    << " (gamma=" << e.gamma << ")\n";
      }
      return 0;
    }

    if (select->parsed()) {
      const pfa::ActivationDump dump = pfa::load_dump(se_dump);
      const pfa::Recipe r =
          pfa::attach_selection(pfa::load_recipe(se_recipe), dump, parse_pool(se_pool));
      pfa::save_recipe(r, se_out);
      if (se_summary) {
        std::cout << "kept_indices attached for " << r.entries.size() << " layer(s) -> "
                  << se_out << "\n";
      }
      return 0;
    }

    if (apply->parsed()) {
      const pfa::ArchSpec arch = pfa::load_arch(ap_arch);
      const pfa::WeightBundle weights = pfa::load_weights(ap_weights);
      const pfa::Recipe r = pfa::load_recipe(ap_recipe);
      const auto [narrow_arch, narrow_weights] = pfa::apply_recipe(arch, weights, r);
      pfa::save_arch(narrow_arch, ap_prefix + ".arch.json");
      pfa::save_weights(narrow_weights, ap_prefix + ".weights.json");
      if (ap_summary) {
        std::cout << "params " << pfa::footprint(arch) << " -> " << pfa::footprint(narrow_arch)
                  << ", flops " << pfa::flops(arch) << " -> " << pfa::flops(narrow_arch)
                  << "\n";
      }
      return 0;
    }

    if (cost->parsed()) {
      pfa::ArchSpec arch = pfa::load_arch(co_arch);
      if (!co_shape.empty()) {
        try {
          arch.input_shape = parse_shape(co_shape);
        } catch (const std::exception&) {
          std::cerr << "cost: --input-shape expects dims like 32x32x3\n";
          return 1;
        }
        pfa::validate_arch(arch);
      }
      const pfa::CostReport report = pfa::cost_report(arch);
      std::cout << "{\"params\": " << report.params << ", \"flops\": " << report.flops
                << "}\n";
      if (co_summary) {
        for (const pfa::LayerCost& l : report.per_layer)
          std::printf("  %-16s %10lld params %14lld flops\n", l.id.c_str(), l.params,
                      l.flops);
      }
      return 0;
    }

    if (demo->parsed()) {
      cfg.out_dir = de_out;
      cfg.domain_adapt = de_domain;
      cfg.pooling = parse_pool(de_pool);
      if (!de_taus.empty()) cfg.taus = de_taus;
      const pfa::ExperimentReport report = pfa::run_experiment(cfg);
      std::cout << "report: " << report.csv_path.string() << "\n";
      std::cout << "summary: " << report.summary_path.string() << "\n";
      if (de_summary) std::cout << pfa::read_text_file(report.summary_path);
      return 0;
    }
  } catch (const pfa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pfa::Error::is_numerical(e.code()) ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
