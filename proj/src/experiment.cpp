#include "pfa/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "pfa/dump.hpp"
#include "pfa/parallel.hpp"
#include "pfa/prune.hpp"
#include "pfa/rng.hpp"
#include "pfa/selection.hpp"

namespace pfa {

namespace {

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string format_f(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

ReportRow make_row(std::string variant, std::string init, const std::vector<double>& accs,
                   long long params, long long fl, long long full_params,
                   long long full_flops) {
  ReportRow row;
  row.variant = std::move(variant);
  row.init = std::move(init);
  row.runs = static_cast<int>(accs.size());
  row.mean_acc = mean_of(accs);
  row.std_acc = std_of(accs);
  row.params = params;
  row.flops = fl;
  row.params_pct = 100.0 * static_cast<double>(params) / static_cast<double>(full_params);
  row.flops_pct = 100.0 * static_cast<double>(fl) / static_cast<double>(full_flops);
  return row;
}

std::string counts_key(const std::map<std::string, int>& counts) {
  std::string key;
  for (const auto& [id, n] : counts) key += id + ":" + std::to_string(n) + ";";
  return key;
}

// Recipe wrapper around explicit kept counts so the random baselines can ride
// the same selection/apply path as the analytic recipes. Tagged KL because
// that method carries no threshold field to satisfy.
Recipe counts_recipe(const ArchSpec& arch, const std::map<std::string, int>& counts) {
  Recipe r;
  r.method = RecipeMethod::KL;
  r.provenance = "random footprint baseline";
  for (const auto& [id, n] : counts) {
    const LayerSpec& l = arch.layers[find_layer(arch, id)];
    RecipeEntry e;
    e.layer_id = id;
    e.channels = l.filters;
    e.kept_count = n;
    e.gamma = static_cast<double>(n) / static_cast<double>(l.filters);
    r.entries.push_back(std::move(e));
  }
  return r;
}

}  // namespace

std::string variant_en(double tau) { return "pfa_en(" + format_g(tau) + ")"; }

void validate_experiment_config(const ExperimentConfig& config) {
  validate_config(config.train_cfg);
  if (config.out_dir.empty())
    fail(ErrorCode::InvalidParams, "experiment needs an output directory");
  if (config.classes < 2) fail(ErrorCode::InvalidParams, "need at least 2 classes");
  if (config.model_seeds < 1) fail(ErrorCode::InvalidParams, "model_seeds must be >= 1");
  if (config.random_trials < 1) fail(ErrorCode::InvalidParams, "random_trials must be >= 1");
  if (config.train_cfg.epochs < 1)
    fail(ErrorCode::InvalidParams, "full training needs at least one epoch");
  if (config.finetune_epochs < 1)
    fail(ErrorCode::InvalidParams, "fine-tuning needs at least one epoch");
  for (double tau : config.taus)
    if (!(tau > 0.0) || tau > 1.0)
      fail(ErrorCode::TauOutOfRange, "tau " + format_g(tau) + " outside (0,1]");
  if (config.domain_adapt &&
      (config.domain_classes < 1 || config.domain_classes >= config.classes))
    fail(ErrorCode::InvalidParams, "domain_classes must be in [1, classes)");
}

std::map<std::string, int> random_footprint(const ArchSpec& arch,
                                            const std::vector<std::string>& layers,
                                            long long target, std::uint64_t seed) {
  if (target < 1) fail(ErrorCode::InvalidParams, "footprint target must be positive");
  std::vector<int> widths;
  for (const std::string& id : layers) {
    const int idx = find_layer(arch, id);
    if (idx < 0 || !arch.layers[idx].analyzable)
      fail(ErrorCode::LayerMismatch, "'" + id + "' is not an analyzable layer of the arch");
    widths.push_back(arch.layers[idx].filters);
  }

  auto params_of = [&](const std::map<std::string, int>& counts) {
    return footprint(pruned_arch(arch, counts));
  };
  const long long band = static_cast<long long>(0.02 * static_cast<double>(target));

  Rng rng(seed);
  std::map<std::string, int> best;
  long long best_diff = -1;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::map<std::string, int> counts;
    for (std::size_t i = 0; i < layers.size(); ++i)
      counts[layers[i]] = static_cast<int>(rng.uniform_int(1, widths[i]));
    const long long diff = std::llabs(params_of(counts) - target);
    if (diff <= band) return counts;
    if (best_diff < 0 || diff < best_diff) {
      best_diff = diff;
      best = std::move(counts);
    }
  }

  // Sampling missed the band; walk the closest draw in by single-filter moves,
  // always taking whichever move lands nearest the target.
  for (int step = 0; step < 100000; ++step) {
    long long here = std::llabs(params_of(best) - target);
    if (here <= band) return best;
    std::map<std::string, int> winner;
    long long winner_diff = here;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (int delta : {-1, 1}) {
        const int next = best.at(layers[i]) + delta;
        if (next < 1 || next > widths[i]) continue;
        std::map<std::string, int> candidate = best;
        candidate[layers[i]] = next;
        const long long diff = std::llabs(params_of(candidate) - target);
        if (diff < winner_diff) {
          winner_diff = diff;
          winner = std::move(candidate);
        }
      }
    }
    if (winner.empty()) break;  // no move improves; as close as the grid allows
    best = std::move(winner);
  }
  if (std::llabs(params_of(best) - target) > band)
    fail(ErrorCode::InvalidParams,
         "no kept-count assignment lands within 2% of " + std::to_string(target) +
             " parameters");
  return best;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  validate_experiment_config(config);
  std::filesystem::create_directories(config.out_dir);
  const int threads = thread_budget(config.threads);

  const ArchSpec arch = simple_cnn_mini(config.classes, config.image_shape[0],
                                        config.image_shape[1], config.image_shape[2]);
  const SynthDataset train_set = generate_dataset(config.seed, config.classes,
                                                  config.train_samples,
                                                  config.image_shape, "train");
  const SynthDataset test_set = generate_dataset(config.seed, config.classes,
                                                 config.test_samples,
                                                 config.image_shape, "test");

  ExperimentReport report;
  report.full_params = footprint(arch);
  report.full_flops = flops(arch);

  // --- full model, S seeds; the best one feeds every downstream arm --------
  const int s_count = config.model_seeds;
  std::vector<TrainResult> full_runs(s_count);
  parallel_for(s_count, threads, [&](std::size_t i) {
    TrainConfig c = config.train_cfg;
    c.seed = derive_seed(config.seed, "full-" + std::to_string(i));
    full_runs[i] = train(arch, train_set, test_set, c);
  });
  std::size_t best_i = 0;
  std::vector<double> full_accs;
  for (std::size_t i = 0; i < full_runs.size(); ++i) {
    full_accs.push_back(full_runs[i].test_accuracy);
    if (full_runs[i].test_accuracy > full_runs[best_i].test_accuracy) best_i = i;
  }
  const WeightBundle& best_weights = full_runs[best_i].weights;
  report.full_accuracy = full_runs[best_i].test_accuracy;
  report.rows.push_back(make_row("full", "random", full_accs, report.full_params,
                                 report.full_flops, report.full_params, report.full_flops));

  // --- responses -> spectra -> recipes -------------------------------------
  // The classifier conv is excluded: its width is the label count, not a
  // compressible filter bank.
  std::vector<std::string> dump_layers = analyzable_layers(arch);
  std::erase(dump_layers, "cls");

  const ActivationDump dump = dump_activations(arch, best_weights, train_set,
                                               config.out_dir / "activations.json",
                                               dump_layers);
  const SpectraSet spectra = analyze_dump(dump, config.pooling, threads);
  save_spectra(spectra, config.out_dir / "spectra.json");

  std::vector<std::pair<std::string, Recipe>> variants;
  for (double tau : config.taus) {
    Recipe r = attach_selection(recipe_en(spectra, tau), dump, config.pooling, threads);
    save_recipe(r, config.out_dir / ("recipe_en_" + format_g(tau) + ".json"));
    variants.emplace_back(variant_en(tau), std::move(r));
  }
  {
    Recipe r = attach_selection(recipe_kl(spectra), dump, config.pooling, threads);
    save_recipe(r, config.out_dir / "recipe_kl.json");
    variants.emplace_back("pfa_kl", std::move(r));
  }
  for (const auto& [name, recipe] : variants) report.recipes[name] = recipe;

  // --- fine-tune every recipe under both initializations -------------------
  struct PrunedVariant {
    std::string name;
    ArchSpec arch;
    WeightBundle warm;
    long long params = 0, flops = 0;
  };
  std::vector<PrunedVariant> pruned;
  for (const auto& [name, recipe] : variants) {
    auto [narrow_arch, warm] = apply_recipe(arch, best_weights, recipe);
    PrunedVariant pv;
    pv.name = name;
    pv.params = footprint(narrow_arch);
    pv.flops = flops(narrow_arch);
    pv.arch = std::move(narrow_arch);
    pv.warm = std::move(warm);
    pruned.push_back(std::move(pv));
  }

  TrainConfig ft_cfg = config.train_cfg;
  ft_cfg.epochs = config.finetune_epochs;

  std::vector<std::vector<double>> acc_fs(pruned.size(), std::vector<double>(s_count));
  std::vector<std::vector<double>> acc_rd(pruned.size(), std::vector<double>(s_count));
  parallel_for(pruned.size() * 2 * s_count, threads, [&](std::size_t cell) {
    const std::size_t v = cell / (2 * s_count);
    const std::size_t rest = cell % (2 * s_count);
    const bool warm = rest < static_cast<std::size_t>(s_count);
    const std::size_t s = rest % s_count;
    const PrunedVariant& pv = pruned[v];
    TrainConfig c = ft_cfg;
    c.seed = derive_seed(config.seed, "ft-" + pv.name + (warm ? "-fs-" : "-rand-") +
                                          std::to_string(s));
    const TrainResult r =
        train(pv.arch, train_set, test_set, c, warm ? &pv.warm : nullptr);
    (warm ? acc_fs : acc_rd)[v][s] = r.test_accuracy;
  });
  for (std::size_t v = 0; v < pruned.size(); ++v) {
    report.rows.push_back(make_row(pruned[v].name, "filter_selection", acc_fs[v],
                                   pruned[v].params, pruned[v].flops, report.full_params,
                                   report.full_flops));
    report.rows.push_back(make_row(pruned[v].name, "random", acc_rd[v], pruned[v].params,
                                   pruned[v].flops, report.full_params,
                                   report.full_flops));
  }

  // --- random-pruning baselines at each distinct footprint -----------------
  struct Baseline {
    std::string source;
    long long target = 0;
  };
  std::vector<Baseline> baselines;
  {
    std::set<std::string> seen;
    for (std::size_t v = 0; v < pruned.size(); ++v)
      if (seen.insert(counts_key(kept_counts(variants[v].second))).second)
        baselines.push_back({pruned[v].name, pruned[v].params});
  }

  const int r_count = config.random_trials;
  std::vector<std::vector<RandomTrialInfo>> trials(baselines.size(),
                                                   std::vector<RandomTrialInfo>(r_count));
  parallel_for(baselines.size() * r_count, threads, [&](std::size_t cell) {
    const std::size_t b = cell / r_count;
    const int t = static_cast<int>(cell % r_count);
    const Baseline& base = baselines[b];
    const std::string label = base.source + "-" + std::to_string(t);
    const std::map<std::string, int> counts = random_footprint(
        arch, dump_layers, base.target, derive_seed(config.seed, "rand-counts-" + label));

    RandomTrialInfo info;
    info.variant = base.source;
    info.trial = t;

    Recipe r = attach_selection(counts_recipe(arch, counts), dump, config.pooling, 1);
    auto [narrow_arch, warm] = apply_recipe(arch, best_weights, r);
    info.params = footprint(narrow_arch);

    TrainConfig c = ft_cfg;
    c.seed = derive_seed(config.seed, "rand-ft-" + label + "-fs");
    info.acc_selection = train(narrow_arch, train_set, test_set, c, &warm).test_accuracy;
    c.seed = derive_seed(config.seed, "rand-ft-" + label + "-rand");
    info.acc_random = train(narrow_arch, train_set, test_set, c).test_accuracy;
    trials[b][t] = std::move(info);
  });

  for (std::size_t b = 0; b < baselines.size(); ++b) {
    std::vector<double> fs, rd;
    long long params_sum = 0;
    for (const RandomTrialInfo& info : trials[b]) {
      fs.push_back(info.acc_selection);
      rd.push_back(info.acc_random);
      params_sum += info.params;
      report.random_trials.push_back(info);
    }
    const long long mean_params = params_sum / r_count;
    // Per-trial FLOPs fluctuate with the drawn counts; the row reports the
    // matched recipe's FLOPs as the footprint-level figure.
    long long fl = 0;
    for (const PrunedVariant& pv : pruned)
      if (pv.name == baselines[b].source) fl = pv.flops;
    const std::string name = "random(" + baselines[b].source + ")";
    report.rows.push_back(make_row(name, "filter_selection", fs, mean_params, fl,
                                   report.full_params, report.full_flops));
    report.rows.push_back(make_row(name, "random", rd, mean_params, fl,
                                   report.full_params, report.full_flops));
  }

  // --- optional domain arm: recipe from a class-subset dump ----------------
  if (config.domain_adapt) {
    const SynthDataset sub_train = class_subset(train_set, config.domain_classes);
    const SynthDataset sub_test = class_subset(test_set, config.domain_classes);
    const ActivationDump sub_dump =
        dump_activations(arch, best_weights, sub_train,
                         config.out_dir / "activations_domain.json", dump_layers);
    Recipe dr = attach_selection(recipe_kl(analyze_dump(sub_dump, config.pooling, threads)),
                                 sub_dump, config.pooling, threads);
    save_recipe(dr, config.out_dir / "recipe_kl_domain.json");

    DomainReport domain;
    const Recipe& full_kl = report.recipes.at("pfa_kl");
    for (const RecipeEntry& e : dr.entries)
      for (const RecipeEntry& f : full_kl.entries)
        if (e.layer_id == f.layer_id && e.kept_count != f.kept_count)
          ++domain.differing_layers;

    auto [narrow_arch, warm] = apply_recipe(arch, best_weights, dr);
    std::vector<double> accs(s_count);
    parallel_for(s_count, threads, [&](std::size_t s) {
      TrainConfig c = ft_cfg;
      c.seed = derive_seed(config.seed, "domain-fs-" + std::to_string(s));
      accs[s] = train(narrow_arch, sub_train, sub_test, c, &warm).test_accuracy;
    });
    report.rows.push_back(make_row("pfa_kl_domain", "filter_selection", accs,
                                   footprint(narrow_arch), flops(narrow_arch),
                                   report.full_params, report.full_flops));
    domain.subset_accuracy = mean_of(accs);
    domain.recipe = std::move(dr);
    report.domain = std::move(domain);
  }

  // --- artifacts ------------------------------------------------------------
  std::ostringstream csv;
  csv << "variant,init,seeds,mean_acc,std_acc,params,flops,params_pct,flops_pct\n";
  for (const ReportRow& row : report.rows)
    csv << row.variant << ',' << row.init << ',' << row.runs << ','
        << format_f(row.mean_acc, 6) << ',' << format_f(row.std_acc, 6) << ','
        << row.params << ',' << row.flops << ',' << format_f(row.params_pct, 4) << ','
        << format_f(row.flops_pct, 4) << '\n';
  report.csv_path = config.out_dir / "report.csv";
  write_file_atomic(report.csv_path, csv.str());

  std::ostringstream text;
  text << "Structured pruning study, seed " << config.seed << "\n";
  text << "Full model: " << report.full_params << " params, " << report.full_flops
       << " flops; best test accuracy " << format_f(report.full_accuracy, 4) << " (mean "
       << format_f(report.rows[0].mean_acc, 4) << " +/- "
       << format_f(report.rows[0].std_acc, 4) << " over " << s_count << " seeds)\n\n";
  for (const ReportRow& row : report.rows) {
    if (row.variant == "full") continue;
    text << row.variant << " [" << row.init << "]: " << format_f(row.mean_acc, 4)
         << " +/- " << format_f(row.std_acc, 4) << " over " << row.runs << " runs at "
         << format_f(row.params_pct, 2) << "% params, " << format_f(row.flops_pct, 2)
         << "% flops\n";
  }
  if (report.domain) {
    text << "\nDomain arm (" << config.domain_classes << " of " << config.classes
         << " classes): recipe differs from the full-data recipe in "
         << report.domain->differing_layers << " layer(s); fine-tuned subset accuracy "
         << format_f(report.domain->subset_accuracy, 4) << "\n";
  }
  report.summary_path = config.out_dir / "summary.txt";
  write_file_atomic(report.summary_path, text.str());

  return report;
}

}  // namespace pfa
