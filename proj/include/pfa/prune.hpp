#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pfa/arch.hpp"
#include "pfa/recipes.hpp"
#include "pfa/weights.hpp"

namespace pfa {

// Original-index channel selections implied by pruning the named layers,
// propagated through the graph: channel-preserving layers inherit their
// input's selection, padding-mode adds pass the larger branch through, and
// projection convs are sliced in lock-step with the conv ending the block
// they bridge.
struct SlicePlan {
  std::vector<std::vector<int>> in_sel;   // per layer, main-input channel indices kept
  std::vector<std::vector<int>> out_sel;  // per layer, output channel indices kept
};

SlicePlan plan_slices(const ArchSpec& arch,
                      const std::map<std::string, std::vector<int>>& kept);

// Architecture with the given layers narrowed to `kept_counts` output
// channels (prefix selections; counts are all the cost model needs). This is
// the single source of truth for pruned-model cost.
ArchSpec pruned_arch(const ArchSpec& arch, const std::map<std::string, int>& kept_counts);

// Cost of `arch` after applying `recipe`, in params or FLOPs.
long long recipe_cost(const ArchSpec& arch, const Recipe& recipe, BudgetKind kind);

// Slices weights to the recipe's kept_indices: output axes of pruned layers,
// input axes of their consumers, and batchnorm parameter vectors, with
// residual padding/projection handled as in plan_slices.
std::pair<ArchSpec, WeightBundle> apply_recipe(const ArchSpec& arch,
                                               const WeightBundle& weights,
                                               const Recipe& recipe);

}  // namespace pfa
