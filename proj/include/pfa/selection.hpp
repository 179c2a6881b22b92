#pragma once

#include <string>
#include <vector>

#include "pfa/dump.hpp"
#include "pfa/recipes.hpp"
#include "pfa/spectral.hpp"

namespace pfa {

struct SelectionResult {
  std::string layer_id;
  std::vector<int> kept_indices;   // sorted ascending
  std::vector<int> removed_order;  // removal sequence, most redundant first
};

// Greedy filter selection: repeatedly drop the column whose Pearson
// correlation row (|r|, self excluded) has the largest l1-norm, until
// kept_count columns remain. Ties go to the column with the largest single
// |r|, then to the lowest index. Zero-variance columns carry no information
// and are removed first.
SelectionResult select_filters(const ResponseMatrix& responses, int kept_count);

// Runs select_filters for every recipe entry against the dump's responses and
// returns the recipe with kept_indices filled in.
Recipe attach_selection(const Recipe& recipe, const ActivationDump& dump,
                        PoolMode mode = PoolMode::Max, int threads = 0);

}  // namespace pfa
