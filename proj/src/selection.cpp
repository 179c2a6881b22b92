#include "pfa/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pfa/parallel.hpp"

namespace pfa {

SelectionResult select_filters(const ResponseMatrix& responses, int kept_count) {
  const int m = static_cast<int>(responses.data.rows());
  const int c = static_cast<int>(responses.data.cols());
  if (kept_count < 1 || kept_count > c)
    fail(ErrorCode::InvalidCount,
         "kept_count " + std::to_string(kept_count) + " out of [1," + std::to_string(c) + "]");
  if (m < 2)
    fail(ErrorCode::TooFewSamples, "layer '" + responses.layer_id + "': need at least 2 samples");
  if (!responses.data.allFinite())
    fail(ErrorCode::InvalidInput, "layer '" + responses.layer_id + "': non-finite responses");

  const Eigen::MatrixXd centered =
      responses.data.rowwise() - responses.data.colwise().mean();
  Eigen::VectorXd variance(c);
  std::vector<bool> dead(c);
  for (int i = 0; i < c; ++i) {
    variance(i) = centered.col(i).squaredNorm();
    const double mean = responses.data.col(i).mean();
    dead[i] = variance(i) <= 1e-24 * (1.0 + mean * mean);
  }

  // |Pearson r| between live columns; dead columns correlate with nothing.
  Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(c, c);
  for (int i = 0; i < c; ++i) {
    for (int j = i + 1; j < c; ++j) {
      if (dead[i] || dead[j]) continue;
      const double r =
          centered.col(i).dot(centered.col(j)) / std::sqrt(variance(i) * variance(j));
      corr(i, j) = corr(j, i) = std::abs(r);
    }
  }

  std::vector<bool> alive(c, true);
  SelectionResult result;
  result.layer_id = responses.layer_id;

  for (int removed = 0; removed < c - kept_count; ++removed) {
    int pick = -1;
    double pick_norm = -1.0, pick_peak = -1.0;
    for (int i = 0; i < c; ++i) {
      if (!alive[i]) continue;
      double norm, peak;
      if (dead[i]) {
        norm = std::numeric_limits<double>::infinity();
        peak = 0.0;
      } else {
        norm = 0.0;
        peak = 0.0;
        for (int j = 0; j < c; ++j) {
          if (!alive[j] || j == i) continue;
          norm += corr(i, j);
          peak = std::max(peak, corr(i, j));
        }
      }
      if (norm > pick_norm || (norm == pick_norm && peak > pick_peak)) {
        pick = i;
        pick_norm = norm;
        pick_peak = peak;
      }
    }
    alive[pick] = false;
    result.removed_order.push_back(pick);
  }

  for (int i = 0; i < c; ++i)
    if (alive[i]) result.kept_indices.push_back(i);
  return result;
}

Recipe attach_selection(const Recipe& recipe, const ActivationDump& dump, PoolMode mode,
                        int threads) {
  Recipe out = recipe;
  parallel_for(out.entries.size(), thread_budget(threads), [&](std::size_t i) {
    RecipeEntry& e = out.entries[i];
    const LayerDumpEntry* entry = find_entry(dump, e.layer_id);
    if (!entry)
      fail(ErrorCode::LayerMismatch,
           "recipe layer '" + e.layer_id + "' is missing from the dump");
    const ResponseMatrix r = pool_responses(e.layer_id, load_dump_tensor(*entry), mode);
    if (static_cast<int>(r.data.cols()) != e.channels)
      fail(ErrorCode::LayerMismatch,
           "layer '" + e.layer_id + "': recipe assumes " + std::to_string(e.channels) +
               " channels but the dump holds " + std::to_string(r.data.cols()));
    e.kept_indices = select_filters(r, e.kept_count).kept_indices;
  });
  return out;
}

}  // namespace pfa
