#include "pfa/prune.hpp"

#include <algorithm>
#include <numeric>

namespace pfa {

namespace {

std::vector<int> identity_sel(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// The conv/dense layer whose output reaches `start` through channel-preserving
// layers; this is the layer a projection conv must mirror.
int block_output_layer(const ArchSpec& arch, const std::vector<int>& main_in, int start) {
  int j = start;
  while (j >= 0) {
    const LayerKind k = arch.layers[j].kind;
    if (k == LayerKind::Conv2d || k == LayerKind::Dense) return j;
    if (k == LayerKind::BatchNorm || k == LayerKind::Relu || k == LayerKind::MaxPool ||
        k == LayerKind::GlobalAvgPool) {
      j = main_in[j];
      continue;
    }
    break;  // add_skip or anything else: no single mirror source
  }
  return -1;
}

template <typename T>
NdArray<T> gather_axis(const NdArray<T>& a, std::size_t axis, const std::vector<int>& idx) {
  std::vector<std::size_t> out_shape = a.shape;
  out_shape[axis] = idx.size();
  NdArray<T> out(out_shape);

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape[i];
  for (std::size_t i = axis + 1; i < a.shape.size(); ++i) inner *= a.shape[i];

  const std::size_t in_stride = a.shape[axis] * inner;
  const std::size_t out_stride = idx.size() * inner;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(a.data.begin() + o * in_stride + idx[k] * inner, inner,
                  out.data.begin() + o * out_stride + k * inner);
  return out;
}

TensorData gather_tensor(const TensorData& t, std::size_t axis, const std::vector<int>& idx) {
  return std::visit([&](const auto& a) -> TensorData { return gather_axis(a, axis, idx); }, t);
}

}  // namespace

SlicePlan plan_slices(const ArchSpec& arch,
                      const std::map<std::string, std::vector<int>>& kept) {
  validate_arch(arch);
  const std::vector<int> main_in = main_inputs(arch);
  const std::vector<int> skip_in = skip_inputs(arch);
  const std::size_t n = arch.layers.size();

  // Projection convs are not analyzed on their own: they mirror the selection
  // of the conv that ends the block their add combines.
  std::vector<const std::vector<int>*> mirror(n, nullptr);
  std::vector<std::vector<int>> mirror_storage(n);
  for (std::size_t i = 0; i < n; ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.kind != LayerKind::AddSkip || l.skip_mode != SkipMode::Projection) continue;
    const int proj = skip_in[i];
    const int source = block_output_layer(arch, main_in, main_in[i]);
    if (source < 0)
      fail(ErrorCode::ShapeError,
           "projection add_skip '" + l.id + "': block must end in a conv or dense layer");
    const LayerSpec& src = arch.layers[source];
    if (arch.layers[proj].filters != src.filters)
      fail(ErrorCode::ShapeError,
           "projection conv '" + arch.layers[proj].id + "' and block output '" + src.id +
               "' disagree on channel count");
    auto it = kept.find(src.id);
    mirror_storage[proj] = it != kept.end() ? it->second : identity_sel(src.filters);
    mirror[proj] = &mirror_storage[proj];
  }

  SlicePlan plan;
  plan.in_sel.resize(n);
  plan.out_sel.resize(n);

  const std::vector<int> input_sel = identity_sel(arch.input_shape.back());
  auto sel_at = [&](int idx) -> const std::vector<int>& {
    return idx < 0 ? input_sel : plan.out_sel[idx];
  };

  for (std::size_t i = 0; i < n; ++i) {
    const LayerSpec& l = arch.layers[i];
    plan.in_sel[i] = sel_at(main_in[i]);
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Dense: {
        auto it = kept.find(l.id);
        if (mirror[i]) {
          plan.out_sel[i] = *mirror[i];
        } else if (it != kept.end()) {
          plan.out_sel[i] = it->second;
        } else {
          plan.out_sel[i] = identity_sel(l.filters);
        }
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
      case LayerKind::MaxPool:
      case LayerKind::GlobalAvgPool:
        plan.out_sel[i] = plan.in_sel[i];
        break;
      case LayerKind::AddSkip: {
        const std::vector<int>& main_sel = plan.in_sel[i];
        const std::vector<int>& skip_sel = sel_at(skip_in[i]);
        if (l.skip_mode == SkipMode::Projection) {
          if (main_sel != skip_sel)
            fail(ErrorCode::ShapeError,
                 "projection add_skip '" + l.id + "': branch selections diverged");
          plan.out_sel[i] = main_sel;
        } else {
          // Padding mode: the smaller branch is zero-filled to the larger
          // one, whose channel identities flow downstream.
          plan.out_sel[i] = main_sel.size() >= skip_sel.size() ? main_sel : skip_sel;
        }
        break;
      }
    }
  }
  return plan;
}

namespace {

ArchSpec arch_from_plan(const ArchSpec& arch, const SlicePlan& plan) {
  ArchSpec out = arch;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Dense)
      l.filters = static_cast<int>(plan.out_sel[i].size());
  }
  infer_shapes(out);  // the narrowed graph must still shape-check
  return out;
}

std::map<std::string, std::vector<int>> prefix_selections(
    const ArchSpec& arch, const std::map<std::string, int>& kept_counts) {
  std::map<std::string, std::vector<int>> kept;
  for (const auto& [id, count] : kept_counts) {
    const int idx = find_layer(arch, id);
    if (idx < 0 || !arch.layers[idx].analyzable)
      fail(ErrorCode::LayerMismatch, "'" + id + "' is not an analyzable layer of the arch");
    if (count < 1 || count > arch.layers[idx].filters)
      fail(ErrorCode::InvalidCount,
           "layer '" + id + "': kept count " + std::to_string(count) + " out of [1," +
               std::to_string(arch.layers[idx].filters) + "]");
    kept[id] = identity_sel(count);
  }
  return kept;
}

}  // namespace

ArchSpec pruned_arch(const ArchSpec& arch, const std::map<std::string, int>& kept_counts) {
  return arch_from_plan(arch, plan_slices(arch, prefix_selections(arch, kept_counts)));
}

long long recipe_cost(const ArchSpec& arch, const Recipe& recipe, BudgetKind kind) {
  for (const RecipeEntry& e : recipe.entries) {
    const int idx = find_layer(arch, e.layer_id);
    if (idx >= 0 && arch.layers[idx].filters != e.channels)
      fail(ErrorCode::LayerMismatch,
           "layer '" + e.layer_id + "': recipe assumes " + std::to_string(e.channels) +
               " channels but the arch declares " + std::to_string(arch.layers[idx].filters));
  }
  const ArchSpec narrowed = pruned_arch(arch, kept_counts(recipe));
  return kind == BudgetKind::Params ? footprint(narrowed) : flops(narrowed);
}

std::pair<ArchSpec, WeightBundle> apply_recipe(const ArchSpec& arch,
                                               const WeightBundle& weights,
                                               const Recipe& recipe) {
  validate_recipe(recipe);
  validate_weights(weights, arch);

  std::map<std::string, std::vector<int>> kept;
  for (const RecipeEntry& e : recipe.entries) {
    const int idx = find_layer(arch, e.layer_id);
    if (idx < 0 || !arch.layers[idx].analyzable)
      fail(ErrorCode::LayerMismatch,
           "recipe layer '" + e.layer_id + "' is not an analyzable layer of the arch");
    if (arch.layers[idx].filters != e.channels)
      fail(ErrorCode::LayerMismatch,
           "layer '" + e.layer_id + "': recipe assumes " + std::to_string(e.channels) +
               " channels but the arch declares " + std::to_string(arch.layers[idx].filters));
    if (!e.kept_indices)
      fail(ErrorCode::MissingIndices,
           "layer '" + e.layer_id + "': recipe has no kept_indices (run filter selection first)");
    kept[e.layer_id] = *e.kept_indices;
  }

  const SlicePlan plan = plan_slices(arch, kept);
  ArchSpec new_arch = arch_from_plan(arch, plan);

  WeightBundle out;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::vector<int>& in_sel = plan.in_sel[i];
    const std::vector<int>& out_sel = plan.out_sel[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        out.set(l.id, WeightRole::Kernel,
                gather_tensor(gather_tensor(weights.at(l.id, WeightRole::Kernel), 2, in_sel),
                              3, out_sel));
        if (l.bias)
          out.set(l.id, WeightRole::Bias,
                  gather_tensor(weights.at(l.id, WeightRole::Bias), 0, out_sel));
        break;
      case LayerKind::Dense:
        out.set(l.id, WeightRole::Kernel,
                gather_tensor(gather_tensor(weights.at(l.id, WeightRole::Kernel), 0, in_sel),
                              1, out_sel));
        if (l.bias)
          out.set(l.id, WeightRole::Bias,
                  gather_tensor(weights.at(l.id, WeightRole::Bias), 0, out_sel));
        break;
      case LayerKind::BatchNorm:
        for (WeightRole r : {WeightRole::Scale, WeightRole::Shift, WeightRole::MovingMean,
                             WeightRole::MovingVariance})
          out.set(l.id, r, gather_tensor(weights.at(l.id, r), 0, in_sel));
        break;
      default:
        break;
    }
  }

  validate_weights(out, new_arch);
  return {std::move(new_arch), std::move(out)};
}

}  // namespace pfa
