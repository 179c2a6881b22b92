#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "pfa/prune.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pfa;

namespace {

LayerSpec conv(std::string id, int filters, int k, int stride = 1,
               PadMode pad = PadMode::Same, bool analyzable = true) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Conv2d;
  l.filters = filters;
  l.kernel_h = l.kernel_w = k;
  l.stride = stride;
  l.padding = pad;
  l.analyzable = analyzable;
  return l;
}

LayerSpec plain(std::string id, LayerKind kind) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  return l;
}

LayerSpec dense(std::string id, int units) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Dense;
  l.filters = units;
  l.analyzable = true;
  return l;
}

LayerSpec maxpool(std::string id, int window, int stride = 0) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::MaxPool;
  l.pool = window;
  l.pool_stride = stride;
  return l;
}

std::vector<int> iota_sel(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Random float weights matching what the arch demands, via the public shape
// machinery so the builder stays independent of layer bookkeeping.
WeightBundle make_weights(const ArchSpec& arch) {
  const auto shapes = infer_shapes(arch);
  const auto inputs = main_inputs(arch);
  auto in_shape = [&](std::size_t i) {
    return inputs[i] < 0 ? arch.input_shape : shapes[inputs[i]];
  };
  auto randu = [](NdArray<float>& a) {
    for (float& v : a.data) v = static_cast<float>(urand(-1.0, 1.0));
  };

  WeightBundle w;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.kind == LayerKind::Conv2d) {
      NdArray<float> k({static_cast<std::size_t>(l.kernel_h),
                        static_cast<std::size_t>(l.kernel_w),
                        static_cast<std::size_t>(in_shape(i)[2]),
                        static_cast<std::size_t>(l.filters)});
      randu(k);
      w.set(l.id, WeightRole::Kernel, TensorData{k});
      if (l.bias) {
        NdArray<float> b({static_cast<std::size_t>(l.filters)});
        randu(b);
        w.set(l.id, WeightRole::Bias, TensorData{b});
      }
    } else if (l.kind == LayerKind::Dense) {
      NdArray<float> k({static_cast<std::size_t>(in_shape(i)[0]),
                        static_cast<std::size_t>(l.filters)});
      randu(k);
      w.set(l.id, WeightRole::Kernel, TensorData{k});
      NdArray<float> b({static_cast<std::size_t>(l.filters)});
      randu(b);
      w.set(l.id, WeightRole::Bias, TensorData{b});
    } else if (l.kind == LayerKind::BatchNorm) {
      const std::size_t c = static_cast<std::size_t>(in_shape(i).back());
      for (WeightRole role : {WeightRole::Scale, WeightRole::Shift, WeightRole::MovingMean,
                              WeightRole::MovingVariance}) {
        NdArray<float> v({c});
        for (float& x : v.data)
          x = role == WeightRole::MovingVariance ? static_cast<float>(urand(0.5, 1.5))
                                                 : static_cast<float>(urand(-1.0, 1.0));
        w.set(l.id, role, TensorData{v});
      }
    }
  }
  return w;
}

const std::vector<float>& f32(const TensorData& t) {
  return std::get<NdArray<float>>(t).data;
}

RecipeEntry entry(std::string id, int channels, std::vector<int> kept) {
  RecipeEntry e;
  e.layer_id = std::move(id);
  e.channels = channels;
  e.kept_count = static_cast<int>(kept.size());
  e.gamma = static_cast<double>(e.kept_count) / channels;
  e.kept_indices = std::move(kept);
  return e;
}

ArchSpec padding_block_arch() {
  ArchSpec a;
  a.input_shape = {8, 8, 3};
  a.layers = {conv("conv_in", 16, 3), conv("b_conv1", 16, 3)};
  a.layers.push_back(plain("b_bn", LayerKind::BatchNorm));
  a.layers.push_back(plain("b_relu", LayerKind::Relu));
  a.layers.push_back(conv("b_conv2", 16, 3));
  LayerSpec add = plain("add", LayerKind::AddSkip);
  add.skip_from = "conv_in";
  a.layers.push_back(add);
  a.layers.push_back(conv("tail", 8, 1));
  a.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  validate_arch(a);
  return a;
}

ArchSpec projection_block_arch() {
  ArchSpec a;
  a.input_shape = {8, 8, 3};
  a.layers = {conv("conv_in", 16, 3), conv("b_conv1", 16, 3)};
  a.layers.push_back(plain("b_relu", LayerKind::Relu));
  a.layers.push_back(conv("b_conv2", 16, 3));
  LayerSpec proj = conv("proj", 16, 1, 1, PadMode::Same, false);
  proj.input = "conv_in";
  a.layers.push_back(proj);
  LayerSpec add = plain("add", LayerKind::AddSkip);
  add.input = "b_conv2";
  add.skip_from = "proj";
  add.skip_mode = SkipMode::Projection;
  a.layers.push_back(add);
  a.layers.push_back(conv("tail", 8, 1));
  a.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  validate_arch(a);
  return a;
}

}  // namespace

TEST_SUITE("archmodel") {

TEST_CASE("per-kind cost anchors, computed by hand") {
  ArchSpec a;
  a.input_shape = {32, 32, 3};
  a.layers = {conv("c1", 64, 3)};
  a.layers.push_back(plain("bn", LayerKind::BatchNorm));
  a.layers.push_back(plain("r", LayerKind::Relu));
  a.layers.push_back(maxpool("p", 2));
  a.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  a.layers.push_back(dense("fc", 10));

  const CostReport rep = cost_report(a);
  REQUIRE(rep.per_layer.size() == 6);

  CHECK(rep.per_layer[0].params == 9 * 3 * 64 + 64);                    // 1792
  CHECK(rep.per_layer[0].flops == 2LL * 9 * 3 * 64 * 1024 + 64 * 1024);  // 3604480
  CHECK(rep.per_layer[1].params == 128);
  CHECK(rep.per_layer[1].flops == 2 * 32 * 32 * 64);
  CHECK(rep.per_layer[2].params == 0);
  CHECK(rep.per_layer[2].flops == 32 * 32 * 64);
  CHECK(rep.per_layer[3].flops == 4 * 16 * 16 * 64);
  CHECK(rep.per_layer[4].flops == 16 * 16 * 64 + 64);
  CHECK(rep.per_layer[5].params == 64 * 10 + 10);
  CHECK(rep.per_layer[5].flops == 2 * 64 * 10 + 10);

  long long psum = 0, fsum = 0;
  for (const LayerCost& c : rep.per_layer) {
    psum += c.params;
    fsum += c.flops;
  }
  CHECK(rep.params == psum);
  CHECK(rep.flops == fsum);
  CHECK(footprint(a) == rep.params);
  CHECK(flops(a) == rep.flops);
}

TEST_CASE("conv cost is linear in the filter count") {
  for (int c : {4, 8, 16}) {
    ArchSpec narrow, wide;
    narrow.input_shape = wide.input_shape = {10, 10, 5};
    narrow.layers = {conv("c", c, 3)};
    wide.layers = {conv("c", 2 * c, 3)};
    CHECK(footprint(wide) == 2 * footprint(narrow));
    CHECK(flops(wide) == 2 * flops(narrow));
  }
}

TEST_CASE("shape inference conventions") {
  ArchSpec a;
  a.input_shape = {11, 11, 2};
  a.layers = {conv("same1", 4, 3), conv("same2", 4, 3, 2), conv("valid", 4, 3, 1, PadMode::Valid)};
  a.layers.push_back(maxpool("pool", 3, 2));
  a.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  a.layers.push_back(dense("fc", 7));

  const auto shapes = infer_shapes(a);
  CHECK(shapes[0] == std::vector<int>{11, 11, 4});  // same, stride 1
  CHECK(shapes[1] == std::vector<int>{6, 6, 4});    // same, stride 2: ceil(11/2)
  CHECK(shapes[2] == std::vector<int>{4, 4, 4});    // valid: 6-3+1
  CHECK(shapes[3] == std::vector<int>{1, 1, 4});    // (4-3)/2+1
  CHECK(shapes[4] == std::vector<int>{4});
  CHECK(shapes[5] == std::vector<int>{7});
}

TEST_CASE("padding add_skip widens to the larger branch") {
  ArchSpec a = padding_block_arch();
  const int add_idx = find_layer(a, "add");
  CHECK(infer_shapes(a)[add_idx] == std::vector<int>{8, 8, 16});

  // narrow the main branch only; the skip branch sets the output width
  const ArchSpec narrowed = pruned_arch(a, {{"b_conv2", 9}});
  CHECK(infer_shapes(narrowed)[add_idx] == std::vector<int>{8, 8, 16});

  // narrow the skip branch too
  const ArchSpec both = pruned_arch(a, {{"b_conv2", 9}, {"conv_in", 4}});
  CHECK(infer_shapes(both)[add_idx] == std::vector<int>{8, 8, 9});
}

TEST_CASE("shape errors carry ShapeError") {
  ArchSpec bad;
  bad.input_shape = {4};
  bad.layers = {conv("c", 2, 3)};
  CHECK_THROWS_AS(infer_shapes(bad), Error);

  ArchSpec small;
  small.input_shape = {2, 2, 1};
  small.layers = {conv("c", 2, 3, 1, PadMode::Valid)};
  try {
    infer_shapes(small);
    FAIL("kernel larger than input must not pass");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeError);
  }

  ArchSpec flat;
  flat.input_shape = {4, 4, 2};
  flat.layers = {dense("fc", 3)};
  CHECK_THROWS_AS(infer_shapes(flat), Error);
}

TEST_CASE("validate_arch rejections") {
  ArchSpec dup;
  dup.input_shape = {4, 4, 1};
  dup.layers = {conv("c", 2, 3), conv("c", 2, 3)};
  CHECK_THROWS_AS(validate_arch(dup), Error);

  ArchSpec fwd;
  fwd.input_shape = {4, 4, 1};
  fwd.layers = {conv("a", 2, 3), conv("b", 2, 3)};
  fwd.layers[0].input = "b";  // forward reference
  CHECK_THROWS_AS(validate_arch(fwd), Error);

  ArchSpec ghost;
  ghost.input_shape = {4, 4, 1};
  ghost.layers = {conv("a", 2, 3)};
  ghost.layers[0].input = "nope";
  CHECK_THROWS_AS(validate_arch(ghost), Error);

  ArchSpec markable;
  markable.input_shape = {4, 4, 1};
  markable.layers = {conv("a", 2, 3), plain("r", LayerKind::Relu)};
  markable.layers[1].analyzable = true;
  CHECK_THROWS_AS(validate_arch(markable), Error);

  // projections must come from a dedicated non-analyzable conv
  ArchSpec proj = projection_block_arch();
  proj.layers[find_layer(proj, "proj")].analyzable = true;
  CHECK_THROWS_AS(validate_arch(proj), Error);
}

TEST_CASE("narrowing a two-conv chain reprices exactly") {
  ArchSpec a;
  a.input_shape = {4, 4, 3};
  a.layers = {conv("conv0", 8, 3), conv("conv1", 6, 3)};
  a.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));

  CHECK(footprint(a) == (9 * 3 * 8 + 8) + (9 * 8 * 6 + 6));

  const ArchSpec cut = pruned_arch(a, {{"conv0", 3}});
  CHECK(footprint(cut) == (9 * 3 * 3 + 3) + (9 * 3 * 6 + 6));
  CHECK(infer_shapes(cut)[0] == std::vector<int>{4, 4, 3});
  CHECK(cut.layers[1].filters == 6);  // untouched layers stay full width

  CHECK_THROWS_AS(pruned_arch(a, {{"ghost", 2}}), Error);
  CHECK_THROWS_AS(pruned_arch(a, {{"gap", 2}}), Error);     // not analyzable
  CHECK_THROWS_AS(pruned_arch(a, {{"conv0", 0}}), Error);
  CHECK_THROWS_AS(pruned_arch(a, {{"conv0", 9}}), Error);
}

TEST_CASE("recipe_cost rejects stale channel counts") {
  ArchSpec a;
  a.input_shape = {4, 4, 3};
  a.layers = {conv("conv0", 8, 3)};
  Recipe r;
  r.method = RecipeMethod::KL;
  r.entries = {entry("conv0", 12, iota_sel(5))};  // arch says 8
  CHECK_THROWS_AS(recipe_cost(a, r, BudgetKind::Params), Error);
}

TEST_CASE("apply_recipe slices a padding block like the reference slicer") {
  const ArchSpec a = padding_block_arch();
  const WeightBundle w = make_weights(a);

  const std::vector<int> sel1{0, 2, 4, 6, 8};
  const std::vector<int> sel2{0, 2, 4, 6, 8, 10, 12, 14, 15};
  Recipe r;
  r.method = RecipeMethod::KL;
  r.entries = {entry("b_conv1", 16, sel1), entry("b_conv2", 16, sel2)};

  const auto [cut, sliced] = apply_recipe(a, w, r);
  CHECK(cut.layers[find_layer(cut, "b_conv1")].filters == 5);
  CHECK(cut.layers[find_layer(cut, "b_conv2")].filters == 9);
  CHECK(infer_shapes(cut)[find_layer(cut, "add")] == std::vector<int>{8, 8, 16});

  // pruned-layer kernels: input axis follows the feeding selection
  const int d1[4] = {3, 3, 16, 16};
  CHECK(f32(sliced.at("b_conv1", WeightRole::Kernel)) ==
        oracle::slice_kernel(f32(w.at("b_conv1", WeightRole::Kernel)), d1, iota_sel(16), sel1));
  CHECK(f32(sliced.at("b_conv2", WeightRole::Kernel)) ==
        oracle::slice_kernel(f32(w.at("b_conv2", WeightRole::Kernel)), d1, sel1, sel2));

  // batchnorm vectors follow their input's selection
  const std::vector<float>& bn_scale = f32(w.at("b_bn", WeightRole::Scale));
  const std::vector<float>& cut_scale = f32(sliced.at("b_bn", WeightRole::Scale));
  REQUIRE(cut_scale.size() == sel1.size());
  for (std::size_t i = 0; i < sel1.size(); ++i) CHECK(cut_scale[i] == bn_scale[sel1[i]]);

  // bias follows the output selection
  const std::vector<float>& b2 = f32(w.at("b_conv2", WeightRole::Bias));
  const std::vector<float>& cut_b2 = f32(sliced.at("b_conv2", WeightRole::Bias));
  REQUIRE(cut_b2.size() == sel2.size());
  for (std::size_t i = 0; i < sel2.size(); ++i) CHECK(cut_b2[i] == b2[sel2[i]]);

  // the skip branch won the add, so the tail sees the original 16 channels
  CHECK(f32(sliced.at("tail", WeightRole::Kernel)) == f32(w.at("tail", WeightRole::Kernel)));

  CHECK(footprint(cut) == recipe_cost(a, r, BudgetKind::Params));
  CHECK(flops(cut) == recipe_cost(a, r, BudgetKind::Flops));
  CHECK(footprint(cut) < footprint(a));
}

TEST_CASE("projection convs are sliced in lock-step with the block output") {
  const ArchSpec a = projection_block_arch();
  const WeightBundle w = make_weights(a);

  const std::vector<int> sel_in = iota_sel(12);
  const std::vector<int> sel2{1, 3, 5, 7, 9, 11, 13, 14, 15};
  Recipe r;
  r.method = RecipeMethod::KL;
  r.entries = {entry("conv_in", 16, sel_in), entry("b_conv2", 16, sel2)};

  const auto [cut, sliced] = apply_recipe(a, w, r);
  CHECK(cut.layers[find_layer(cut, "proj")].filters == 9);
  CHECK(infer_shapes(cut)[find_layer(cut, "add")] == std::vector<int>{8, 8, 9});

  const int dproj[4] = {1, 1, 16, 16};
  CHECK(f32(sliced.at("proj", WeightRole::Kernel)) ==
        oracle::slice_kernel(f32(w.at("proj", WeightRole::Kernel)), dproj, sel_in, sel2));

  const int d1[4] = {3, 3, 16, 16};
  CHECK(f32(sliced.at("b_conv1", WeightRole::Kernel)) ==
        oracle::slice_kernel(f32(w.at("b_conv1", WeightRole::Kernel)), d1, sel_in, iota_sel(16)));

  const int dtail[4] = {1, 1, 16, 8};
  CHECK(f32(sliced.at("tail", WeightRole::Kernel)) ==
        oracle::slice_kernel(f32(w.at("tail", WeightRole::Kernel)), dtail, sel2, iota_sel(8)));

  CHECK(footprint(cut) == recipe_cost(a, r, BudgetKind::Params));
}

TEST_CASE("entry order does not change the result") {
  const ArchSpec a = padding_block_arch();
  const WeightBundle w = make_weights(a);
  Recipe fwd;
  fwd.method = RecipeMethod::KL;
  fwd.entries = {entry("b_conv1", 16, {0, 3, 7, 11}), entry("b_conv2", 16, {2, 5, 8, 9, 12})};
  Recipe rev = fwd;
  std::reverse(rev.entries.begin(), rev.entries.end());

  const auto [arch1, w1] = apply_recipe(a, w, fwd);
  const auto [arch2, w2] = apply_recipe(a, w, rev);
  CHECK(footprint(arch1) == footprint(arch2));
  for (const std::string& id : {"conv_in", "b_conv1", "b_conv2", "tail"})
    CHECK(f32(w1.at(id, WeightRole::Kernel)) == f32(w2.at(id, WeightRole::Kernel)));
}

TEST_CASE("identity recipes change nothing") {
  const ArchSpec a = padding_block_arch();
  const WeightBundle w = make_weights(a);
  Recipe r;
  r.method = RecipeMethod::KL;
  for (const std::string& id : analyzable_layers(a)) {
    const int c = a.layers[find_layer(a, id)].filters;
    r.entries.push_back(entry(id, c, iota_sel(c)));
  }

  const auto [same, copied] = apply_recipe(a, w, r);
  CHECK(footprint(same) == footprint(a));
  CHECK(flops(same) == flops(a));
  for (const std::string& id : {"conv_in", "b_conv1", "b_conv2", "tail"}) {
    CHECK(f32(copied.at(id, WeightRole::Kernel)) == f32(w.at(id, WeightRole::Kernel)));
    CHECK(f32(copied.at(id, WeightRole::Bias)) == f32(w.at(id, WeightRole::Bias)));
  }
}

TEST_CASE("missing kept_indices is an error apply-side") {
  const ArchSpec a = padding_block_arch();
  const WeightBundle w = make_weights(a);
  Recipe r;
  r.method = RecipeMethod::KL;
  RecipeEntry e = entry("b_conv1", 16, iota_sel(4));
  e.kept_indices.reset();
  r.entries = {e};
  try {
    apply_recipe(a, w, r);
    FAIL("expected MissingIndices");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::MissingIndices);
  }
}

TEST_CASE("footprint shrinks monotonically with random prefix recipes") {
  const ArchSpec a = padding_block_arch();
  const WeightBundle w = make_weights(a);
  for (int rep = 0; rep < 10; ++rep) {
    Recipe r;
    r.method = RecipeMethod::KL;
    bool all_full = true;
    for (const std::string& id : analyzable_layers(a)) {
      const int c = a.layers[find_layer(a, id)].filters;
      const int kept = 1 + static_cast<int>(urand(0, c));
      all_full = all_full && kept == c;
      r.entries.push_back(entry(id, c, iota_sel(kept)));
    }
    const auto [cut, sliced] = apply_recipe(a, w, r);
    CHECK(footprint(cut) == recipe_cost(a, r, BudgetKind::Params));
    CHECK(footprint(cut) <= footprint(a));
    if (!all_full) CHECK(footprint(cut) < footprint(a));
    CHECK_NOTHROW(validate_weights(sliced, cut));
  }
}

}  // TEST_SUITE
