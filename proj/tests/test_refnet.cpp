#include <doctest.h>

#include <cstdlib>

#include "pfa/net.hpp"
#include "pfa/rng.hpp"
#include "test_util.hpp"

using namespace pfa;

namespace {

bool bundles_equal(const WeightBundle& a, const WeightBundle& b) {
  if (a.order != b.order) return false;
  if (a.by_layer.size() != b.by_layer.size()) return false;
  for (const auto& [layer, roles] : a.by_layer) {
    auto it = b.by_layer.find(layer);
    if (it == b.by_layer.end() || it->second.size() != roles.size()) return false;
    for (const auto& [role, tensor] : roles) {
      auto jt = it->second.find(role);
      if (jt == it->second.end()) return false;
      if (std::get<NdArray<float>>(tensor).data != std::get<NdArray<float>>(jt->second).data)
        return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("refnet") {

TEST_CASE("reference architectures have frozen footprints") {
  const ArchSpec mini = simple_cnn_mini(4, 16, 16, 1);
  CHECK(footprint(mini) == 27124);
  CHECK(flops(mini) == 4420100);
  CHECK(analyzable_layers(mini) ==
        std::vector<std::string>{"conv1", "conv2", "conv3", "conv4", "conv5", "head", "cls"});

  CHECK(footprint(simple_cnn(10)) == 1372254);
}

TEST_CASE("synthetic dataset basics") {
  const SynthDataset a = generate_dataset(11, 4, 80, {12, 12, 1}, "train");
  REQUIRE(a.images.shape == std::vector<std::size_t>{80, 12, 12, 1});
  REQUIRE(a.labels.size() == 80);

  SUBCASE("bitwise deterministic") {
    const SynthDataset b = generate_dataset(11, 4, 80, {12, 12, 1}, "train");
    CHECK(a.images.data == b.images.data);
    CHECK(a.labels == b.labels);
  }
  SUBCASE("split changes the content") {
    const SynthDataset t = generate_dataset(11, 4, 80, {12, 12, 1}, "test");
    CHECK(a.images.data != t.images.data);
  }
  SUBCASE("classes are balanced") {
    std::vector<int> counts(4, 0);
    for (int l : a.labels) {
      REQUIRE(l >= 0);
      REQUIRE(l < 4);
      ++counts[l];
    }
    for (int c : counts) CHECK(c == 20);
  }
  SUBCASE("class_subset keeps only low labels, in order") {
    const SynthDataset two = class_subset(a, 2);
    CHECK(two.classes == 4);  // the label space is unchanged, only rows are dropped
    std::size_t j = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
      if (a.labels[i] >= 2) continue;
      REQUIRE(j < two.labels.size());
      CHECK(two.labels[j] == a.labels[i]);
      const std::size_t px = 12 * 12;
      CHECK(std::equal(two.images.data.begin() + j * px, two.images.data.begin() + (j + 1) * px,
                       a.images.data.begin() + i * px));
      ++j;
    }
    CHECK(j == two.labels.size());
  }
  SUBCASE("degenerate requests are rejected") {
    CHECK_THROWS_AS(generate_dataset(11, 1, 80, {12, 12, 1}, "train"), Error);
    CHECK_THROWS_AS(generate_dataset(11, 4, 12, {12, 12, 1}, "train"), Error);
  }
  SUBCASE("nearest-centroid baseline is deterministic and bounded") {
    const SynthDataset t = generate_dataset(11, 4, 80, {12, 12, 1}, "test");
    const double acc = nearest_centroid_accuracy(a, t);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(acc == nearest_centroid_accuracy(a, t));
  }
}

TEST_CASE("zero epochs evaluates the raw initialization") {
  const ArchSpec arch = simple_cnn_mini(4, 12, 12, 1);
  const SynthDataset tr = generate_dataset(3, 4, 80, {12, 12, 1}, "train");
  const SynthDataset te = generate_dataset(3, 4, 80, {12, 12, 1}, "test");
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train(arch, tr, te, cfg);
  CHECK(r.epoch_loss.empty());
  CHECK(r.test_accuracy > 0.02);  // near chance for 4 classes
  CHECK(r.test_accuracy < 0.60);
  CHECK(evaluate(arch, r.weights, te) == r.test_accuracy);
}

TEST_CASE("a small run learns the stripes") {
  const ArchSpec arch = simple_cnn_mini(2, 8, 8, 1);
  const SynthDataset tr = generate_dataset(5, 2, 120, {8, 8, 1}, "train");
  const SynthDataset te = generate_dataset(5, 2, 80, {8, 8, 1}, "test");
  TrainConfig cfg;
  cfg.epochs = 50;
  const TrainResult r = train(arch, tr, te, cfg);
  REQUIRE(r.epoch_loss.size() == 50);
  CHECK(r.epoch_loss.front() > r.epoch_loss.back());
  CHECK(evaluate(arch, r.weights, tr) >= 0.95);
  CHECK(r.test_accuracy >= 0.90);
}

TEST_CASE("training is reproducible bit for bit") {
  const ArchSpec arch = simple_cnn_mini(4, 12, 12, 1);
  const SynthDataset tr = generate_dataset(9, 4, 80, {12, 12, 1}, "train");
  const SynthDataset te = generate_dataset(9, 4, 40, {12, 12, 1}, "test");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 123;
  const TrainResult a = train(arch, tr, te, cfg);
  const TrainResult b = train(arch, tr, te, cfg);
  CHECK(a.test_accuracy == b.test_accuracy);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(bundles_equal(a.weights, b.weights));

  cfg.seed = 124;
  const TrainResult c = train(arch, tr, te, cfg);
  CHECK_FALSE(bundles_equal(a.weights, c.weights));
}

TEST_CASE("batched forward matches per-sample forward in eval mode") {
  const ArchSpec arch = simple_cnn_mini(4, 8, 8, 1);
  const WeightBundle w = init_weights(arch, 77);
  NetworkF net(arch, w);

  const int batch = 5;
  NdArray<float> x({batch, 8, 8, 1});
  for (float& v : x.data) v = static_cast<float>(urand(-1.0, 1.0));

  const NdArray<float> batched = net.forward(x, false);
  REQUIRE(batched.shape == std::vector<std::size_t>{batch, 4});
  const std::vector<float> batched_copy = batched.data;

  const std::size_t px = 8 * 8;
  for (int i = 0; i < batch; ++i) {
    NdArray<float> one({1, 8, 8, 1});
    std::copy_n(x.data.begin() + i * px, px, one.data.begin());
    const NdArray<float>& single = net.forward(one, false);
    for (int k = 0; k < 4; ++k)
      CHECK(std::abs(single.data[k] - batched_copy[i * 4 + k]) <= 1e-5);
  }
}

TEST_CASE("activation dumps record analyzable outputs with the sample dim first") {
  TempDir dir;
  const ArchSpec arch = simple_cnn_mini(4, 12, 12, 1);
  const WeightBundle w = init_weights(arch, 5);
  const SynthDataset ds = generate_dataset(21, 4, 40, {12, 12, 1}, "train");

  const ActivationDump dump = dump_activations(arch, w, ds, dir / "dump.json");
  REQUIRE(dump.layers.size() == 7);
  CHECK(dump.sample_count == 40);
  CHECK(dump.layers[0].layer_id == "conv1");
  CHECK(dump.layers[0].shape == std::vector<std::size_t>{40, 12, 12, 16});
  CHECK(dump.layers[6].layer_id == "cls");
  CHECK(dump.layers[6].shape == std::vector<std::size_t>{40, 6, 6, 4});
  CHECK(dump.note.find("pre-batchnorm") != std::string::npos);

  SUBCASE("layer_filter narrows the capture") {
    const ActivationDump one =
        dump_activations(arch, w, ds, dir / "one.json", {"conv3"});
    REQUIRE(one.layers.size() == 1);
    CHECK(one.layers[0].layer_id == "conv3");
  }
  SUBCASE("non-analyzable layers cannot be captured") {
    CHECK_THROWS_AS(dump_activations(arch, w, ds, dir / "bad.json", {"pool1"}), Error);
    CHECK_THROWS_AS(dump_activations(arch, w, ds, dir / "bad.json", {"ghost"}), Error);
  }
}

TEST_CASE("insane learning rates fail as numerical errors") {
  const ArchSpec arch = simple_cnn_mini(4, 8, 8, 1);
  const SynthDataset tr = generate_dataset(2, 4, 40, {8, 8, 1}, "train");
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e6;
  try {
    train(arch, tr, tr, cfg);
    FAIL("expected DivergedLoss");
  } catch (const Error& e) {
    CHECK(Error::is_numerical(e.code()));
  }
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(validate_config(cfg), Error);
  cfg = TrainConfig{};
  cfg.epochs = -1;
  CHECK_THROWS_AS(validate_config(cfg), Error);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(validate_config(cfg), Error);
}

TEST_CASE("dataset shape mismatches are rejected") {
  const ArchSpec arch = simple_cnn_mini(4, 12, 12, 1);
  const SynthDataset wrong = generate_dataset(2, 4, 40, {8, 8, 1}, "train");
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(arch, wrong, wrong, cfg), Error);
  CHECK_THROWS_AS(evaluate(arch, init_weights(arch, 1), wrong), Error);
}

TEST_CASE("analytic gradients agree with central differences") {
  // smoke-level: a handful of parameters away from the maxpool kink
  ArchSpec arch;
  arch.input_shape = {6, 6, 1};
  {
    LayerSpec c1;
    c1.id = "c1";
    c1.kind = LayerKind::Conv2d;
    c1.filters = 4;
    c1.kernel_h = c1.kernel_w = 3;
    c1.analyzable = true;
    arch.layers.push_back(c1);
    LayerSpec bn;
    bn.id = "bn";
    bn.kind = LayerKind::BatchNorm;
    arch.layers.push_back(bn);
    LayerSpec relu;
    relu.id = "relu";
    relu.kind = LayerKind::Relu;
    arch.layers.push_back(relu);
    LayerSpec pool;
    pool.id = "pool";
    pool.kind = LayerKind::MaxPool;
    pool.pool = 2;
    arch.layers.push_back(pool);
    LayerSpec c2;
    c2.id = "c2";
    c2.kind = LayerKind::Conv2d;
    c2.filters = 3;
    c2.kernel_h = c2.kernel_w = 1;
    c2.analyzable = true;
    arch.layers.push_back(c2);
    LayerSpec gap;
    gap.id = "gap";
    gap.kind = LayerKind::GlobalAvgPool;
    arch.layers.push_back(gap);
    LayerSpec fc;
    fc.id = "fc";
    fc.kind = LayerKind::Dense;
    fc.filters = 3;
    fc.analyzable = true;
    arch.layers.push_back(fc);
  }
  validate_arch(arch);

  NetworkD net(arch, init_weights(arch, 31));
  NdArray<double> x({4, 6, 6, 1});
  for (double& v : x.data) v = urand(-1.0, 1.0);
  const std::vector<int> labels{0, 2, 1, 2};

  net.loss_and_grad(x, labels);
  const double h = 1e-3;
  for (const auto& [layer, role] : std::vector<std::pair<std::string, WeightRole>>{
           {"c2", WeightRole::Kernel}, {"fc", WeightRole::Kernel}, {"fc", WeightRole::Bias}}) {
    const std::vector<double> analytic = net.grad(layer, role);
    std::vector<double>& p = net.param(layer, role);
    for (std::size_t idx = 0; idx < analytic.size(); idx += std::max<std::size_t>(1, analytic.size() / 4)) {
      const double orig = p[idx];
      p[idx] = orig + h;
      const double lp = net.loss(x, labels, true);
      p[idx] = orig - h;
      const double lm = net.loss(x, labels, true);
      p[idx] = orig;
      const double numeric = (lp - lm) / (2 * h);
      CHECK(std::abs(numeric - analytic[idx]) <=
            1e-3 * std::max(1.0, std::abs(numeric)));
    }
  }
}

}  // TEST_SUITE
