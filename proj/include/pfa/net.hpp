#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfa/arch.hpp"
#include "pfa/dataset.hpp"
#include "pfa/dump.hpp"
#include "pfa/tensor.hpp"
#include "pfa/weights.hpp"

namespace pfa {

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  int epochs = 30;
  int batch_size = 32;
  double weight_decay = 1e-4;
  int lr_decay_every = 0;  // epochs between decays; 0 disables the schedule
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 1;
};

void validate_config(const TrainConfig& config);

struct TrainResult {
  WeightBundle weights;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

WeightBundle init_weights(const ArchSpec& arch, std::uint64_t seed);

// SGD with classical momentum; deterministic given config.seed
// (single-threaded, pinned shuffling). warm_start overrides the seeded
// initialization (fine-tuning). epochs=0 evaluates the initialization.
TrainResult train(const ArchSpec& arch, const SynthDataset& train_set,
                  const SynthDataset& test_set, const TrainConfig& config,
                  const WeightBundle* warm_start = nullptr);

double evaluate(const ArchSpec& arch, const WeightBundle& weights, const SynthDataset& ds);

// Records the raw output tensor of each analyzable layer (pre-normalization,
// pre-activation) over the whole dataset and writes a dump at manifest.
// `layer_filter` empty means every analyzable layer.
ActivationDump dump_activations(const ArchSpec& arch, const WeightBundle& weights,
                                const SynthDataset& ds,
                                const std::filesystem::path& manifest,
                                const std::vector<std::string>& layer_filter = {});

// Desk-scale all-conv stack: two 16-channel 3x3 convs, max pool, three
// 32-channel 3x3 convs, a 1x1 mixing conv (batchnorm+relu after each), a 1x1
// classifier conv, global average pooling.
ArchSpec simple_cnn_mini(int classes = 4, int height = 16, int width = 16, int channels = 1);

// Full-size counterpart (96^3 / 192^4 stack with 1x1 heads, batchnorm and
// relu after every conv). Used for cost accounting only.
ArchSpec simple_cnn(int classes = 10);

// ---------------------------------------------------------------------------
// Graph executor, templated on the scalar so tests can run the same code in
// f64 for finite-difference checks. Training uses Network<float>.

template <typename T>
class Network {
 public:
  Network(const ArchSpec& arch, const WeightBundle& weights);

  // Logits for a batch; `training` selects batch statistics in batchnorm and
  // enables the caches backward() needs.
  const NdArray<T>& forward(const NdArray<T>& x, bool training);

  // Mean softmax cross-entropy (f64 accumulation) of the last forward pass.
  double loss(const NdArray<T>& x, const std::vector<int>& labels, bool training);

  // Training-mode forward + full backward; returns the loss and fills grads.
  double loss_and_grad(const NdArray<T>& x, const std::vector<int>& labels);

  void sgd_step(double lr, double momentum, double weight_decay);

  WeightBundle weights() const;
  const NdArray<T>& activation(const std::string& layer_id) const;
  const NdArray<T>& input_grad() const { return input_grad_; }
  std::vector<T>& param(const std::string& layer_id, WeightRole role);
  const std::vector<T>& grad(const std::string& layer_id, WeightRole role) const;

 private:
  struct State {
    std::map<WeightRole, std::vector<T>> params, grads, velocity;
    NdArray<T> out, dout;
    NdArray<T> col;            // conv im2col cache (training only)
    std::vector<int> argmax;   // maxpool winners
    std::vector<T> batch_mean, batch_invstd;
    NdArray<T> xhat;           // batchnorm normalized input
  };

  const NdArray<T>& buffer(int idx, const NdArray<T>& x) const {
    return idx < 0 ? x : states_[idx].out;
  }

  void forward_layer(std::size_t i, const NdArray<T>& x, bool training);
  void backward_layer(std::size_t i, const NdArray<T>& x);

  ArchSpec arch_;
  std::vector<std::vector<int>> shapes_;
  std::vector<int> main_in_, skip_in_;
  std::vector<State> states_;
  NdArray<T> input_grad_;
  std::vector<double> softmax_rows_;  // scratch
};

using NetworkF = Network<float>;
using NetworkD = Network<double>;

}  // namespace pfa
