#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cimsim/rng.hpp"

namespace cimsim::nn {

/// Row-per-sample features with integer class labels.
struct Dataset {
  Eigen::MatrixXd x;
  std::vector<int> y;
  int classes = 10;

  std::size_t size() const { return y.size(); }
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

// Training and test data are distinct types so that calibration and
// chip-in-the-loop fine-tuning cannot be handed test inputs.
class TrainingSet {
 public:
  explicit TrainingSet(Dataset d) : d_(std::move(d)) { d_.validate(); }
  const Dataset& data() const { return d_; }
  std::size_t size() const { return d_.size(); }

 private:
  Dataset d_;
};

class TestSet {
 public:
  explicit TestSet(Dataset d) : d_(std::move(d)) { d_.validate(); }
  const Dataset& data() const { return d_; }
  std::size_t size() const { return d_.size(); }

 private:
  Dataset d_;
};

struct Split {
  TrainingSet train;
  TestSet test;
};

/// The bundled 8×8 digits: 64 pixels scaled to [0, 1]. A seeded shuffle
/// puts 1437 samples in the training set and the remaining 360 in the test set.
Split load_digits(const std::string& path = std::string(CIMSIM_DATA_DIR) + "/digits.csv",
                  std::uint64_t split_seed = 0);

/// Pixels above `threshold` (in [0, 1] units) become 1.
Eigen::MatrixXd binarize(const Eigen::MatrixXd& x, double threshold = 0.5);

/// Fully connected layer acting on quantized inputs. `alpha` is the clip of
/// the layer's input: inputs live in [0, alpha] and are quantized to
/// 2^(in_bits-1) - 1 uniform levels.
struct Dense {
  Eigen::MatrixXd w;  // in × out
  Eigen::VectorXd b;
  double alpha = 1.0;
};

/// ReLU between layers, linear logits at the end.
struct Mlp {
  std::vector<Dense> layers;
  int in_bits = 4;

  std::size_t depth() const { return layers.size(); }
  int input_cap() const { return (1 << (in_bits - 1)) - 1; }
  double input_scale(std::size_t l) const { return layers.at(l).alpha / input_cap(); }
  void validate() const;
};

/// He-normal weights, zero biases, alpha 1 on the input layer and
/// `hidden_alpha` elsewhere.
Mlp init_mlp(const std::vector<std::size_t>& sizes, std::uint64_t seed, int in_bits = 4,
             double hidden_alpha = 2.0);

/// Quantizes one layer input: clip to [0, alpha], round half away from zero
/// to alpha / cap steps.
Eigen::MatrixXd quantize(const Eigen::MatrixXd& a, double alpha, int cap);

struct TrainConfig {
  double noise_fraction = 0.0;  // σ of the weight noise as a fraction of max|W| per layer
  double lr = 0.05;
  double momentum = 0.9;
  int epochs = 60;
  std::size_t batch = 32;
  double weight_decay = 1e-4;
  double alpha_decay = 1e-3;  // L2 on the clip values
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> loss;  // mean cross-entropy per epoch
};

/// SGD with momentum. Layers before `first` are frozen and absent: `data`
/// holds the inputs of layer `first`. Every mini-batch draws fresh weight
/// noise for the forward pass; the update is applied to the clean weights.
/// Gradients pass straight through the quantizers inside the clip range.
TrainHistory train(Mlp& model, const TrainingSet& data, const TrainConfig& cfg,
                   std::size_t first = 0);

/// Output of layers [first, last): ReLU activations for hidden layers,
/// logits when `last` is the final layer. With `noise_fraction` > 0 one
/// weight-noise draw is made per layer from `rng`.
Eigen::MatrixXd forward(const Mlp& model, const Eigen::MatrixXd& x, std::size_t first,
                        std::size_t last, double noise_fraction = 0.0, Engine* rng = nullptr);

double accuracy(const Eigen::MatrixXd& logits, const std::vector<int>& y);
double accuracy(const Mlp& model, const Dataset& d, std::size_t first = 0,
                double noise_fraction = 0.0, Engine* rng = nullptr);

/// Mean accuracy over `draws` independent weight-noise draws.
double noisy_accuracy(const Mlp& model, const Dataset& d, double noise_fraction, int draws,
                      std::uint64_t seed);

/// Excess kurtosis of all weights of the model.
double excess_kurtosis(const Mlp& model);

}  // namespace cimsim::nn
