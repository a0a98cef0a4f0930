#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "cimsim/chip.hpp"

namespace cimsim::rbm {

/// Bernoulli-Bernoulli RBM. p(h_j = 1 | v) = σ(b_j + Σ_i v_i w_ij) and
/// p(v_i = 1 | h) = σ(a_i + Σ_j h_j w_ij).
struct RbmModel {
  Eigen::MatrixXd w;  // visible × hidden
  Eigen::VectorXd a;  // visible biases
  Eigen::VectorXd b;  // hidden biases

  std::size_t visible() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(w.cols()); }
  void validate() const;
};

/// N(0, scale²) weights, zero biases.
RbmModel init_rbm(std::size_t visible, std::size_t hidden, std::uint64_t seed, double scale = 0.01);

struct CdConfig {
  int epochs = 30;
  double lr = 0.05;
  double momentum = 0.5;
  double weight_decay = 1e-4;
  std::size_t batch = 16;
  double noise_fraction = 0.0;  // weight noise on the sampling passes, fraction of max|W|
  std::uint64_t seed = 0;

  void validate() const;
};

struct CdHistory {
  std::vector<double> recon_error;  // entry 0 before training, then one per epoch
};

/// Mean squared error of the mean-field reconstruction σ(σ(vW + b)Wᵀ + a).
double reconstruction_error(const RbmModel& model, const Eigen::MatrixXd& data);

/// CD-1 on binary rows. Starts from init_rbm(visible, hidden, cfg.seed).
RbmModel cd1_train_rbm(const Eigen::MatrixXd& data, std::size_t hidden, const CdConfig& cfg,
                       CdHistory* history = nullptr);

/// One chip layer per interleave slot; slot s holds the visible units i with
/// i mod k == s in the quad layout, every hidden unit, and (slot 0 only) the
/// hidden biases.
struct RbmDeployment {
  std::size_t visible = 0, hidden = 0;
  std::vector<int> layers;  // chip layer id per slot
  std::vector<std::vector<std::size_t>> slots;  // visible units per slot
  std::vector<mapper::QuadMatrix> quads;
  std::vector<double> q_step;  // per slot, for the visible→hidden codes
  NeuronConfig neuron;         // in_bits 2, logistic dither
};

/// Programs the RBM on `interleave` cores starting at chip layer `first_layer`.
/// Each slot must fit one core.
RbmDeployment deploy_rbm(Chip& chip, const RbmModel& model, std::size_t interleave,
                         int first_layer = 0, double g_max = 30.0);

/// Pre-activations as realized by the programmed conductances (weights pulled
/// toward zero by the g_min floor), in the model's units.
RbmModel effective_model(const Chip& chip, const RbmDeployment& dep);

/// Reseeds the LFSRs of the RBM cores.
void seed_sampler(Chip& chip, const RbmDeployment& dep, std::uint64_t seed);

/// One hidden sample from the backward (source-line driven) MVM. With one
/// slot the neurons sample on-chip; with more, each slot's partial sums are
/// digitized and added, then sampled with the slot-0 neuron's LFSR dither.
std::vector<int> sample_hidden(Chip& chip, const RbmDeployment& dep, const std::vector<int>& v);

/// One visible sample from the forward MVM in stochastic mode.
std::vector<int> sample_visible(Chip& chip, const RbmDeployment& dep, const std::vector<int>& h);

/// Gibbs sampling on the chip, starting from `image`. Pixels with mask 1 are
/// reset to `image` after every visible sample.
Eigen::VectorXd gibbs_recover(Chip& chip, const RbmDeployment& dep, const Eigen::VectorXd& image,
                              const std::vector<int>& mask, int cycles = 10,
                              std::uint64_t seed = 0);

/// Flips a `fraction` of the pixels (exact count, rounded). Returns the
/// corrupted image and the mask of untouched pixels.
std::pair<Eigen::VectorXd, std::vector<int>> flip_pixels(const Eigen::VectorXd& image,
                                                         double fraction, std::uint64_t seed);

}  // namespace cimsim::rbm
