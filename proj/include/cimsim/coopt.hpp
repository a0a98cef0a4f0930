#pragma once

#include <vector>

#include <Eigen/Dense>

#include "cimsim/chip.hpp"
#include "cimsim/nn.hpp"

namespace cimsim::coopt {

struct CalibrationOptions {
  std::vector<double> v_read_grid{0.25, 0.5, 0.75, 1.0, 1.25, 1.5};
  double nominal_v_read = 0.5;  // V; the grid scales this
  int q_grid_points = 21;       // log grid below the full-scale step
  double q_grid_decades = 2.0;
  double percentile = 0.99;
  int offset_repeats = 4;
  std::size_t max_samples = 128;

  void validate() const;
};

struct NeuronTrim {
  int core = 0;
  int neuron = 0;
  double trim = 0.0;  // V, added to the comparator input
};

struct Calibration {
  int layer = 0;
  double v_read_scale = 1.0;
  double v_read = 0.5;
  double q_step = 0.01;
  double output_gain = 1.0;
  std::vector<NeuronTrim> offsets;
};

/// Full-swing step for a layer: the largest possible charge of one segment
/// maps to the largest code.
double full_scale_q_step(const NeuronConfig& segment);

/// Smallest point of the log grid (full_scale down `decades`) that is not
/// below `target`, so the target charge stays inside the ADC range.
double snap_q_step(double target, double full_scale, int points, double decades);

/// Calibrates one programmed layer on training-derived inputs and writes the
/// result into the chip (v_read, q_step, trims) and into `op.output_gain`.
/// `reference` holds the software outputs for the same rows; when empty the
/// gain stays 1 and v_read keeps its nominal value.
Calibration calibrate_layer(Chip& chip, NetworkOp& op, const nn::TrainingSet& layer_inputs,
                            const Eigen::MatrixXd& reference, const CalibrationOptions& opts = {});

// --- model deployment ---------------------------------------------------------

/// Layer l of the model as chip targets. The bias is stored divided by the
/// layer's clip, so the full-scale bias input reproduces it.
ChipLayer to_chip_layer(const nn::Mlp& model, std::size_t l, const NeuronConfig& base);
mapper::LayerSegments segments_for(const nn::Mlp& model, std::size_t l, double intensity = 1.0,
                                   std::size_t max_rows = 256);
Network network_for(const nn::Mlp& model);

/// Rows of `x` through ops [0, upto) of the network on the chip.
Eigen::MatrixXd chip_forward(Chip& chip, const Network& net, const Eigen::MatrixXd& x,
                             std::size_t upto);

struct Deployment {
  Network net;
  std::vector<Calibration> calibration;
  ProgrammingReport report;
};

/// Programs every layer and calibrates them in order, each on the chip's own
/// outputs of the layers before it.
Deployment deploy(const nn::Mlp& model, Chip& chip, const mapper::PlacementPlan& plan,
                  const nn::TrainingSet& data, const NeuronConfig& base,
                  const CalibrationOptions& opts = {});

/// Recalibrates every layer of an already programmed model in order.
std::vector<Calibration> calibrate_network(const nn::Mlp& model, Chip& chip, Network& net,
                                           const nn::TrainingSet& data,
                                           const CalibrationOptions& opts = {});

struct FinetuneConfig {
  nn::TrainConfig train;     // base settings; lr is divided by lr_divisor
  double lr_divisor = 100.0;
  int epochs = 30;
  NeuronConfig neuron;
  CalibrationOptions calibration;
};

struct FinetuneStep {
  std::size_t layer = 0;
  double hybrid_accuracy = 0.0;  // chip through `layer`, software beyond, on the training set
};

struct FinetuneResult {
  nn::Mlp model;
  Deployment deployment;
  std::vector<FinetuneStep> trace;
};

/// Programs layers one at a time; after each, the remaining software layers
/// are retrained on the chip's measured outputs.
FinetuneResult finetune_chip_in_loop(nn::Mlp model, Chip& chip, const mapper::PlacementPlan& plan,
                                     const nn::TrainingSet& data, const FinetuneConfig& cfg);

/// Test accuracy of a deployed network.
double chip_accuracy(Chip& chip, const Network& net, const nn::TestSet& test);

}  // namespace cimsim::coopt
