#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "cimsim/core.hpp"
#include "cimsim/device.hpp"
#include "cimsim/mapper.hpp"
#include "cimsim/neuron.hpp"

namespace cimsim {

inline constexpr int kChipCores = 48;

/// A programmed layer: its target matrix and the neuron settings of the cores
/// it occupies. `neuron.activation` is applied digitally after partial sums
/// are accumulated (identity or relu).
struct ChipLayer {
  mapper::ConductanceMatrix matrix;
  NeuronConfig neuron;
  bool programmed = false;
};

struct ProgrammingEntry {
  int layer = 0;
  int core = 0;
  int group = 0;
  std::size_t cells = 0;
  double deviation_sigma = 0.0;  // after the final relaxation event
  std::size_t failures = 0;
  double mean_pulses = 0.0;
};

struct ProgrammingReport {
  std::vector<ProgrammingEntry> entries;
  std::size_t total_failures() const;
  std::size_t total_cells() const;
};

class Chip {
 public:
  explicit Chip(std::uint64_t seed = 0, NonIdealityConfig nonideal = {});

  CoreState& core(int id);
  const CoreState& core(int id) const;
  bool powered(int id) const;
  void set_powered(int id, bool on);

  std::uint64_t seed() const { return seed_; }
  const NonIdealityConfig& nonideal() const { return nonideal_; }
  const mapper::PlacementPlan& plan() const { return plan_; }

  bool has_layer(int layer) const { return layers_.count(layer) > 0; }
  ChipLayer& layer(int id);
  const ChipLayer& layer(int id) const;
  const std::map<int, ChipLayer>& layers() const { return layers_; }

  /// Per-neuron offset trims (V) written by calibration, indexed by neuron id.
  std::array<double, kCoreSize>& offset_trim(int core_id);
  const std::array<double, kCoreSize>& offset_trim(int core_id) const;

  /// Monotone counter that keys the RNG substreams of each execution call.
  std::uint64_t next_invocation() { return invocation_++; }
  std::uint64_t invocations() const { return invocation_; }
  std::uint64_t program_calls() const { return program_calls_; }

  /// Reinstates a saved plan, layer table and counters. Cell contents, trims
  /// and LFSR registers are restored through the core accessors.
  void restore(mapper::PlacementPlan plan, std::map<int, ChipLayer> layers,
               std::uint64_t invocations, std::uint64_t program_calls);

  device::ProgramParams program_params;
  device::DeviceUpdateRule update_rule;
  device::RelaxationModel relaxation;
  int program_iterations = 3;

 private:
  friend ProgrammingReport program_chip(Chip&, const mapper::PlacementPlan&,
                                        const std::map<int, ChipLayer>&);
  void check_core(int id) const;

  std::uint64_t seed_;
  NonIdealityConfig nonideal_;
  mutable std::array<std::unique_ptr<CoreState>, kChipCores> cores_;
  std::array<bool, kChipCores> powered_{};
  std::array<std::array<double, kCoreSize>, kChipCores> trims_{};
  mapper::PlacementPlan plan_;
  std::map<int, ChipLayer> layers_;
  std::uint64_t invocation_ = 0;
  std::uint64_t program_calls_ = 0;  // keys relaxation; independent of reads
};

/// Programs every assignment of the given layers. The plan must validate and
/// must agree with any plan already on the chip for previously programmed
/// layers. Layers can be programmed incrementally.
ProgrammingReport program_chip(Chip& chip, const mapper::PlacementPlan& plan,
                               const std::map<int, ChipLayer>& layers);

struct LayerOutput {
  std::vector<std::vector<double>> values;  // per batch item, Σ x·w units (inputs in codes)
  OpTrace trace;
};

/// Executes a programmed layer on a batch. Bias pairs are driven at the
/// full-scale input code. Item b runs on duplicate group b mod groups.
LayerOutput execute_layer(Chip& chip, int layer, const std::vector<DigitalVector>& batch,
                          kernels::Exec exec = kernels::default_exec());

/// Neuron settings used on the cores of a layer: identity conversion at
/// in_bits+2 when the layer spans several row bands.
NeuronConfig segment_config(const ChipLayer& layer, std::size_t row_bands);
std::size_t row_bands(const mapper::PlacementPlan& plan, int layer);

/// Pre-ADC charge and ADC codes of one placed segment for one input item.
struct SegmentProbe {
  const mapper::Assignment* assignment = nullptr;
  std::vector<double> charge;
  std::vector<int> codes;
};

/// Measures the assignments of a layer on one item with the segment neuron
/// settings: every duplicate group when `group` is negative, else that group.
/// With `drive_bias` false the bias pairs see a zero input, so an all-zero
/// item exercises only the neuron offsets.
std::vector<SegmentProbe> probe_layer(Chip& chip, int layer, const DigitalVector& item,
                                      bool drive_bias, int group = -1);

// --- network graph -----------------------------------------------------------

struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0, in_c = 0;
  std::size_t k_h = 1, k_w = 1;
  std::size_t stride = 1, pad = 0;
  std::size_t out_h() const { return (in_h + 2 * pad - k_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - k_w) / stride + 1; }
};

enum class OpKind { dense, conv, relu, maxpool, flatten };

struct NetworkOp {
  OpKind kind = OpKind::dense;
  int layer = -1;             // chip layer for dense/conv
  double input_scale = 1.0;   // real value of one input code
  double output_gain = 1.0;   // requantization gain from calibration
  ConvGeometry conv;          // conv only
  std::size_t pool = 2;       // maxpool window and stride; input is HWC with conv.in_* dims
};

struct Network {
  std::vector<NetworkOp> ops;
};

/// Real-valued input codes: round half away from zero, clamped to ±cap.
DigitalVector quantize_input(const std::vector<double>& x, double scale, int bits);

/// Runs the graph on a batch; host ops are exact.
std::vector<std::vector<double>> run_network(Chip& chip, const Network& net,
                                             const std::vector<std::vector<double>>& inputs,
                                             OpTrace* trace = nullptr);

// --- energy / latency --------------------------------------------------------

struct EnergyConfig {
  double c_par = 1e-15;          // F per MAC line segment
  double c_wl = 5e-15;           // F per WL toggle
  double v_wl = 1.3;             // V
  double v_dd = 1.0;             // V, metadata
  double e_adc_step = 2e-14;     // J per charge-decrement step
  double e_neuron_static = 5e-14;  // J per conversion
  double ns_per_event = 10.0;

  void validate() const;
};

struct EnergyReport {
  double mac = 0.0, wordline = 0.0, adc = 0.0, neuron_static = 0.0;
  double total() const { return mac + wordline + adc + neuron_static; }
};

/// E = MACs·c_par·var(V_in) + WL toggles·c_wl·v_wl² + steps·e_adc_step + conversions·e_static.
EnergyReport estimate_energy(const OpTrace& trace, const EnergyConfig& cfg);
double estimate_latency_ns(const OpTrace& trace, const EnergyConfig& cfg);

}  // namespace cimsim
