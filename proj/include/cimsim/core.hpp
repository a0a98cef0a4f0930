#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cimsim/device.hpp"
#include "cimsim/kernels.hpp"
#include "cimsim/neuron.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

inline constexpr std::size_t kCoreSize = 256;
inline constexpr int kCorelets = 16;

/// Signed integer vector with a declared bit width (1 sign bit + magnitude).
struct DigitalVector {
  std::vector<int> values;
  int bits = 4;

  int cap() const { return (1 << (bits - 1)) - 1; }
  void validate() const;
};

enum class Direction {
  forward,       // drive BLs, sense SLs, results to SL registers
  backward,      // drive SLs, sense BLs, results to BL registers
  recurrent_bl,  // drive BLs, sense SLs, results routed back to BL registers
  recurrent_sl,  // drive SLs, sense BLs, results routed back to SL registers
};

bool drives_bitlines(Direction d);

struct NonIdealityConfig {
  bool relaxation = false;    // (v) conductance relaxation after programming
  bool write_verify = false;  // (iv) finite programming resolution; off writes targets exactly
  bool ir_drop_driver = false;  // (ii)
  double r_driver = 200.0;      // Ω
  bool ir_drop_wire = false;    // (i), (iii) first-order series model
  double r_wire = 1.0;          // Ω per cell pitch
  double coupling_sigma = 0.0;  // V, (vi) disturbance per settle event
  double adc_offset_sigma = 0.0;  // V, static per-neuron offsets drawn at chip construction

  static NonIdealityConfig ideal() { return {}; }
  static NonIdealityConfig all();
  bool analog_ideal() const {
    return !ir_drop_driver && !ir_drop_wire && coupling_sigma == 0.0;
  }
  void validate() const;
};

/// (bl, sl) lines wired to the neuron in corelet (i, j).
std::pair<int, int> neuron_index(int i, int j);
/// Neuron id (16 i + j) that senses the given line.
int neuron_on_bitline(int bl);
int neuron_on_sourceline(int sl);

/// Steady-state open-circuit voltage of an output line, relative to V_ref.
double settle_voltage(std::span<const double> delta_v, std::span<const double> g);

/// Operation counts for energy and latency estimation.
struct OpTrace {
  std::uint64_t mvms = 0;
  std::uint64_t wl_toggles = 0;
  std::uint64_t input_pulses = 0;
  std::uint64_t sample_cycles = 0;
  std::uint64_t settle_events = 0;
  std::uint64_t adc_steps = 0;
  std::uint64_t conversions = 0;
  std::uint64_t macs = 0;
  double mac_var_weighted = 0.0;  // Σ MACs·var(V_in) over MVMs, V²
  std::uint64_t latency_units = 0;

  OpTrace& operator+=(const OpTrace& o);
  friend OpTrace operator+(OpTrace a, const OpTrace& b) { return a += b; }
  bool operator==(const OpTrace&) const = default;
};

/// A 256×256 array with its 256 neurons.
class CoreState {
 public:
  CoreState();

  const device::CellState& cell(std::size_t row, std::size_t col) const {
    return cells_[row * kCoreSize + col];
  }
  double conductance(std::size_t row, std::size_t col) const { return g_[row * kCoreSize + col]; }
  const double* conductance_data() const { return g_.data(); }

  void set_conductance(std::size_t row, std::size_t col, double g);
  /// Overwrites a cell including its programming history.
  void set_cell(std::size_t row, std::size_t col, const device::CellState& state);

  /// Writes a row-major block of targets exactly (ideal programming).
  void write_region_exact(std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols,
                          std::span<const double> targets);

  /// Iterative write-verify of a block. Cells keep their pending-relaxation
  /// flags; call relax() for the post-programming relaxation event.
  device::IterativeStats program_region(std::size_t row0, std::size_t col0, std::size_t rows,
                                        std::size_t cols, std::span<const double> targets,
                                        int iterations, const device::ProgramParams& params,
                                        const device::DeviceUpdateRule& rule,
                                        const device::RelaxationModel& model,
                                        const RngStream& stream);

  void relax(const device::RelaxationModel& model, const RngStream& stream);

  /// Static comparator offsets in V, indexed by neuron id.
  std::array<double, kCoreSize>& neuron_offsets() { return offsets_; }
  const std::array<double, kCoreSize>& neuron_offsets() const { return offsets_; }

  /// Per-neuron LFSR registers used by stochastic activation; they advance on
  /// every stochastic conversion.
  std::span<LfsrPair> lfsr_states() { return lfsr_; }
  void seed_lfsr(std::uint64_t seed);

 private:
  void sync_region(std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols);

  std::vector<device::CellState> cells_;
  std::vector<double> g_;  // dense mirror of cells_[k].conductance for the MVM kernels
  std::array<double, kCoreSize> offsets_{};
  std::array<LfsrPair, kCoreSize> lfsr_{};
};

struct MvmRequest {
  Direction direction = Direction::forward;
  std::size_t input_offset = 0;   // first driven line; must be even
  std::span<const int> inputs;    // one value per differential pair of input lines
  std::size_t output_offset = 0;  // first sensed line
  std::size_t output_count = 0;
  std::span<const double> offset_trim;   // per neuron id, V; added to the static offsets
  std::span<const double> dither_scale;  // per sensed line; multiplies stochastic_range·q_step
};

struct IntegrateResult {
  std::vector<double> charge;  // per sensed line, in V of integrated ΔV
  OpTrace trace;
};

/// Bit-serial input phase: one ternary pulse per magnitude bit (MSB first),
/// settle, then 2^k sample/integrate cycles for bit k.
IntegrateResult mvm_integrate(const CoreState& core, const MvmRequest& request,
                              const NeuronConfig& cfg, const NonIdealityConfig& nonideal,
                              Engine& rng, kernels::Exec exec = kernels::default_exec());

struct MvmOutput {
  std::vector<int> codes;                // per sensed line
  std::vector<std::size_t> registers;    // destination register of each code
  OpTrace trace;
};

/// Full MVM: integration followed by per-neuron conversion. Stochastic
/// activation needs `lfsr` (one pair per neuron id) and yields codes in {0, 1}.
MvmOutput mvm(const CoreState& core, const MvmRequest& request, const NeuronConfig& cfg,
              const NonIdealityConfig& nonideal, Engine& rng, std::span<LfsrPair> lfsr = {},
              kernels::Exec exec = kernels::default_exec());

/// Neuron id that senses output line `line` for the given direction.
int sensing_neuron(Direction d, std::size_t line);
/// Register that receives the result sensed on `line`.
std::size_t destination_register(Direction d, std::size_t line);

/// output_j = code_j · (q_step / charge_scale) · Σ_i G_ij / reference_scale, where
/// reference_scale = v_read · g_max / w_max turns the result into Σ x·w units.
std::vector<double> denormalize(std::span<const int> codes, std::span<const double> column_sums,
                                const NeuronConfig& cfg, double reference_scale);

}  // namespace cimsim
