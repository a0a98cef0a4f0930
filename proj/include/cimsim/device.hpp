#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "cimsim/rng.hpp"

namespace cimsim::device {

/// One RRAM cell. Conductances are in µS throughout the simulator.
struct CellState {
  double conductance = 0.0;
  int polarity_reversals = 0;
  int pulses_applied = 0;
  // Set whenever a pulse lands on the cell; cleared by the next relaxation
  // event. Cells that have already relaxed and were left alone do not drift
  // again, which is what makes iterative reprogramming converge.
  bool pending_relaxation = true;
};

struct ProgramParams {
  double v_set_init = 1.2;    // V
  double v_reset_init = 1.5;  // V
  double v_increment = 0.1;   // V per pulse within one polarity run
  double pulse_width = 1e-6;  // s, metadata only
  double acceptance = 1.0;    // ±µS around the target
  int reversal_timeout = 30;
  double g_min = 1.0;
  double g_max = 40.0;
  double g_max_hard = 50.0;  // physical ceiling, ≥ g_max
  int max_pulses = 2000;     // guard for degenerate rules that never move the cell

  void validate() const;
};

/// Synthetic pulse response: Δg = gain·max(V − threshold, 0) + N(0, cycle_noise_sigma),
/// positive for SET, negative for RESET.
struct DeviceUpdateRule {
  double set_gain = 5.0;  // µS/V above threshold
  double set_threshold = 1.1;
  double reset_gain = 5.0;
  double reset_threshold = 1.4;
  double cycle_noise_sigma = 0.5;  // µS

  void validate() const;
};

/// Post-programming relaxation: Gaussian with a conductance-dependent σ.
struct RelaxationModel {
  // (conductance µS, σ µS) sample points, sorted by conductance.
  std::vector<std::pair<double, double>> sigma_table{
      {1.0, 0.5}, {12.0, 3.87}, {26.0, 2.8}, {40.0, 2.0}};
  double mean_bias = 0.0;
  double g_floor = 1.0;     // cells at or below this are perturbed one-sidedly
  double g_ceiling = 50.0;  // g_max_hard

  /// Piecewise-linear interpolation, clamped to the endpoint values.
  double sigma_at(double g) const;
  void validate() const;

  static RelaxationModel zero();
};

struct ProgramResult {
  bool converged = false;
  int pulses = 0;
  int reversals = 0;
  double final_g = 0.0;
};

/// Differential encoding of one weight onto a (g⁺, g⁻) pair.
std::pair<double, double> encode_weight(double w, double w_max, double g_min, double g_max);
double decode_weight(double g_plus, double g_minus, double w_max, double g_max);

/// Incremental-pulse write-verify on one cell. Reads are noiseless and happen
/// after every pulse.
ProgramResult write_verify_cell(CellState& cell, double target, const ProgramParams& params,
                                const DeviceUpdateRule& rule, Engine& rng);

/// One relaxation draw on a single cell (no-op unless `pending_relaxation`).
void relax_cell(CellState& cell, const RelaxationModel& model, Engine& rng);

/// Relaxes every cell with `pending_relaxation` set. Each cell draws from its
/// own substream `stream.derive(index)`.
void apply_relaxation(std::span<CellState> cells, const RelaxationModel& model,
                      const RngStream& stream);

struct IterativeStats {
  double initial_sigma = 0.0;             // deviation right after the first write-verify pass
  std::size_t initial_failures = 0;       // cells that hit the timeout on the first pass
  std::vector<double> deviation_sigma;    // one per iteration, measured after relaxation
  std::vector<std::size_t> reprogrammed;  // cells rewritten in each iteration
  std::size_t failures = 0;               // non-converged cells in the most recent pass
  std::size_t total_pulses = 0;
  std::size_t programmed_cells = 0;       // cells written at least once (initial pass)

  double mean_pulses() const {
    return programmed_cells == 0 ? 0.0
                                 : static_cast<double>(total_pulses) / programmed_cells;
  }
};

/// Initial write-verify of every cell, followed by `iterations` rounds of
/// relax → measure → rewrite cells outside the acceptance window.
IterativeStats program_array_iterative(std::span<CellState> cells, std::span<const double> targets,
                                       int iterations, const ProgramParams& params,
                                       const DeviceUpdateRule& rule,
                                       const RelaxationModel& model, const RngStream& stream);

/// Population σ of (g − target).
double deviation_sigma(std::span<const CellState> cells, std::span<const double> targets);

}  // namespace cimsim::device
