#pragma once

// Data-parallel inner loops. Each kernel has a plain serial reference version
// and an OpenMP version; both visit elements in the same per-element order and
// derive per-element random substreams from the same keys, so their results
// are bit-identical. tests/test_kernels.cpp holds them to that.

#include <cstddef>
#include <cstdint>
#include <span>

#include "cimsim/device.hpp"
#include "cimsim/rng.hpp"

namespace cimsim::kernels {

enum class Exec { serial, parallel };

/// Strided view of a core's conductance grid seen from the driven axis:
/// G(input line c, output line o) = data[c * in_stride + o * out_stride].
struct GridView {
  const double* data = nullptr;
  std::size_t in_stride = 0;
  std::size_t out_stride = 0;
  std::size_t n_in = 0;
  std::size_t n_out = 0;

  double at(std::size_t c, std::size_t o) const { return data[c * in_stride + o * out_stride]; }
};

/// numer[o] = Σ_c drive[c]·G(c,o), denom[o] = Σ_c G(c,o), over conducting lines c.
void settle_serial(const GridView& g, std::span<const double> drive,
                   std::span<const std::uint8_t> conducting, std::span<double> numer,
                   std::span<double> denom);
void settle_parallel(const GridView& g, std::span<const double> drive,
                     std::span<const std::uint8_t> conducting, std::span<double> numer,
                     std::span<double> denom);

inline void settle(Exec exec, const GridView& g, std::span<const double> drive,
                   std::span<const std::uint8_t> conducting, std::span<double> numer,
                   std::span<double> denom) {
  if (exec == Exec::parallel) {
    settle_parallel(g, drive, conducting, numer, denom);
  } else {
    settle_serial(g, drive, conducting, numer, denom);
  }
}

/// Write-verify of cells[indices[k]] toward targets[indices[k]]; the k-th cell
/// uses stream.derive(indices[k]).
void write_verify_serial(std::span<device::CellState> cells, std::span<const double> targets,
                         std::span<const std::size_t> indices, const device::ProgramParams& params,
                         const device::DeviceUpdateRule& rule, const RngStream& stream,
                         std::span<device::ProgramResult> results);
void write_verify_parallel(std::span<device::CellState> cells, std::span<const double> targets,
                           std::span<const std::size_t> indices,
                           const device::ProgramParams& params,
                           const device::DeviceUpdateRule& rule, const RngStream& stream,
                           std::span<device::ProgramResult> results);

void relax_serial(std::span<device::CellState> cells, const device::RelaxationModel& model,
                  const RngStream& stream);
void relax_parallel(std::span<device::CellState> cells, const device::RelaxationModel& model,
                    const RngStream& stream);

/// Process-wide default used by the device/core entry points.
Exec default_exec();
void set_default_exec(Exec exec);

}  // namespace cimsim::kernels
