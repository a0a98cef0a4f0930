#include "cimsim/kernels.hpp"

#include <algorithm>
#include <atomic>

#include "cimsim/error.hpp"

namespace cimsim::kernels {

namespace {

std::atomic<Exec> g_default_exec{Exec::parallel};

void check_settle_args(const GridView& g, std::span<const double> drive,
                       std::span<const std::uint8_t> conducting, std::span<double> numer,
                       std::span<double> denom) {
  if (drive.size() != g.n_in || conducting.size() != g.n_in || numer.size() != g.n_out ||
      denom.size() != g.n_out) {
    fail(ErrorKind::invalid_argument, "settle: buffer sizes do not match the grid view");
  }
}

}  // namespace

Exec default_exec() { return g_default_exec.load(std::memory_order_relaxed); }
void set_default_exec(Exec exec) { g_default_exec.store(exec, std::memory_order_relaxed); }

void settle_serial(const GridView& g, std::span<const double> drive,
                   std::span<const std::uint8_t> conducting, std::span<double> numer,
                   std::span<double> denom) {
  check_settle_args(g, drive, conducting, numer, denom);
  for (std::size_t o = 0; o < g.n_out; ++o) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t c = 0; c < g.n_in; ++c) {
      if (!conducting[c]) continue;
      const double gco = g.at(c, o);
      num += drive[c] * gco;
      den += gco;
    }
    numer[o] = num;
    denom[o] = den;
  }
}

void settle_parallel(const GridView& g, std::span<const double> drive,
                     std::span<const std::uint8_t> conducting, std::span<double> numer,
                     std::span<double> denom) {
  check_settle_args(g, drive, conducting, numer, denom);
  const auto n_out = static_cast<std::ptrdiff_t>(g.n_out);
  if (g.out_stride == 1) {
    // Output lines are contiguous: sweep input lines in order and accumulate a
    // block of outputs per thread. Per-output summation order matches the
    // serial kernel.
    constexpr std::ptrdiff_t kBlock = 32;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b0 = 0; b0 < n_out; b0 += kBlock) {
      const std::ptrdiff_t b1 = std::min(b0 + kBlock, n_out);
      double num[kBlock] = {};
      double den[kBlock] = {};
      for (std::size_t c = 0; c < g.n_in; ++c) {
        if (!conducting[c]) continue;
        const double* row = g.data + c * g.in_stride;
        const double v = drive[c];
        for (std::ptrdiff_t o = b0; o < b1; ++o) {
          num[o - b0] += v * row[o];
          den[o - b0] += row[o];
        }
      }
      for (std::ptrdiff_t o = b0; o < b1; ++o) {
        numer[static_cast<std::size_t>(o)] = num[o - b0];
        denom[static_cast<std::size_t>(o)] = den[o - b0];
      }
    }
  } else {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < n_out; ++o) {
      double num = 0.0;
      double den = 0.0;
      const double* line = g.data + static_cast<std::size_t>(o) * g.out_stride;
      for (std::size_t c = 0; c < g.n_in; ++c) {
        if (!conducting[c]) continue;
        const double gco = line[c * g.in_stride];
        num += drive[c] * gco;
        den += gco;
      }
      numer[static_cast<std::size_t>(o)] = num;
      denom[static_cast<std::size_t>(o)] = den;
    }
  }
}

void write_verify_serial(std::span<device::CellState> cells, std::span<const double> targets,
                         std::span<const std::size_t> indices, const device::ProgramParams& params,
                         const device::DeviceUpdateRule& rule, const RngStream& stream,
                         std::span<device::ProgramResult> results) {
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    auto rng = stream.derive(i).engine();
    results[k] = device::write_verify_cell(cells[i], targets[i], params, rule, rng);
  }
}

void write_verify_parallel(std::span<device::CellState> cells, std::span<const double> targets,
                           std::span<const std::size_t> indices,
                           const device::ProgramParams& params,
                           const device::DeviceUpdateRule& rule, const RngStream& stream,
                           std::span<device::ProgramResult> results) {
  const auto n = static_cast<std::ptrdiff_t>(indices.size());
  // Errors cannot cross the OpenMP region boundary; validate targets up front.
  for (std::size_t i : indices) {
    if (targets[i] < params.g_min || targets[i] > params.g_max) {
      fail(ErrorKind::out_of_range, "write-verify target outside [g_min, g_max]");
    }
  }
#pragma omp parallel for schedule(dynamic, 256)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const std::size_t i = indices[static_cast<std::size_t>(k)];
    auto rng = stream.derive(i).engine();
    results[static_cast<std::size_t>(k)] =
        device::write_verify_cell(cells[i], targets[i], params, rule, rng);
  }
}

void relax_serial(std::span<device::CellState> cells, const device::RelaxationModel& model,
                  const RngStream& stream) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].pending_relaxation) continue;
    auto rng = stream.derive(i).engine();
    device::relax_cell(cells[i], model, rng);
  }
}

void relax_parallel(std::span<device::CellState> cells, const device::RelaxationModel& model,
                    const RngStream& stream) {
  const auto n = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(static, 1024)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto& cell = cells[static_cast<std::size_t>(i)];
    if (!cell.pending_relaxation) continue;
    auto rng = stream.derive(static_cast<std::uint64_t>(i)).engine();
    device::relax_cell(cell, model, rng);
  }
}

}  // namespace cimsim::kernels
