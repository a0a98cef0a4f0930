// Serial reference vs OpenMP kernels, plus a whole programmed layer executed
// both ways. Both variants produce bit-identical results (see test_kernels).

#include <benchmark/benchmark.h>

#include <numeric>
#include <random>
#include <vector>

#include "cimsim/chip.hpp"
#include "cimsim/coopt.hpp"
#include "cimsim/kernels.hpp"

using namespace cimsim;

namespace {

kernels::Exec exec_of(const benchmark::State& s) {
  return s.range(0) == 0 ? kernels::Exec::serial : kernels::Exec::parallel;
}

void label(benchmark::State& s) { s.SetLabel(s.range(0) == 0 ? "serial" : "parallel"); }

void BM_settle(benchmark::State& state) {
  constexpr std::size_t n = 256;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> g(1.0, 40.0), v(-0.5, 0.5);
  std::vector<double> grid(n * n), drive(n), numer(n), denom(n);
  for (auto& x : grid) x = g(rng);
  for (auto& x : drive) x = v(rng);
  std::vector<std::uint8_t> on(n, 1);
  const kernels::GridView view{grid.data(), n, 1, n, n};
  const auto exec = exec_of(state);
  for (auto _ : state) {
    kernels::settle(exec, view, drive, on, numer, denom);
    benchmark::DoNotOptimize(numer.data());
  }
  label(state);
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n));
}

void BM_write_verify(benchmark::State& state) {
  constexpr std::size_t n = 16384;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> t(1.0, 40.0);
  std::vector<double> targets(n);
  for (auto& x : targets) x = t(rng);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<device::ProgramResult> results(n);
  const device::ProgramParams params;
  const device::DeviceUpdateRule rule;
  const RngStream stream(3);
  for (auto _ : state) {
    state.PauseTiming();
    std::vector<device::CellState> cells(n);
    for (auto& c : cells) c.conductance = 1.0;
    state.ResumeTiming();
    if (state.range(0) == 0) {
      kernels::write_verify_serial(cells, targets, idx, params, rule, stream, results);
    } else {
      kernels::write_verify_parallel(cells, targets, idx, params, rule, stream, results);
    }
    benchmark::DoNotOptimize(results.data());
  }
  label(state);
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}

void BM_relax(benchmark::State& state) {
  constexpr std::size_t n = 65536;
  std::vector<device::CellState> cells(n);
  const device::RelaxationModel model;
  const RngStream stream(4);
  for (auto _ : state) {
    state.PauseTiming();
    for (auto& c : cells) {
      c.conductance = 20.0;
      c.pending_relaxation = true;
    }
    state.ResumeTiming();
    if (state.range(0) == 0) {
      kernels::relax_serial(cells, model, stream);
    } else {
      kernels::relax_parallel(cells, model, stream);
    }
    benchmark::DoNotOptimize(cells.data());
  }
  label(state);
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}

// One 256→128 dense layer on a single core, batch of 32 inputs.
void BM_execute_layer(benchmark::State& state) {
  nn::Mlp m = nn::init_mlp({127, 128}, 5);
  Chip chip(5);
  NeuronConfig base;
  base.q_step = 0.02;
  std::map<int, ChipLayer> layers{{0, coopt::to_chip_layer(m, 0, base)}};
  mapper::PlaceHints hints;
  hints.auto_duplicate = false;
  const auto plan = mapper::place({coopt::segments_for(m, 0)}, kChipCores, hints);
  program_chip(chip, plan, layers);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> code(0, 7);
  std::vector<DigitalVector> batch(32);
  for (auto& b : batch) {
    b.bits = 4;
    b.values.resize(127);
    for (auto& v : b.values) v = code(rng);
  }
  const auto exec = exec_of(state);
  for (auto _ : state) {
    auto out = execute_layer(chip, 0, batch, exec);
    benchmark::DoNotOptimize(out.values.data());
  }
  label(state);
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch.size()));
}

}  // namespace

BENCHMARK(BM_settle)->Arg(0)->Arg(1);
BENCHMARK(BM_write_verify)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_relax)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_execute_layer)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
