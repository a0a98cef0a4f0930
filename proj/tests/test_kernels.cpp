#include <doctest.h>

#include <random>
#include <vector>

#include "cimsim/device.hpp"
#include "cimsim/kernels.hpp"

using namespace cimsim;

namespace {

struct ExecGuard {
  kernels::Exec saved = kernels::default_exec();
  ~ExecGuard() { kernels::set_default_exec(saved); }
};

std::vector<double> random_grid(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> g(0.0, 40.0);
  std::vector<double> v(256 * 256);
  for (auto& x : v) x = g(rng);
  return v;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("settle: serial and parallel agree bit for bit on both strides") {
  const auto grid = random_grid(1);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> level(-1, 1);
  std::vector<double> drive(256);
  std::vector<std::uint8_t> conducting(256);
  for (std::size_t c = 0; c < 256; ++c) {
    drive[c] = 0.5 * level(rng);
    conducting[c] = (c % 3) != 0;
  }
  for (int transpose = 0; transpose < 2; ++transpose) {
    kernels::GridView v;
    v.data = grid.data() + 7 * (transpose ? 256 : 1);
    v.in_stride = transpose ? 1 : 256;
    v.out_stride = transpose ? 256 : 1;
    v.n_in = 256;
    v.n_out = 201;
    std::vector<double> n1(201), d1(201), n2(201), d2(201);
    kernels::settle_serial(v, drive, conducting, n1, d1);
    kernels::settle_parallel(v, drive, conducting, n2, d2);
    for (std::size_t o = 0; o < 201; ++o) {
      CHECK(n1[o] == n2[o]);
      CHECK(d1[o] == d2[o]);
    }
  }
}

TEST_CASE("write-verify and relaxation kernels: serial and parallel agree") {
  std::vector<device::CellState> a(20000), b(20000);
  std::vector<double> targets(a.size());
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1.0, 40.0);
  for (auto& t : targets) t = u(rng);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < a.size(); i += 2) idx.push_back(i);
  std::vector<device::ProgramResult> ra(idx.size()), rb(idx.size());
  const RngStream s(77);
  kernels::write_verify_serial(a, targets, idx, {}, {}, s, ra);
  kernels::write_verify_parallel(b, targets, idx, {}, {}, s, rb);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    CHECK(ra[k].pulses == rb[k].pulses);
    CHECK(ra[k].converged == rb[k].converged);
  }
  kernels::relax_serial(a, {}, s.derive(1));
  kernels::relax_parallel(b, {}, s.derive(1));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].conductance == b[i].conductance);
}

TEST_CASE("iterative programming is independent of the execution mode") {
  ExecGuard guard;
  std::vector<double> targets(4096);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1.0, 40.0);
  for (auto& t : targets) t = u(rng);
  std::vector<device::CellState> a(targets.size()), b(targets.size());
  kernels::set_default_exec(kernels::Exec::serial);
  const auto sa = device::program_array_iterative(a, targets, 3, {}, {}, {}, RngStream(3));
  kernels::set_default_exec(kernels::Exec::parallel);
  const auto sb = device::program_array_iterative(b, targets, 3, {}, {}, {}, RngStream(3));
  CHECK(sa.total_pulses == sb.total_pulses);
  CHECK(sa.deviation_sigma == sb.deviation_sigma);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].conductance == b[i].conductance);
}

TEST_CASE("settle rejects mismatched buffers") {
  std::vector<double> grid(4, 1.0), drive(2), n(3), d(3);
  std::vector<std::uint8_t> on(2, 1);
  kernels::GridView v{grid.data(), 2, 1, 2, 2};
  CHECK_THROWS(kernels::settle_serial(v, drive, on, n, d));
}

}  // TEST_SUITE
