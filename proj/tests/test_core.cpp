#include <doctest.h>

#include <random>
#include <set>
#include <vector>

#include "cimsim/core.hpp"
#include "cimsim/error.hpp"
#include "cimsim/mapper.hpp"
#include "oracle.hpp"

using namespace cimsim;

namespace {

mapper::ConductanceMatrix random_matrix(std::size_t fan_in, std::size_t out, std::uint64_t seed,
                                        bool with_bias = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  mapper::LayerSpec l;
  l.in = fan_in;
  l.out = out;
  l.weights.resize(fan_in * out);
  for (auto& w : l.weights) w = u(rng);
  if (with_bias) {
    l.bias.resize(out);
    for (auto& b : l.bias) b = 0.5 * u(rng);
  }
  return mapper::conv_to_matrix(l, 1.0, 40.0);
}

void load(CoreState& core, const mapper::ConductanceMatrix& m, std::size_t row0 = 0,
          std::size_t col0 = 0) {
  core.write_region_exact(row0, col0, m.rows, m.cols, m.targets);
}

std::vector<int> random_inputs(std::size_t n, int cap, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-cap, cap);
  std::vector<int> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

MvmRequest forward(std::span<const int> x, std::size_t cols) {
  MvmRequest r;
  r.inputs = x;
  r.output_count = cols;
  return r;
}

}  // namespace

TEST_SUITE("core") {

TEST_CASE("neuron_index pins and bijection") {
  CHECK(neuron_index(0, 0) == std::pair{0, 0});
  CHECK(neuron_index(1, 2) == std::pair{18, 33});
  std::set<int> bls, sls;
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      auto [bl, sl] = neuron_index(i, j);
      bls.insert(bl);
      sls.insert(sl);
      CHECK(neuron_on_bitline(bl) == 16 * i + j);
      CHECK(neuron_on_sourceline(sl) == 16 * i + j);
    }
  }
  CHECK(bls.size() == 256);
  CHECK(sls.size() == 256);
  CHECK(*bls.rbegin() == 255);
  CHECK_THROWS_AS(neuron_index(16, 0), Error);
}

TEST_CASE("recurrent routing returns results to the other register set of the same neuron") {
  const auto [bl, sl] = neuron_index(1, 2);
  CHECK(destination_register(Direction::recurrent_bl, static_cast<std::size_t>(sl)) ==
        static_cast<std::size_t>(bl));
  CHECK(destination_register(Direction::recurrent_sl, static_cast<std::size_t>(bl)) ==
        static_cast<std::size_t>(sl));
  CHECK(destination_register(Direction::forward, 33) == 33);
  CHECK(sensing_neuron(Direction::forward, static_cast<std::size_t>(sl)) == 18);
  CHECK(sensing_neuron(Direction::backward, static_cast<std::size_t>(bl)) == 18);
}

TEST_CASE("settle_voltage") {
  const std::vector<double> v{0.2, 0.2, 0.2};
  const std::vector<double> g{3.0, 17.0, 9.0};
  CHECK(settle_voltage(v, g) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(settle_voltage(std::vector<double>{0.3, -0.3}, std::vector<double>{30, 10}) ==
        doctest::Approx(0.15).epsilon(1e-15));
  const std::vector<double> dv{0.5, -0.5, 0.0, 0.5};
  const std::vector<double> g1{4, 9, 13, 2};
  std::vector<double> g7(g1);
  for (auto& x : g7) x *= 7.0;
  CHECK(settle_voltage(dv, g7) == doctest::Approx(settle_voltage(dv, g1)).epsilon(1e-14));
  CHECK_THROWS_AS(settle_voltage(std::vector<double>{0.1}, std::vector<double>{0.0}), Error);
}

TEST_CASE("mvm_integrate: zero input gives zero charge") {
  CoreState core;
  load(core, random_matrix(20, 10, 1));
  const std::vector<int> x(20, 0);
  Engine rng(0);
  const auto r = mvm_integrate(core, forward(x, 10), NeuronConfig{}, {}, rng);
  for (double q : r.charge) CHECK(q == 0.0);
}

TEST_CASE("mvm_integrate: charge is additive over bit planes") {
  CoreState core;
  load(core, random_matrix(12, 8, 2));
  NeuronConfig cfg;
  Engine rng(0);
  std::vector<int> five(12, 0), one(12, 0);
  five[4] = 5;
  one[4] = 1;
  const auto q5 = mvm_integrate(core, forward(five, 8), cfg, {}, rng).charge;
  const auto q1 = mvm_integrate(core, forward(one, 8), cfg, {}, rng).charge;
  for (std::size_t o = 0; o < 8; ++o) CHECK(q5[o] == doctest::Approx(5 * q1[o]).epsilon(1e-12));

  std::mt19937_64 pick(3);
  cfg.in_bits = 6;
  for (int t = 0; t < 20; ++t) {
    const auto x = random_inputs(12, 31, pick);
    const auto qx = mvm_integrate(core, forward(x, 8), cfg, {}, rng).charge;
    std::vector<double> sum(8, 0.0);
    for (int k = 0; k < 5; ++k) {
      std::vector<int> plane(12);
      for (std::size_t i = 0; i < 12; ++i) plane[i] = ((std::abs(x[i]) >> k) & 1) * (x[i] < 0 ? -1 : 1);
      NeuronConfig one_bit = cfg;
      one_bit.in_bits = 2;
      const auto qp = mvm_integrate(core, forward(plane, 8), one_bit, {}, rng).charge;
      for (std::size_t o = 0; o < 8; ++o) sum[o] += (1 << k) * qp[o];
    }
    for (std::size_t o = 0; o < 8; ++o) CHECK(std::abs(qx[o] - sum[o]) <= 1e-12);
  }
}

TEST_CASE("mvm_integrate: pulse and cycle counts") {
  CoreState core;
  load(core, random_matrix(16, 4, 3));
  for (int bits = 1; bits <= 6; ++bits) {
    NeuronConfig cfg;
    cfg.in_bits = bits;
    const std::vector<int> x(16, 0);
    Engine rng(0);
    const auto t = mvm_integrate(core, forward(x, 4), cfg, {}, rng).trace;
    CHECK(t.input_pulses == static_cast<std::uint64_t>(bits - 1));
    CHECK(t.sample_cycles == (1u << (bits - 1)) - 1);
    CHECK(t.wl_toggles == static_cast<std::uint64_t>(bits - 1) * 32);
    CHECK(t.macs == 64);
  }
}

TEST_CASE("mvm_integrate: bit-width and geometry errors") {
  CoreState core;
  load(core, random_matrix(8, 4, 4));
  NeuronConfig cfg;
  Engine rng(0);
  std::vector<int> x(8, 0);
  x[0] = 8;
  try {
    mvm_integrate(core, forward(x, 4), cfg, {}, rng);
    FAIL("expected a bit-width error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::bit_width);
  }
  x[0] = 0;
  auto req = forward(x, 4);
  req.input_offset = 1;
  CHECK_THROWS_AS(mvm_integrate(core, req, cfg, {}, rng), Error);
  req = forward(x, 4);
  req.output_offset = 10;  // unprogrammed columns
  try {
    mvm_integrate(core, req, cfg, {}, rng);
    FAIL("expected a zero-conductance error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::zero_conductance);
  }
}

TEST_CASE("mvm: zero weights give zero codes") {
  CoreState core;
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 8; ++c) core.set_conductance(r, c, 1.0);
  }
  std::mt19937_64 pick(1);
  const auto x = random_inputs(16, 7, pick);
  Engine rng(0);
  const auto out = mvm(core, forward(x, 8), NeuronConfig{}, {}, rng);
  for (int c : out.codes) CHECK(c == 0);
}

TEST_CASE("mvm: ideal mode matches the quantized dot-product oracle") {
  CoreState core;
  const auto m = random_matrix(16, 16, 5);
  load(core, m);
  NeuronConfig cfg;
  cfg.q_step = 0.004;
  std::mt19937_64 pick(6);
  Engine rng(0);
  for (int t = 0; t < 100; ++t) {
    const auto x = random_inputs(m.rows / 2, cfg.input_cap(), pick);
    const auto out = mvm(core, forward(x, 16), cfg, {}, rng);
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(out.codes[c] ==
            oracle::column_code(m, 0, m.rows, c, x, cfg.v_read, cfg.q_step, 1.0, cfg.code_cap()));
    }
  }
}

TEST_CASE("mvm: forward equals the SL-driven direction on transposed targets") {
  const auto m = random_matrix(24, 20, 7);
  CoreState a, b;
  load(a, m);
  // Transposed layout: pairs become adjacent columns, outputs become rows.
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) b.set_conductance(c, r, m.at(r, c));
  }
  NeuronConfig cfg;
  cfg.q_step = 0.003;
  std::mt19937_64 pick(8);
  Engine rng(0);
  for (Direction d : {Direction::recurrent_sl, Direction::backward}) {
    for (int t = 0; t < 30; ++t) {
      const auto x = random_inputs(m.rows / 2, cfg.input_cap(), pick);
      const auto fwd = mvm(a, forward(x, 20), cfg, {}, rng);
      auto req = forward(x, 20);
      req.direction = d;
      const auto rev = mvm(b, req, cfg, {}, rng);
      CHECK(fwd.codes == rev.codes);
      std::vector<double> sums(20, 0.0);
      for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < 20; ++c) sums[c] += m.at(r, c);
      }
      CHECK(denormalize(fwd.codes, sums, cfg, 1.0) == denormalize(rev.codes, sums, cfg, 1.0));
    }
  }
}

TEST_CASE("mvm: column conductance scaling leaves codes unchanged") {
  const auto m = random_matrix(30, 12, 9);
  NeuronConfig cfg;
  cfg.q_step = 0.002;
  std::mt19937_64 pick(10);
  for (double k : {0.5, 2.0}) {
    CoreState base, scaled;
    load(base, m);
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t c = 0; c < m.cols; ++c) {
        scaled.set_conductance(r, c, m.at(r, c) * (c % 2 ? k : 1.0));
      }
    }
    Engine rng(0);
    for (int t = 0; t < 50; ++t) {
      const auto x = random_inputs(30, cfg.input_cap(), pick);
      CHECK(mvm(base, forward(x, 12), cfg, {}, rng).codes ==
            mvm(scaled, forward(x, 12), cfg, {}, rng).codes);
    }
  }
}

TEST_CASE("denormalize") {
  NeuronConfig cfg;
  const std::vector<double> sums{10.0, 20.0};
  CHECK(denormalize(std::vector<int>{0, 0}, sums, cfg, 3.0) == std::vector<double>{0.0, 0.0});
  const auto one = denormalize(std::vector<int>{1, 1}, std::vector<double>{8 * 5.0, 8 * 5.0}, cfg, 2.0);
  CHECK(one[0] == doctest::Approx(cfg.q_step * 40.0 / 2.0));
  // Doubling a column's conductances halves its code; the factor doubles.
  const auto a = denormalize(std::vector<int>{40}, std::vector<double>{10.0}, cfg, 1.0);
  const auto b = denormalize(std::vector<int>{20}, std::vector<double>{20.0}, cfg, 1.0);
  CHECK(a[0] == doctest::Approx(b[0]));
  CHECK_THROWS_AS(denormalize(std::vector<int>{1}, std::vector<double>{0.0}, cfg, 1.0), Error);
}

TEST_CASE("non-idealities: zero resistances reproduce the ideal model") {
  CoreState core;
  load(core, random_matrix(40, 30, 11));
  NeuronConfig cfg;
  NonIdealityConfig ni;
  ni.ir_drop_driver = true;
  ni.ir_drop_wire = true;
  ni.r_driver = 0.0;
  ni.r_wire = 0.0;
  std::mt19937_64 pick(12);
  Engine rng(0);
  const auto x = random_inputs(40, 7, pick);
  const auto ideal = mvm_integrate(core, forward(x, 30), cfg, {}, rng).charge;
  const auto zero_r = mvm_integrate(core, forward(x, 30), cfg, ni, rng).charge;
  for (std::size_t o = 0; o < 30; ++o) CHECK(std::abs(ideal[o] - zero_r[o]) <= 1e-12);
}

TEST_CASE("non-idealities: IR drop attenuates and coupling is seeded") {
  CoreState core;
  load(core, random_matrix(100, 64, 13));
  NeuronConfig cfg;
  std::vector<int> x(100, 7);
  Engine rng(0);
  const auto ideal = mvm_integrate(core, forward(x, 64), cfg, {}, rng).charge;
  NonIdealityConfig ni;
  ni.ir_drop_driver = true;
  ni.r_driver = 2000.0;
  ni.ir_drop_wire = true;
  ni.r_wire = 5.0;
  const auto dropped = mvm_integrate(core, forward(x, 64), cfg, ni, rng).charge;
  double a = 0.0, b = 0.0;
  for (std::size_t o = 0; o < 64; ++o) {
    a += std::abs(ideal[o]);
    b += std::abs(dropped[o]);
  }
  CHECK(b < a);

  NonIdealityConfig noisy;
  noisy.coupling_sigma = 0.01;
  Engine r1(5), r2(5), r3(6);
  const auto n1 = mvm_integrate(core, forward(x, 64), cfg, noisy, r1).charge;
  const auto n2 = mvm_integrate(core, forward(x, 64), cfg, noisy, r2).charge;
  const auto n3 = mvm_integrate(core, forward(x, 64), cfg, noisy, r3).charge;
  CHECK(n1 == n2);
  CHECK(n1 != n3);
}

TEST_CASE("mvm: serial and parallel settle give identical codes") {
  CoreState core;
  load(core, random_matrix(120, 250, 14));
  NeuronConfig cfg;
  cfg.q_step = 0.002;
  std::mt19937_64 pick(15);
  for (int t = 0; t < 10; ++t) {
    const auto x = random_inputs(120, 7, pick);
    Engine r1(0), r2(0);
    const auto a = mvm(core, forward(x, 250), cfg, {}, r1, {}, kernels::Exec::serial);
    const auto b = mvm(core, forward(x, 250), cfg, {}, r2, {}, kernels::Exec::parallel);
    CHECK(a.codes == b.codes);
  }
}

TEST_CASE("mvm: stochastic activation produces bits from the neuron LFSRs") {
  CoreState core;
  load(core, random_matrix(8, 16, 16));
  NeuronConfig cfg;
  cfg.activation = Activation::stochastic;
  std::vector<int> x(8, 0);
  Engine rng(0);
  std::vector<int> ones(16, 0);
  for (int t = 0; t < 2000; ++t) {
    const auto out = mvm(core, forward(x, 16), cfg, {}, rng, core.lfsr_states());
    for (std::size_t o = 0; o < 16; ++o) {
      CHECK((out.codes[o] == 0 || out.codes[o] == 1));
      ones[o] += out.codes[o];
    }
  }
  for (int n : ones) CHECK(std::abs(n / 2000.0 - 0.5) < 0.06);
  CHECK_THROWS_AS(mvm(core, forward(x, 16), cfg, {}, rng), Error);
}

}  // TEST_SUITE
