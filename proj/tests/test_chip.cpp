#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cimsim/chip.hpp"
#include "cimsim/error.hpp"
#include "oracle.hpp"

using namespace cimsim;

namespace {

mapper::LayerSpec random_spec(std::size_t fan_in, std::size_t out, std::uint64_t seed,
                              bool with_bias = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  mapper::LayerSpec l;
  l.name = "l" + std::to_string(seed);
  l.in = fan_in;
  l.out = out;
  l.weights.resize(fan_in * out);
  for (auto& w : l.weights) w = u(rng);
  if (with_bias) {
    l.bias.resize(out);
    for (auto& b : l.bias) b = 0.3 * u(rng);
  }
  return l;
}

ChipLayer chip_layer(const mapper::LayerSpec& spec, int in_bits = 4, double q_step = 0.004,
                     Activation act = Activation::identity) {
  ChipLayer l;
  l.matrix = mapper::conv_to_matrix(spec, 1.0, 40.0);
  l.neuron.in_bits = in_bits;
  l.neuron.q_step = q_step;
  l.neuron.activation = act;
  return l;
}

mapper::LayerSegments segments_of(int id, const ChipLayer& l, double intensity = 1.0) {
  return {id, {l.matrix.rows, l.matrix.cols}, intensity, mapper::split_matrix(l.matrix)};
}

mapper::PlaceHints no_duplicates() {
  mapper::PlaceHints h;
  h.auto_duplicate = false;
  return h;
}

std::vector<DigitalVector> random_batch(std::size_t n, std::size_t len, int bits, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int cap = (1 << (bits - 1)) - 1;
  std::uniform_int_distribution<int> d(-cap, cap);
  std::vector<DigitalVector> b(n);
  for (auto& v : b) {
    v.bits = bits;
    v.values.resize(len);
    for (auto& x : v.values) x = d(rng);
  }
  return b;
}

void check_close(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12).scale(1.0));
}

}  // namespace

TEST_SUITE("chip") {

TEST_CASE("program_chip: empty plan gives an empty report") {
  Chip chip;
  const auto r = program_chip(chip, mapper::PlacementPlan{}, {});
  CHECK(r.entries.empty());
  CHECK(r.total_cells() == 0);
}

TEST_CASE("program_chip: deterministic device converges every cell") {
  NonIdealityConfig ni;
  ni.write_verify = true;
  Chip chip(3, ni);
  chip.update_rule.cycle_noise_sigma = 0.0;
  const auto l = chip_layer(random_spec(7, 16, 1));
  REQUIRE(l.matrix.rows == 16);
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  const auto r = program_chip(chip, plan, {{0, l}});
  REQUIRE(r.entries.size() == 1);
  CHECK(r.total_failures() == 0);
  const auto& core = chip.core(plan.assignments[0].core);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(core.conductance(i, j) - l.matrix.at(i, j)) <= 1.0);
  }
}

TEST_CASE("program_chip: first pass over 48 cores lands at least 99% of cells") {
  NonIdealityConfig ni;
  ni.write_verify = true;
  Chip chip(11, ni);
  chip.program_iterations = 0;
  std::vector<mapper::LayerSegments> segs;
  std::map<int, ChipLayer> layers;
  for (int k = 0; k < 48; ++k) {
    layers[k] = chip_layer(random_spec(63, 64, 100 + static_cast<std::uint64_t>(k)));
    segs.push_back(segments_of(k, layers[k]));
  }
  const auto plan = mapper::place(segs, 48, no_duplicates());
  REQUIRE(plan.cores_used() == 48);
  const auto r = program_chip(chip, plan, layers);
  std::size_t ok = 0, total = 0;
  for (const auto& a : plan.assignments) {
    const auto& m = layers.at(a.layer).matrix;
    for (std::size_t i = 0; i < a.segment.rows; ++i) {
      for (std::size_t j = 0; j < a.segment.cols; ++j) {
        ok += std::abs(chip.core(a.core).conductance(a.core_row + i, a.core_col + j) -
                       m.at(a.segment.row0 + i, a.segment.col0 + j)) <= 1.0;
        ++total;
      }
    }
  }
  CHECK(total == r.total_cells());
  CHECK(static_cast<double>(ok) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("program_chip: rejects invalid plans and moving programmed layers") {
  Chip chip;
  const auto l = chip_layer(random_spec(10, 8, 2));
  auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  auto bad = plan;
  bad.assignments[0].core = 48;
  CHECK_THROWS_AS(program_chip(chip, bad, {{0, l}}), Error);
  program_chip(chip, plan, {{0, l}});
  auto moved = plan;
  moved.assignments[0].core = 5;
  try {
    program_chip(chip, moved, {{0, l}});
    FAIL("expected a placement error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_placement);
  }
  CHECK_THROWS_AS(execute_layer(chip, 9, {}), Error);
}

TEST_CASE("execute_layer: single segment equals one core mvm") {
  Chip chip;
  const auto l = chip_layer(random_spec(30, 20, 4));
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  program_chip(chip, plan, {{0, l}});
  const auto batch = random_batch(5, 30, 4, 9);
  const auto out = execute_layer(chip, 0, batch);

  CoreState ref;
  ref.write_region_exact(0, 0, l.matrix.rows, l.matrix.cols, l.matrix.targets);
  std::vector<double> sums(l.matrix.cols, 0.0);
  for (std::size_t r = 0; r < l.matrix.rows; ++r) {
    for (std::size_t c = 0; c < l.matrix.cols; ++c) sums[c] += l.matrix.at(r, c);
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<int> x = batch[b].values;
    x.resize(l.matrix.rows / 2, l.neuron.input_cap());
    MvmRequest req;
    req.inputs = x;
    req.output_count = l.matrix.cols;
    Engine rng(0);
    const auto r = mvm(ref, req, l.neuron, {}, rng);
    const auto v = denormalize(r.codes, sums, l.neuron, l.neuron.v_read * 40.0 / l.matrix.w_max);
    check_close(out.values[b], v);
  }
}

TEST_CASE("execute_layer: a split layer equals the unsplit partial-sum oracle") {
  Chip chip;
  mapper::LayerSpec spec = random_spec(144, 32, 5);
  spec.kind = mapper::LayerKind::conv;
  spec.h = spec.w = 3;
  spec.in = 16;
  const auto l = chip_layer(spec, 4, 0.002);
  REQUIRE(l.matrix.rows == 290);
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  REQUIRE(plan.assignments.size() == 2);
  program_chip(chip, plan, {{0, l}});
  const NeuronConfig seg = segment_config(l, 2);
  CHECK(seg.out_bits == 6);
  const auto batch = random_batch(20, 144, 4, 10);
  const auto out = execute_layer(chip, 0, batch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto ref = oracle::layer(l.matrix, batch[b].values, 7, seg.v_read, seg.q_step, 1.0,
                                   seg.code_cap(), 256, false);
    check_close(out.values[b], ref);
  }
}

TEST_CASE("execute_layer: duplicate groups serve items round-robin in order") {
  Chip chip;
  const auto l = chip_layer(random_spec(20, 10, 6));
  mapper::PlaceHints hints;
  hints.copies[0] = 2;
  const auto plan = mapper::place({segments_of(0, l)}, 48, hints);
  REQUIRE(plan.groups(0) == 2);
  program_chip(chip, plan, {{0, l}});
  // Make copy B read zero everywhere so the schedule is visible.
  for (const auto& a : plan.assignments) {
    if (a.group != 1) continue;
    for (std::size_t r = 0; r < a.segment.rows; ++r) {
      for (std::size_t c = 0; c < a.segment.cols; ++c) chip.core(a.core).set_conductance(a.core_row + r, a.core_col + c, 20.0);
    }
  }
  auto batch = random_batch(4, 20, 4, 12);
  batch[2] = batch[0];
  const auto out = execute_layer(chip, 0, batch);
  for (double v : out.values[1]) CHECK(v == 0.0);
  for (double v : out.values[3]) CHECK(v == 0.0);
  double mag = 0.0;
  for (double v : out.values[0]) mag += std::abs(v);
  CHECK(mag > 0.0);
  CHECK(out.values[0] == out.values[2]);
}

TEST_CASE("execute_layer: serial and parallel execution agree") {
  NonIdealityConfig ni = NonIdealityConfig::all();
  Chip a(21, ni), b(21, ni);
  const auto l = chip_layer(random_spec(100, 40, 7));
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  program_chip(a, plan, {{0, l}});
  program_chip(b, plan, {{0, l}});
  const auto batch = random_batch(9, 100, 4, 13);
  const auto ra = execute_layer(a, 0, batch, kernels::Exec::serial);
  const auto rb = execute_layer(b, 0, batch, kernels::Exec::parallel);
  CHECK(ra.values == rb.values);
  CHECK(ra.trace == rb.trace);
}

TEST_CASE("run_network: two-layer MLP equals software quantized inference") {
  Chip chip;
  const auto l1 = chip_layer(random_spec(12, 9, 30), 4, 0.003, Activation::relu);
  const auto l2 = chip_layer(random_spec(9, 4, 31), 4, 0.003);
  const auto plan = mapper::place({segments_of(0, l1), segments_of(1, l2)}, 48, no_duplicates());
  program_chip(chip, plan, {{0, l1}, {1, l2}});
  Network net;
  net.ops.push_back({OpKind::dense, 0, 0.25, 1.0, {}, 2});
  net.ops.push_back({OpKind::dense, 1, 0.5, 1.3, {}, 2});

  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<std::vector<double>> inputs(15, std::vector<double>(12));
  for (auto& x : inputs) {
    for (auto& v : x) v = u(rng);
  }
  const auto out = run_network(chip, net, inputs);
  auto quantize = [](const std::vector<double>& x, double scale) {
    std::vector<int> q(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      q[i] = static_cast<int>(std::clamp<long>(oracle::round_half_away(x[i] / scale), -7, 7));
    }
    return q;
  };
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    auto h = oracle::layer(l1.matrix, quantize(inputs[b], 0.25), 7, 0.5, 0.003, 1.0, 127, 256, true);
    for (auto& v : h) v *= 0.25;
    auto y = oracle::layer(l2.matrix, quantize(h, 0.5), 7, 0.5, 0.003, 1.0, 127, 256, false);
    for (auto& v : y) v *= 0.5 * 1.3;
    check_close(out[b], y);
  }
}

TEST_CASE("run_network: relaxation on is reproducible for a fixed seed") {
  NonIdealityConfig ni;
  ni.write_verify = true;
  ni.relaxation = true;
  const auto l = chip_layer(random_spec(40, 16, 40), 4, 0.004);
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  Network net;
  net.ops.push_back({OpKind::dense, 0, 0.2, 1.0, {}, 2});
  std::vector<std::vector<double>> in(6, std::vector<double>(40));
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& x : in) {
    for (auto& v : x) v = u(rng);
  }
  auto run = [&](std::uint64_t seed) {
    Chip chip(seed, ni);
    program_chip(chip, plan, {{0, l}});
    return run_network(chip, net, in);
  };
  const auto a = run(7), b = run(7), c = run(8);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("power gating unrelated cores leaves a layer unchanged") {
  Chip chip;
  const auto l = chip_layer(random_spec(50, 12, 50));
  const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
  program_chip(chip, plan, {{0, l}});
  const auto batch = random_batch(4, 50, 4, 51);
  const auto before = execute_layer(chip, 0, batch);
  const int used = plan.assignments[0].core;
  for (int c = 0; c < kChipCores; ++c) {
    if (c != used) chip.set_powered(c, false);
  }
  const auto after = execute_layer(chip, 0, batch);
  CHECK(before.values == after.values);
  chip.set_powered(used, false);
  CHECK_THROWS_AS(execute_layer(chip, 0, batch), Error);
}

TEST_CASE("trace counts follow closed forms in bits, segments and batch") {
  for (int bits : {2, 4, 6}) {
    Chip chip;
    mapper::LayerSpec spec = random_spec(200, 300, 60);
    const auto l = chip_layer(spec, bits, 0.004);
    const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
    REQUIRE(plan.assignments.size() == 4);
    program_chip(chip, plan, {{0, l}});
    const std::size_t n = 3;
    const auto out = execute_layer(chip, 0, random_batch(n, 200, bits, 61));
    const auto& t = out.trace;
    const auto p = static_cast<std::uint64_t>(bits - 1);
    CHECK(t.mvms == 4 * n);
    CHECK(t.input_pulses == p * 4 * n);
    CHECK(t.sample_cycles == ((1u << (bits - 1)) - 1) * 4 * n);
    CHECK(t.wl_toggles == p * 2 * l.matrix.rows * n);  // each row band feeds two column bands
    CHECK(t.macs == (l.matrix.rows / 2) * 300 * n);
    CHECK(t.conversions == 2 * 300 * n);
  }
}

TEST_CASE("energy: zero trace, additivity and the MAC product") {
  const EnergyConfig cfg;
  CHECK(estimate_energy(OpTrace{}, cfg).total() == 0.0);
  CHECK(estimate_latency_ns(OpTrace{}, cfg) == 0.0);

  OpTrace t;
  t.macs = 1'000'000;
  t.mac_var_weighted = 0.01 * 1e6;
  EnergyConfig only_mac;
  only_mac.c_par = 1e-15;
  only_mac.c_wl = only_mac.e_adc_step = only_mac.e_neuron_static = 0.0;
  const auto e = estimate_energy(t, only_mac);
  CHECK(e.total() == doctest::Approx(1e-11).epsilon(1e-12));
  CHECK(e.total() / static_cast<double>(t.macs) == doctest::Approx(1e-17).epsilon(1e-12));

  OpTrace a, b;
  a.wl_toggles = 120;
  a.adc_steps = 900;
  a.conversions = 40;
  a.macs = 5000;
  a.mac_var_weighted = 31.5;
  a.latency_units = 77;
  b.wl_toggles = 7;
  b.adc_steps = 3;
  b.conversions = 1;
  b.macs = 9;
  b.mac_var_weighted = 0.4;
  b.latency_units = 2;
  const auto ea = estimate_energy(a, cfg), eb = estimate_energy(b, cfg), ab = estimate_energy(a + b, cfg);
  CHECK(ab.total() == doctest::Approx(ea.total() + eb.total()).epsilon(1e-14));
  CHECK(ab.adc == doctest::Approx(ea.adc + eb.adc).epsilon(1e-14));
  CHECK(estimate_latency_ns(a + b, cfg) == doctest::Approx(790.0));

  EnergyConfig neg;
  neg.c_wl = -1.0;
  CHECK_THROWS_AS(estimate_energy(a, neg), Error);
}

TEST_CASE("energy: ADC energy grows with output precision on a fixed workload") {
  const auto batch = random_batch(8, 60, 4, 71);
  double prev = 0.0;
  for (int out_bits = 3; out_bits <= 8; ++out_bits) {
    Chip chip;
    // Same full-scale range at every precision: q_step halves per extra bit.
    auto l = chip_layer(random_spec(60, 32, 70), 4, 0.32 / (1 << out_bits));
    l.neuron.out_bits = out_bits;
    const auto plan = mapper::place({segments_of(0, l)}, 48, no_duplicates());
    program_chip(chip, plan, {{0, l}});
    const double adc = estimate_energy(execute_layer(chip, 0, batch).trace, EnergyConfig{}).adc;
    CHECK(adc > prev);
    if (prev > 0.0) CHECK(adc <= 2.0 * prev);
    prev = adc;
  }
}

}  // TEST_SUITE
