#include <doctest.h>

#include <cmath>
#include <random>

#include "cimsim/coopt.hpp"
#include "cimsim/error.hpp"

using namespace cimsim;

namespace {

const nn::Split& digits() {
  static const nn::Split s = nn::load_digits();
  return s;
}

nn::Mlp trained_mlp(std::vector<std::size_t> sizes, int epochs = 20) {
  auto m = nn::init_mlp(sizes, 0);
  nn::TrainConfig c;
  c.epochs = epochs;
  c.noise_fraction = 0.1;
  nn::train(m, digits().train, c);
  return m;
}

mapper::PlacementPlan plan_for(const nn::Mlp& m) {
  std::vector<mapper::LayerSegments> segs;
  for (std::size_t l = 0; l < m.depth(); ++l) segs.push_back(coopt::segments_for(m, l));
  mapper::PlaceHints h;
  h.auto_duplicate = false;
  return mapper::place(segs, kChipCores, h);
}

nn::TrainingSet head(const nn::Dataset& d, std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return nn::TrainingSet(d.subset(rows));
}

}  // namespace

TEST_SUITE("coopt") {

TEST_CASE("snap_q_step: finest log-grid point that still covers the target") {
  CHECK(coopt::snap_q_step(1.0, 1.0, 21, 2.0) == 1.0);
  CHECK(coopt::snap_q_step(5.0, 1.0, 21, 2.0) == 1.0);
  CHECK(coopt::snap_q_step(1e-6, 1.0, 21, 2.0) == doctest::Approx(0.01));
  CHECK(coopt::snap_q_step(0.1, 1.0, 21, 2.0) == doctest::Approx(0.1));
  CHECK(coopt::snap_q_step(0.11, 1.0, 21, 2.0) == doctest::Approx(std::pow(10.0, -0.9)));
  CHECK(coopt::snap_q_step(0.099, 1.0, 21, 2.0) == doctest::Approx(0.1));
  CHECK(coopt::snap_q_step(0.0, 0.3, 21, 2.0) == 0.3);
  NeuronConfig n;
  n.v_read = 0.4;
  n.in_bits = 4;
  n.out_bits = 6;
  CHECK(coopt::full_scale_q_step(n) == doctest::Approx(0.4 * 7 / 31.0));
}

TEST_CASE("to_chip_layer / network_for: ideal chip reproduces the software model") {
  const auto m = trained_mlp({64, 24, 10});
  const auto plan = plan_for(m);
  Chip chip(1);
  const auto dep = coopt::deploy(m, chip, plan, digits().train, NeuronConfig{});
  REQUIRE(dep.calibration.size() == 2);
  const double sw = nn::accuracy(m, digits().test.data());
  const double hw = coopt::chip_accuracy(chip, dep.net, digits().test);
  CHECK(std::abs(sw - hw) < 0.02);
  CHECK(dep.net.ops[1].input_scale == doctest::Approx(m.input_scale(1)));
}

TEST_CASE("calibrate_layer: ideal, well-scaled layer keeps the nominal read voltage") {
  const auto m = trained_mlp({64, 16, 10}, 10);
  const auto plan = plan_for(m);
  Chip chip(2);
  program_chip(chip, plan, {{0, coopt::to_chip_layer(m, 0, NeuronConfig{})}});
  auto net = coopt::network_for(m);
  const auto cal_set = head(digits().train.data(), 64);
  const auto ref = nn::forward(m, cal_set.data().x, 0, 1);
  coopt::CalibrationOptions opts;
  opts.percentile = 1.0;  // no clipped outputs
  const auto cal = coopt::calibrate_layer(chip, net.ops[0], cal_set, ref, opts);
  CHECK(cal.v_read_scale == 1.0);
  CHECK(cal.v_read == doctest::Approx(0.5));
  CHECK(net.ops[0].output_gain == cal.output_gain);
  // The g_min floor of the differential pair shrinks every |w| by
  // g_min·w_max/g_max, so the fitted gain sits slightly above 1.
  CHECK(cal.output_gain > 1.0);
  CHECK(cal.output_gain < 1.1);
  CHECK(chip.layer(0).neuron.q_step == cal.q_step);
}

TEST_CASE("calibrate_layer: an injected 3-code comparator offset is cancelled") {
  const auto m = trained_mlp({64, 16, 10}, 10);
  const auto plan = plan_for(m);
  Chip chip(3);
  program_chip(chip, plan, {{0, coopt::to_chip_layer(m, 0, NeuronConfig{})}});
  auto net = coopt::network_for(m);
  const auto cal_set = head(digits().train.data(), 64);
  const auto ref = nn::forward(m, cal_set.data().x, 0, 1);
  const auto first = coopt::calibrate_layer(chip, net.ops[0], cal_set, ref);
  const DigitalVector zero{std::vector<int>(64, 0), 4};

  for (const auto& a : chip.plan().assignments) {
    if (a.layer != 0) continue;
    for (std::size_t c = 0; c < a.segment.cols; ++c) {
      chip.core(a.core).neuron_offsets()[sensing_neuron(Direction::forward, a.core_col + c)] +=
          3.0 * first.q_step;
    }
  }
  for (const auto& p : probe_layer(chip, 0, zero, false)) {
    for (int code : p.codes) CHECK(code == 3);
  }
  const auto second = coopt::calibrate_layer(chip, net.ops[0], cal_set, ref);
  CHECK(second.q_step == first.q_step);
  for (const auto& p : probe_layer(chip, 0, zero, false)) {
    for (int code : p.codes) CHECK(code == 0);
  }
  for (const auto& t : second.offsets) CHECK(t.trim == doctest::Approx(-3.0 * first.q_step));
  CHECK(second.output_gain == doctest::Approx(first.output_gain).epsilon(1e-9));
}

TEST_CASE("calibrate_layer: 10x smaller activations give a ~10x smaller ADC step") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> u(0, 3);
  nn::Dataset big;
  big.x.resize(64, 40);
  for (Eigen::Index r = 0; r < big.x.rows(); ++r) {
    for (Eigen::Index c = 0; c < big.x.cols(); ++c) big.x(r, c) = 10 * u(rng);
  }
  big.y.assign(64, 0);
  nn::Dataset small = big;
  small.x /= 10.0;

  auto m = nn::init_mlp({40, 12}, 5, 6);
  const auto plan = plan_for(m);
  coopt::CalibrationOptions opts;
  opts.q_grid_decades = 3.0;
  opts.q_grid_points = 31;
  double q[2];
  for (int k = 0; k < 2; ++k) {
    Chip chip(6);
    program_chip(chip, plan, {{0, coopt::to_chip_layer(m, 0, NeuronConfig{})}});
    NetworkOp op;
    op.layer = 0;
    op.input_scale = 1.0;
    q[k] = coopt::calibrate_layer(chip, op, nn::TrainingSet(k == 0 ? big : small), {}, opts).q_step;
  }
  const double step = std::pow(10.0, 0.1);
  CHECK(q[0] / q[1] > 10.0 / step);
  CHECK(q[0] / q[1] < 10.0 * step);
}

TEST_CASE("calibrate_layer: rejects mismatched inputs and references") {
  const auto m = nn::init_mlp({64, 10}, 0);
  const auto plan = plan_for(m);
  Chip chip(7);
  program_chip(chip, plan, {{0, coopt::to_chip_layer(m, 0, NeuronConfig{})}});
  NetworkOp op;
  op.layer = 0;
  op.input_scale = m.input_scale(0);
  const auto set = head(digits().train.data(), 8);
  CHECK_THROWS_AS(coopt::calibrate_layer(chip, op, set, Eigen::MatrixXd::Zero(8, 3)), Error);
  coopt::CalibrationOptions bad;
  bad.v_read_grid.clear();
  CHECK_THROWS_AS(coopt::calibrate_layer(chip, op, set, {}, bad), Error);
  nn::Dataset narrow{Eigen::MatrixXd::Zero(4, 10), {0, 1, 2, 3}, 10};
  CHECK_THROWS_AS(coopt::calibrate_layer(chip, op, nn::TrainingSet(narrow), {}), Error);
}

TEST_CASE("finetune_chip_in_loop: one trace entry per layer; ideal chip changes nothing material") {
  const auto m = trained_mlp({64, 24, 16, 10});
  const auto plan = plan_for(m);
  Chip base(8);
  const auto dep = coopt::deploy(m, base, plan, digits().train, NeuronConfig{});
  const double acc_dep = coopt::chip_accuracy(base, dep.net, digits().test);

  Chip chip(8);
  coopt::FinetuneConfig cfg;
  cfg.train.noise_fraction = 0.1;
  cfg.epochs = 5;
  const auto res = coopt::finetune_chip_in_loop(m, chip, plan, digits().train, cfg);
  REQUIRE(res.trace.size() == m.depth());
  for (std::size_t l = 0; l < res.trace.size(); ++l) {
    CHECK(res.trace[l].layer == l);
    CHECK(res.trace[l].hybrid_accuracy > 0.9);
  }
  CHECK(res.model.layers[0].w == m.layers[0].w);
  const double acc_ft = coopt::chip_accuracy(chip, res.deployment.net, digits().test);
  // Binomial standard error of a 360-sample accuracy is about 1%.
  CHECK(std::abs(acc_ft - acc_dep) < 0.02);
}

}  // TEST_SUITE
