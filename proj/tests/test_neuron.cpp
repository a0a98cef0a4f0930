#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <vector>

#include "cimsim/error.hpp"
#include "cimsim/neuron.hpp"

using namespace cimsim;

namespace {

NeuronConfig with(Activation a, int out_bits = 8) {
  NeuronConfig c;
  c.activation = a;
  c.out_bits = out_bits;
  return c;
}

// Walks the counter schedule by hand: counter c is shown for d(c) steps,
// where d is 1 up to the first breakpoint and then the step size of the last
// breakpoint below c. Counter 1 appears at step 1.
int walk_schedule(int steps) {
  int counter = 0, start = 1;
  while (start <= steps) {
    ++counter;
    int d = 1;
    if (counter > 45) d = 5;
    else if (counter > 43) d = 4;
    else if (counter > 40) d = 3;
    else if (counter > 35) d = 2;
    start += d;
  }
  return counter;
}

}  // namespace

TEST_SUITE("neuron") {

TEST_CASE("adc: mid-tread zero, round half away, saturation") {
  const NeuronConfig c;
  CHECK(adc_convert(0.0, c) == 0);
  CHECK(adc_convert(3.5 * c.q_step, c) == 4);
  CHECK(adc_convert(-3.5 * c.q_step, c) == -4);
  CHECK(adc_convert(3.49 * c.q_step, c) == 3);
  CHECK(adc_convert(1000 * c.q_step, c) == 127);
  CHECK(adc_convert(-1000 * c.q_step, c) == -127);
}

TEST_CASE("adc: code cap is min(2^(b-1)-1, n_max-1)") {
  for (int b = 1; b <= 8; ++b) {
    NeuronConfig c = with(Activation::identity, b);
    CHECK(c.code_cap() == std::min((1 << (b - 1)) - 1, 127));
    CHECK(adc_convert(500 * c.q_step, c) == c.code_cap());
  }
  NeuronConfig small;
  small.n_max = 20;
  CHECK(small.code_cap() == 19);
  CHECK(adc_convert(100 * small.q_step, small) == 19);
}

TEST_CASE("adc: monotone over a charge sweep") {
  for (Activation a : {Activation::identity, Activation::relu, Activation::tanh}) {
    const NeuronConfig c = with(a);
    int prev = adc_convert(-2.0, c);
    for (int i = 1; i <= 10000; ++i) {
      const double q = -2.0 + 4.0 * i / 10000.0;
      const int code = adc_convert(q, c);
      CHECK(code >= prev);
      prev = code;
    }
  }
}

TEST_CASE("adc: offset shifts the comparator input") {
  const NeuronConfig c;
  CHECK(adc_convert(0.0, c, 3 * c.q_step) == 3);
  CHECK(adc_convert(3 * c.q_step, c, -3 * c.q_step) == 0);
}

TEST_CASE("relu") {
  const NeuronConfig c = with(Activation::relu);
  for (int s : {0, 1, 50, 128}) CHECK(activation_map(-1, s, c) == 0);
  CHECK(activation_map(1, 40, c) == 40);
  CHECK(activation_map(1, 128, c) == 127);
}

TEST_CASE("tanh counter schedule") {
  const NeuronConfig c = with(Activation::tanh);
  CHECK(activation_map(1, 35, c) == 35);
  CHECK(activation_map(1, 36, c) == 36);
  CHECK(activation_map(1, 37, c) == 36);
  CHECK(activation_map(1, 38, c) == 37);
  CHECK(activation_map(-1, 37, c) == -36);
  for (int s = 0; s <= 128; ++s) CHECK(tanh_counter(s, c.sigmoid_breakpoints) == walk_schedule(s));
}

TEST_CASE("sigmoid rescales the signed counter into the unsigned range") {
  const NeuronConfig c = with(Activation::sigmoid);
  const int cmax = tanh_counter(128, c.sigmoid_breakpoints);
  CHECK(activation_map(1, 0, c) == static_cast<int>(std::round(127.0 / 2)));
  CHECK(activation_map(1, 128, c) == 127);
  CHECK(activation_map(-1, 128, c) == 0);
  int prev = -1;
  for (int s = -128; s <= 128; ++s) {
    const int code = activation_map(s < 0 ? -1 : 1, std::abs(s), c);
    CHECK(code >= prev);
    CHECK(code >= 0);
    prev = code;
  }
  CHECK(cmax > 45);
}

TEST_CASE("decrement steps spent") {
  NeuronConfig c = with(Activation::relu);
  CHECK(decrement_steps_spent({-1, 40}, c) == 0);
  CHECK(decrement_steps_spent({1, 40}, c) == 41);
  c.out_bits = 4;
  CHECK(decrement_steps_spent({1, 40}, c) == 8);
}

TEST_CASE("lfsr: golden first output") {
  const auto [v, next] = lfsr_sample(LfsrPair{});
  CHECK(v == 0x6C26);
  CHECK(next.forward_state == 0x5670);
  CHECK(next.backward_state == 0x3A56);
}

TEST_CASE("lfsr: both chains are maximal length") {
  for (int dir = 0; dir < 2; ++dir) {
    std::uint16_t s = 1;
    int period = 0;
    do {
      s = dir ? lfsr_step_backward(s) : lfsr_step_forward(s);
      ++period;
      REQUIRE(s != 0);
    } while (s != 1);
    CHECK(period == 65535);
  }
}

TEST_CASE("lfsr: bit balance") {
  LfsrPair p = lfsr_for_neuron(42, 3);
  long ones = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto [v, next] = lfsr_sample(p);
    p = next;
    ones += std::popcount(v);
  }
  CHECK(std::abs(static_cast<double>(ones) / (16.0 * draws) - 0.5) < 0.01);
}

TEST_CASE("lfsr: neighbouring neurons start from distinct states") {
  const LfsrPair a = lfsr_for_neuron(5, 0);
  const LfsrPair b = lfsr_for_neuron(5, 1);
  CHECK(a.forward_state != b.forward_state);
  CHECK(a.backward_state != b.backward_state);
  CHECK_THROWS_AS(lfsr_sample(LfsrPair{0, 1, 0}), Error);
}

TEST_CASE("stochastic sampling") {
  LfsrPair p = lfsr_for_neuron(9, 17);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += stochastic_sample(5.0, 2.0, p);
  CHECK(hits == 10000);
  hits = 0;
  for (int i = 0; i < 10000; ++i) hits += stochastic_sample(0.0, 2.0, p);
  CHECK(std::abs(hits / 10000.0 - 0.5) <= 0.02);
  double prev = 0.0;
  for (double q = -2.5; q <= 2.5; q += 0.5) {
    int n = 0;
    for (int i = 0; i < 10000; ++i) n += stochastic_sample(q, 2.0, p);
    const double f = n / 10000.0;
    CHECK(f >= prev - 1e-12);
    const double expect = std::clamp(0.5 + q / 4.0, 0.0, 1.0);
    CHECK(std::abs(f - expect) < 0.02);
    prev = f;
  }
}

TEST_CASE("stochastic sampling with logistic dither follows the sigmoid") {
  LfsrPair p = lfsr_for_neuron(4, 200);
  for (double q : {-3.0, -1.0, -0.25, 0.0, 0.5, 2.0}) {
    int n = 0;
    const int trials = 20000;
    for (int i = 0; i < trials; ++i) n += stochastic_sample(q, 0.5, p, Dither::logistic);
    const double expect = 1.0 / (1.0 + std::exp(-q / 0.5));
    CHECK(std::abs(n / static_cast<double>(trials) - expect) <=
          3.0 * std::sqrt(expect * (1 - expect) / trials) + 1e-3);
  }
}

TEST_CASE("config validation") {
  NeuronConfig c;
  c.out_bits = 9;
  CHECK_THROWS_AS(c.validate(), Error);
  c = NeuronConfig{};
  c.in_bits = 7;
  CHECK_THROWS_AS(c.validate(), Error);
  c = NeuronConfig{};
  c.activation = Activation::stochastic;
  CHECK_THROWS_AS(adc_convert(0.1, c), Error);
}

}  // TEST_SUITE
