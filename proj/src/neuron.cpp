#include "cimsim/neuron.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cimsim/error.hpp"
#include "cimsim/rng.hpp"

namespace cimsim {

int NeuronConfig::code_cap() const {
  return std::min((1 << (out_bits - 1)) - 1, n_max - 1);
}

int NeuronConfig::input_cap() const { return (1 << (in_bits - 1)) - 1; }

void NeuronConfig::validate() const {
  if (out_bits < 1 || out_bits > 8) fail(ErrorKind::bit_width, "out_bits must be in 1..8");
  if (in_bits < 1 || in_bits > 6) fail(ErrorKind::bit_width, "in_bits must be in 1..6");
  if (n_max < 1) fail(ErrorKind::invalid_argument, "n_max must be >= 1");
  if (!(q_step > 0)) fail(ErrorKind::invalid_argument, "q_step must be > 0");
  if (!(v_read > 0)) fail(ErrorKind::invalid_argument, "v_read must be > 0");
  if (!(charge_scale > 0)) fail(ErrorKind::invalid_argument, "charge_scale must be > 0");
  if (stochastic_range < 0) fail(ErrorKind::invalid_argument, "stochastic_range must be >= 0");
  for (std::size_t i = 0; i < sigmoid_breakpoints.size(); ++i) {
    const auto& b = sigmoid_breakpoints[i];
    if (b.step < 1 || b.counter < 0) fail(ErrorKind::invalid_argument, "bad sigmoid breakpoint");
    if (i > 0 && b.counter <= sigmoid_breakpoints[i - 1].counter) {
      fail(ErrorKind::invalid_argument, "sigmoid breakpoints must be increasing");
    }
  }
}

AdcReading adc_read(double q, const NeuronConfig& cfg, double offset) {
  const double eff = q + offset;
  AdcReading r;
  r.sign = eff >= 0.0 ? 1 : -1;
  const double steps = std::round(std::abs(eff) / cfg.q_step);
  r.steps = steps >= cfg.n_max ? cfg.n_max : static_cast<int>(steps);
  return r;
}

int tanh_counter(int steps, const std::vector<Breakpoint>& breakpoints) {
  // Counter c is first shown at step start(c) and held for d(c) steps, where
  // d(c) is the step size of the last breakpoint strictly below c.
  auto duration = [&](int c) {
    int d = 1;
    for (const auto& b : breakpoints) {
      if (b.counter < c) d = b.step;
    }
    return d;
  };
  int counter = 0;
  int next_start = 1;
  while (next_start <= steps) {
    ++counter;
    next_start += duration(counter);
  }
  return counter;
}

int activation_map(int sign, int raw_steps, const NeuronConfig& cfg) {
  const int cap = cfg.code_cap();
  const int steps = std::clamp(raw_steps, 0, cfg.n_max);
  switch (cfg.activation) {
    case Activation::identity:
      return sign * std::min(steps, cap);
    case Activation::relu:
      return sign < 0 ? 0 : std::min(steps, cap);
    case Activation::tanh:
      return sign * std::min(tanh_counter(steps, cfg.sigmoid_breakpoints), cap);
    case Activation::sigmoid: {
      const int counter_max = std::min(tanh_counter(cfg.n_max, cfg.sigmoid_breakpoints), cap);
      if (counter_max == 0) return 0;
      const int c = sign * std::min(tanh_counter(steps, cfg.sigmoid_breakpoints), counter_max);
      return static_cast<int>(
          std::round(static_cast<double>(c + counter_max) * cap / (2.0 * counter_max)));
    }
    case Activation::stochastic:
      break;
  }
  fail(ErrorKind::invalid_argument, "stochastic activation has no ADC code mapping");
}

int adc_convert(double q, const NeuronConfig& cfg, double offset) {
  const AdcReading r = adc_read(q, cfg, offset);
  return activation_map(r.sign, r.steps, cfg);
}

int decrement_steps_spent(const AdcReading& reading, const NeuronConfig& cfg) {
  if (cfg.activation == Activation::stochastic) return 0;
  if (cfg.activation == Activation::relu && reading.sign < 0) return 0;
  // The step that flips the comparator is counted too; identity/ReLU neurons
  // run with N_max tuned down to the code range.
  const bool scheduled =
      cfg.activation == Activation::tanh || cfg.activation == Activation::sigmoid;
  const int ceiling = scheduled ? cfg.n_max : std::min(cfg.code_cap() + 1, cfg.n_max);
  return std::min(reading.steps + 1, ceiling);
}

std::uint16_t lfsr_step_forward(std::uint16_t s) {
  const unsigned bit = (s ^ (s >> 2) ^ (s >> 3) ^ (s >> 5)) & 1u;
  return static_cast<std::uint16_t>((s >> 1) | (bit << 15));
}

std::uint16_t lfsr_step_backward(std::uint16_t s) {
  const unsigned bit = ((s >> 15) ^ (s >> 13) ^ (s >> 12) ^ (s >> 10)) & 1u;
  return static_cast<std::uint16_t>((s << 1) | bit);
}

std::pair<std::uint16_t, LfsrPair> lfsr_sample(const LfsrPair& pair) {
  if (pair.forward_state == 0 || pair.backward_state == 0) {
    fail(ErrorKind::invalid_argument, "LFSR state must be non-zero");
  }
  LfsrPair next = pair;
  next.forward_state = lfsr_step_forward(pair.forward_state);
  next.backward_state = lfsr_step_backward(pair.backward_state);
  return {static_cast<std::uint16_t>(next.forward_state ^ next.backward_state), next};
}

LfsrPair lfsr_for_neuron(std::uint64_t seed, int index) {
  constexpr int kOffset = 61;
  constexpr int kNeurons = 256;
  const std::uint64_t h = RngStream::mix(seed);
  auto nonzero = [](std::uint64_t v) {
    const auto s = static_cast<std::uint16_t>(v & 0xFFFFu);
    return s == 0 ? std::uint16_t{0xACE1} : s;
  };
  LfsrPair p;
  p.forward_state = nonzero(h);
  p.backward_state = nonzero(h >> 16);
  for (int i = 0; i < kOffset * index; ++i) p.forward_state = lfsr_step_forward(p.forward_state);
  for (int i = 0; i < kOffset * (kNeurons - 1 - index); ++i) {
    p.backward_state = lfsr_step_backward(p.backward_state);
  }
  return p;
}

int stochastic_sample(double q, double range, LfsrPair& pair, Dither shape) {
  auto [value, next] = lfsr_sample(pair);
  pair = next;
  const double u = (static_cast<double>(value) + 0.5) / 65536.0;
  const double noise = shape == Dither::uniform ? 2.0 * u - 1.0 : std::log(u / (1.0 - u));
  return q + noise * range >= 0.0 ? 1 : 0;
}

}  // namespace cimsim
