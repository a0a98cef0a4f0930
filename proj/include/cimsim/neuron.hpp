#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace cimsim {

enum class Activation { identity, relu, sigmoid, tanh, stochastic };

/// Distribution of the LFSR dither in stochastic mode. `logistic` maps the
/// uniform LFSR value through log(u / (1 - u)), so P(1) = σ(q / range).
enum class Dither { uniform, logistic };

/// (counter value, decrement steps per counter increment beyond that value)
struct Breakpoint {
  int counter;
  int step;
};

struct NeuronConfig {
  double v_read = 0.5;        // V, input pulse amplitude relative to V_ref
  double q_step = 0.01;       // V of integrated ΔV per ADC LSB
  double charge_scale = 1.0;  // C_sample / C_integ folded into one constant
  int n_max = 128;            // maximum charge-decrement steps
  int out_bits = 8;
  int in_bits = 4;
  Activation activation = Activation::identity;
  std::vector<Breakpoint> sigmoid_breakpoints{{35, 2}, {40, 3}, {43, 4}, {45, 5}};
  double stochastic_range = 2.0;  // half-width of the uniform dither, in pre-activation units
  Dither dither = Dither::uniform;

  /// Largest magnitude code: min(2^(out_bits-1) - 1, n_max - 1).
  int code_cap() const;
  /// Largest input magnitude: 2^(in_bits-1) - 1.
  int input_cap() const;
  void validate() const;
};

/// Comparator result and the number of charge-decrement steps needed to cancel
/// the integrated charge (capped at n_max).
struct AdcReading {
  int sign = 1;
  int steps = 0;
};

/// Mid-tread conversion: magnitude = round-half-away(|Q| / q_step), so Q = 0
/// reads as zero.
AdcReading adc_read(double q, const NeuronConfig& cfg, double offset = 0.0);

/// Counter value after `steps` decrement steps under the breakpoint schedule.
int tanh_counter(int steps, const std::vector<Breakpoint>& breakpoints);

int activation_map(int sign, int raw_steps, const NeuronConfig& cfg);

/// adc_read followed by activation_map. Stochastic activation is not a code
/// conversion; it is rejected here (see stochastic_sample).
int adc_convert(double q, const NeuronConfig& cfg, double offset = 0.0);

/// Decrement steps actually spent by one neuron, used for energy/latency
/// accounting. ReLU neurons with a negative sign spend none.
int decrement_steps_spent(const AdcReading& reading, const NeuronConfig& cfg);

/// Pair of 16-bit maximal LFSR chains (x^16 + x^14 + x^13 + x^11 + 1) that
/// shift in opposite directions; the sample is the XOR of both registers.
struct LfsrPair {
  std::uint16_t forward_state = 0xACE1;
  std::uint16_t backward_state = 0x1D2B;
  int tap_polynomial = 0;  // only the 16-bit maximal polynomial is defined
};

std::uint16_t lfsr_step_forward(std::uint16_t state);
std::uint16_t lfsr_step_backward(std::uint16_t state);

std::pair<std::uint16_t, LfsrPair> lfsr_sample(const LfsrPair& pair);

/// Seeds neuron `index` by advancing both chains from the base seeds; the
/// backward chain is offset from the opposite end.
LfsrPair lfsr_for_neuron(std::uint64_t seed, int index);

/// 1 iff q + U(-range, range) >= 0, the uniform draw coming from the LFSR. Over
/// many trials P(1) is the piecewise-linear sigmoid clamp(1/2 + q / (2 range), 0, 1).
int stochastic_sample(double q, double range, LfsrPair& pair, Dither shape = Dither::uniform);

}  // namespace cimsim
