#include "cimsim/core.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

constexpr double kMicro = 1e-6;  // µS → S
constexpr double kIrTolerance = 1e-9;
constexpr int kIrMaxIterations = 2000;

void check_line(std::size_t v, const char* what) {
  if (v >= kCoreSize) fail(ErrorKind::out_of_range, std::string(what) + " outside 0..255");
}

}  // namespace

void DigitalVector::validate() const {
  if (bits < 1 || bits > 8) fail(ErrorKind::bit_width, "DigitalVector bits must be in 1..8");
  const int c = cap();
  for (int v : values) {
    if (v < -c || v > c) {
      fail(ErrorKind::bit_width,
           "value " + std::to_string(v) + " exceeds " + std::to_string(bits) + "-bit signed range");
    }
  }
}

bool drives_bitlines(Direction d) {
  return d == Direction::forward || d == Direction::recurrent_bl;
}

NonIdealityConfig NonIdealityConfig::all() {
  NonIdealityConfig c;
  c.relaxation = true;
  c.write_verify = true;
  c.ir_drop_driver = true;
  c.ir_drop_wire = true;
  c.coupling_sigma = 1e-3;
  c.adc_offset_sigma = 2e-3;
  return c;
}

void NonIdealityConfig::validate() const {
  if (r_driver < 0 || r_wire < 0) fail(ErrorKind::invalid_argument, "resistances must be >= 0");
  if (coupling_sigma < 0 || adc_offset_sigma < 0) {
    fail(ErrorKind::invalid_argument, "noise sigmas must be >= 0");
  }
}

std::pair<int, int> neuron_index(int i, int j) {
  if (i < 0 || i >= kCorelets || j < 0 || j >= kCorelets) {
    fail(ErrorKind::out_of_range, "corelet index outside 0..15");
  }
  return {16 * i + j, 16 * j + i};
}

int neuron_on_bitline(int bl) {
  check_line(static_cast<std::size_t>(bl), "bit-line");
  return bl;  // bl = 16i + j
}

int neuron_on_sourceline(int sl) {
  check_line(static_cast<std::size_t>(sl), "source-line");
  const int j = sl / 16;
  const int i = sl % 16;
  return 16 * i + j;
}

double settle_voltage(std::span<const double> delta_v, std::span<const double> g) {
  if (delta_v.size() != g.size()) fail(ErrorKind::invalid_argument, "settle: length mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t c = 0; c < g.size(); ++c) {
    num += delta_v[c] * g[c];
    den += g[c];
  }
  if (!(den > 0.0)) fail(ErrorKind::zero_conductance, "settle: output line has no conductance");
  return num / den;
}

OpTrace& OpTrace::operator+=(const OpTrace& o) {
  mvms += o.mvms;
  wl_toggles += o.wl_toggles;
  input_pulses += o.input_pulses;
  sample_cycles += o.sample_cycles;
  settle_events += o.settle_events;
  adc_steps += o.adc_steps;
  conversions += o.conversions;
  macs += o.macs;
  mac_var_weighted += o.mac_var_weighted;
  latency_units += o.latency_units;
  return *this;
}

// ---------------------------------------------------------------------------

CoreState::CoreState() : cells_(kCoreSize * kCoreSize), g_(kCoreSize * kCoreSize, 0.0) {
  seed_lfsr(0);
}

void CoreState::set_conductance(std::size_t row, std::size_t col, double g) {
  check_line(row, "row");
  check_line(col, "column");
  if (!(g >= 0.0)) fail(ErrorKind::out_of_range, "conductance must be >= 0");
  auto& c = cells_[row * kCoreSize + col];
  c.conductance = g;
  c.pending_relaxation = true;
  g_[row * kCoreSize + col] = g;
}

void CoreState::set_cell(std::size_t row, std::size_t col, const device::CellState& state) {
  set_conductance(row, col, state.conductance);
  cells_[row * kCoreSize + col] = state;
}

void CoreState::write_region_exact(std::size_t row0, std::size_t col0, std::size_t rows,
                                   std::size_t cols, std::span<const double> targets) {
  if (row0 + rows > kCoreSize || col0 + cols > kCoreSize) {
    fail(ErrorKind::out_of_range, "region exceeds the 256x256 array");
  }
  if (targets.size() != rows * cols) fail(ErrorKind::invalid_argument, "targets size mismatch");
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) set_conductance(row0 + r, col0 + c, targets[r * cols + c]);
  }
}

device::IterativeStats CoreState::program_region(std::size_t row0, std::size_t col0,
                                                 std::size_t rows, std::size_t cols,
                                                 std::span<const double> targets, int iterations,
                                                 const device::ProgramParams& params,
                                                 const device::DeviceUpdateRule& rule,
                                                 const device::RelaxationModel& model,
                                                 const RngStream& stream) {
  if (row0 + rows > kCoreSize || col0 + cols > kCoreSize) {
    fail(ErrorKind::out_of_range, "region exceeds the 256x256 array");
  }
  if (targets.size() != rows * cols) fail(ErrorKind::invalid_argument, "targets size mismatch");
  std::vector<device::CellState> block(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(cells_.begin() + static_cast<std::ptrdiff_t>((row0 + r) * kCoreSize + col0), cols,
                block.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  auto stats =
      device::program_array_iterative(block, targets, iterations, params, rule, model, stream);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(block.begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                cells_.begin() + static_cast<std::ptrdiff_t>((row0 + r) * kCoreSize + col0));
  }
  sync_region(row0, col0, rows, cols);
  return stats;
}

void CoreState::relax(const device::RelaxationModel& model, const RngStream& stream) {
  device::apply_relaxation(cells_, model, stream);
  sync_region(0, 0, kCoreSize, kCoreSize);
}

void CoreState::seed_lfsr(std::uint64_t seed) {
  for (std::size_t n = 0; n < kCoreSize; ++n) lfsr_[n] = lfsr_for_neuron(seed, static_cast<int>(n));
}

void CoreState::sync_region(std::size_t row0, std::size_t col0, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t r = row0; r < row0 + rows; ++r) {
    for (std::size_t c = col0; c < col0 + cols; ++c) {
      g_[r * kCoreSize + c] = cells_[r * kCoreSize + c].conductance;
    }
  }
}

// ---------------------------------------------------------------------------

int sensing_neuron(Direction d, std::size_t line) {
  const int l = static_cast<int>(line);
  return drives_bitlines(d) ? neuron_on_sourceline(l) : neuron_on_bitline(l);
}

std::size_t destination_register(Direction d, std::size_t line) {
  check_line(line, "output line");
  const std::size_t hi = line / 16;
  const std::size_t lo = line % 16;
  switch (d) {
    case Direction::forward:
    case Direction::backward:
      return line;
    case Direction::recurrent_bl:
      return 16 * lo + hi;  // sensed SL 16j+i → BL 16i+j of the same neuron
    case Direction::recurrent_sl:
      return 16 * lo + hi;  // sensed BL 16i+j → SL 16j+i
  }
  return line;
}

namespace {

struct Geometry {
  kernels::GridView view;  // restricted to the sensed output range
  std::vector<std::uint8_t> conducting;
  std::size_t n_pairs = 0;
  std::size_t in0 = 0;
  std::size_t out0 = 0;
  std::size_t active_wls = 0;
};

Geometry make_geometry(const CoreState& core, const MvmRequest& req, const NeuronConfig& cfg) {
  cfg.validate();
  if (req.input_offset % 2 != 0) fail(ErrorKind::invalid_argument, "input_offset must be even");
  const std::size_t n = req.inputs.size();
  if (req.input_offset + 2 * n > kCoreSize) {
    fail(ErrorKind::out_of_range, "input pairs exceed the driven axis");
  }
  if (req.output_count == 0 || req.output_offset + req.output_count > kCoreSize) {
    fail(ErrorKind::out_of_range, "sensed output range outside the array");
  }
  const int cap = cfg.input_cap();
  for (int x : req.inputs) {
    if (x < -cap || x > cap) {
      fail(ErrorKind::bit_width, "input " + std::to_string(x) + " exceeds in_bits=" +
                                     std::to_string(cfg.in_bits));
    }
  }

  Geometry geo;
  geo.n_pairs = n;
  geo.in0 = req.input_offset;
  geo.out0 = req.output_offset;
  const bool bl = drives_bitlines(req.direction);
  geo.view.in_stride = bl ? kCoreSize : 1;
  geo.view.out_stride = bl ? 1 : kCoreSize;
  geo.view.n_in = kCoreSize;
  geo.view.n_out = req.output_count;
  geo.view.data = core.conductance_data() + req.output_offset * geo.view.out_stride;
  // BL drive: only the input rows' WLs are on. SL drive: every WL is on.
  geo.conducting.assign(kCoreSize, bl ? 0 : 1);
  if (bl) std::fill_n(geo.conducting.begin() + static_cast<std::ptrdiff_t>(geo.in0), 2 * n, 1);
  geo.active_wls = bl ? 2 * n : kCoreSize;
  return geo;
}

// Steady state with series resistance at the drivers and along the driven
// lines. Unknowns: driver-node voltage V_c, per-cell wire drop w_co and output
// voltage V_o. Each sweep solves V_o from the cell voltages, V_c exactly for
// fixed V_o and w, then refreshes w from the cell currents.
void settle_ir(const Geometry& geo, std::span<const double> drive, const NonIdealityConfig& ni,
               std::span<double> v_out) {
  const auto& g = geo.view;
  std::vector<std::size_t> lines;
  for (std::size_t c = 0; c < g.n_in; ++c) {
    if (geo.conducting[c]) lines.push_back(c);
  }
  const std::size_t n_out = g.n_out;
  const double r_drv = ni.ir_drop_driver ? ni.r_driver : 0.0;
  const double r_w = ni.ir_drop_wire ? ni.r_wire : 0.0;

  std::vector<double> vc(lines.size());
  std::vector<double> wire(lines.size() * n_out, 0.0);
  std::vector<double> denom(n_out, 0.0);
  for (std::size_t k = 0; k < lines.size(); ++k) {
    vc[k] = drive[lines[k]];
    for (std::size_t o = 0; o < n_out; ++o) denom[o] += g.at(lines[k], o);
  }
  std::vector<double> vo(n_out, 0.0);
  std::vector<double> current(n_out);

  for (int it = 0; it < kIrMaxIterations; ++it) {
    double change = 0.0;
    for (std::size_t o = 0; o < n_out; ++o) {
      if (denom[o] <= 0.0) continue;
      double num = 0.0;
      for (std::size_t k = 0; k < lines.size(); ++k) {
        num += (vc[k] - wire[k * n_out + o]) * g.at(lines[k], o);
      }
      const double v = num / denom[o];
      change = std::max(change, std::abs(v - vo[o]));
      vo[o] = v;
    }
    for (std::size_t k = 0; k < lines.size(); ++k) {
      const std::size_t c = lines[k];
      double gsum = 0.0;
      double weighted = 0.0;
      for (std::size_t o = 0; o < n_out; ++o) {
        const double gs = g.at(c, o) * kMicro;
        gsum += gs;
        weighted += (vo[o] + wire[k * n_out + o]) * gs;
      }
      const double v = (drive[c] + r_drv * weighted) / (1.0 + r_drv * gsum);
      change = std::max(change, std::abs(v - vc[k]));
      vc[k] = v;
      if (r_w > 0.0) {
        // Segment s of the line carries the current of every cell at or beyond s.
        double* w = &wire[k * n_out];
        for (std::size_t o = 0; o < n_out; ++o) {
          current[o] = (vc[k] - w[o] - vo[o]) * g.at(c, o) * kMicro;
        }
        double tail = 0.0;
        for (std::size_t o = n_out; o-- > 0;) {
          tail += current[o];
          current[o] = tail;
        }
        double drop = 0.0;
        for (std::size_t o = 0; o < n_out; ++o) {
          drop += r_w * current[o];
          change = std::max(change, std::abs(drop - w[o]));
          w[o] = drop;
        }
      }
    }
    if (change < kIrTolerance) {
      std::copy(vo.begin(), vo.end(), v_out.begin());
      return;
    }
  }
  fail(ErrorKind::divergence, "IR-drop fixed point did not converge");
}

}  // namespace

IntegrateResult mvm_integrate(const CoreState& core, const MvmRequest& req,
                              const NeuronConfig& cfg, const NonIdealityConfig& ni, Engine& rng,
                              kernels::Exec exec) {
  ni.validate();
  const Geometry geo = make_geometry(core, req, cfg);
  const std::size_t n_out = geo.view.n_out;
  const int pulses = cfg.in_bits - 1;

  IntegrateResult res;
  res.charge.assign(n_out, 0.0);
  std::vector<double> drive(kCoreSize, 0.0);
  std::vector<double> numer(n_out);
  std::vector<double> denom(n_out);
  std::vector<double> settled(n_out);
  std::normal_distribution<double> unit(0.0, 1.0);

  // Denominators do not depend on the drive pattern.
  kernels::settle(exec, geo.view, drive, geo.conducting, numer, denom);
  for (std::size_t o = 0; o < n_out; ++o) {
    if (!(denom[o] > 0.0)) {
      fail(ErrorKind::zero_conductance,
           "sensed line " + std::to_string(req.output_offset + o) + " has no conducting cells");
    }
  }

  double sum_v = 0.0;
  double sum_v2 = 0.0;
  std::uint64_t samples = 0;

  for (int k = pulses - 1; k >= 0; --k) {
    std::fill(drive.begin(), drive.end(), 0.0);
    for (std::size_t p = 0; p < geo.n_pairs; ++p) {
      const int x = req.inputs[p];
      if (((std::abs(x) >> k) & 1) == 0) continue;
      const double v = x > 0 ? cfg.v_read : -cfg.v_read;
      drive[geo.in0 + 2 * p] = v;
      drive[geo.in0 + 2 * p + 1] = -v;
    }
    for (std::size_t c = geo.in0; c < geo.in0 + 2 * geo.n_pairs; ++c) {
      sum_v += drive[c];
      sum_v2 += drive[c] * drive[c];
      ++samples;
    }

    if (ni.ir_drop_driver || ni.ir_drop_wire) {
      settle_ir(geo, drive, ni, settled);
    } else {
      kernels::settle(exec, geo.view, drive, geo.conducting, numer, denom);
      for (std::size_t o = 0; o < n_out; ++o) settled[o] = numer[o] / denom[o];
    }
    if (ni.coupling_sigma > 0.0) {
      for (auto& v : settled) v += ni.coupling_sigma * unit(rng);
    }
    const double weight = std::ldexp(cfg.charge_scale, k);
    for (std::size_t o = 0; o < n_out; ++o) res.charge[o] += weight * settled[o];
  }

  OpTrace& t = res.trace;
  t.mvms = 1;
  t.input_pulses = static_cast<std::uint64_t>(pulses);
  t.settle_events = static_cast<std::uint64_t>(pulses);
  t.sample_cycles = (std::uint64_t{1} << pulses) - 1;
  t.wl_toggles = static_cast<std::uint64_t>(pulses) * geo.active_wls;
  t.macs = geo.n_pairs * n_out;
  if (samples > 0) {
    const double mean = sum_v / static_cast<double>(samples);
    const double var = sum_v2 / static_cast<double>(samples) - mean * mean;
    t.mac_var_weighted = static_cast<double>(t.macs) * std::max(var, 0.0);
  }
  t.latency_units = t.settle_events + t.sample_cycles;
  return res;
}

MvmOutput mvm(const CoreState& core, const MvmRequest& req, const NeuronConfig& cfg,
              const NonIdealityConfig& ni, Engine& rng, std::span<LfsrPair> lfsr,
              kernels::Exec exec) {
  if (!req.offset_trim.empty() && req.offset_trim.size() != kCoreSize) {
    fail(ErrorKind::invalid_argument, "offset_trim must hold one value per neuron");
  }
  if (!req.dither_scale.empty() && req.dither_scale.size() != req.output_count) {
    fail(ErrorKind::invalid_argument, "dither_scale must hold one value per sensed line");
  }
  const bool stochastic = cfg.activation == Activation::stochastic;
  if (stochastic && lfsr.size() != kCoreSize) {
    fail(ErrorKind::invalid_argument, "stochastic activation needs 256 LFSR registers");
  }

  IntegrateResult integ = mvm_integrate(core, req, cfg, ni, rng, exec);
  MvmOutput out;
  out.trace = integ.trace;
  out.codes.resize(req.output_count);
  out.registers.resize(req.output_count);
  const auto& offsets = core.neuron_offsets();
  int max_steps = 0;
  for (std::size_t o = 0; o < req.output_count; ++o) {
    const std::size_t line = req.output_offset + o;
    const auto neuron = static_cast<std::size_t>(sensing_neuron(req.direction, line));
    double off = offsets[neuron];
    if (!req.offset_trim.empty()) off += req.offset_trim[neuron];
    out.registers[o] = destination_register(req.direction, line);
    if (stochastic) {
      const double scale = req.dither_scale.empty() ? 1.0 : req.dither_scale[o];
      out.codes[o] = stochastic_sample(integ.charge[o] + off,
                                       cfg.stochastic_range * cfg.q_step * scale, lfsr[neuron], cfg.dither);
      continue;
    }
    const AdcReading r = adc_read(integ.charge[o], cfg, off);
    out.codes[o] = activation_map(r.sign, r.steps, cfg);
    const int spent = decrement_steps_spent(r, cfg);
    out.trace.adc_steps += static_cast<std::uint64_t>(spent);
    max_steps = std::max(max_steps, spent);
  }
  out.trace.conversions = req.output_count;
  out.trace.latency_units += static_cast<std::uint64_t>(max_steps) + (stochastic ? 1 : 0);
  return out;
}

std::vector<double> denormalize(std::span<const int> codes, std::span<const double> column_sums,
                                const NeuronConfig& cfg, double reference_scale) {
  if (codes.size() != column_sums.size()) {
    fail(ErrorKind::invalid_argument, "denormalize: codes and sums differ in length");
  }
  if (!(reference_scale > 0)) fail(ErrorKind::invalid_argument, "reference_scale must be > 0");
  std::vector<double> out(codes.size());
  const double lsb = cfg.q_step / cfg.charge_scale;
  for (std::size_t j = 0; j < codes.size(); ++j) {
    if (!(column_sums[j] > 0.0)) {
      fail(ErrorKind::zero_conductance, "denormalize: zero conductance sum");
    }
    out[j] = codes[j] * lsb * column_sums[j] / reference_scale;
  }
  return out;
}

}  // namespace cimsim
