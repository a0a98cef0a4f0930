#include "cimsim/chip.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <random>
#include <set>
#include <string>

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

// Top-level RNG stream tags.
constexpr std::uint64_t kTagOffsets = 0x0FF5;
constexpr std::uint64_t kTagLfsr = 0x1F5F;
constexpr std::uint64_t kTagProgram = 0x9A0C;
constexpr std::uint64_t kTagRelax = 0x7E1A;
constexpr std::uint64_t kTagExec = 0xE8EC;

bool same_assignment(const mapper::Assignment& a, const mapper::Assignment& b) {
  return a.layer == b.layer && a.core == b.core && a.core_row == b.core_row &&
         a.core_col == b.core_col && a.group == b.group && a.segment.row0 == b.segment.row0 &&
         a.segment.rows == b.segment.rows && a.segment.col0 == b.segment.col0 &&
         a.segment.cols == b.segment.cols;
}

std::vector<const mapper::Assignment*> assignments_of(const mapper::PlacementPlan& plan, int layer) {
  std::vector<const mapper::Assignment*> out;
  for (const auto& a : plan.assignments) {
    if (a.layer == layer) out.push_back(&a);
  }
  return out;
}

std::vector<double> segment_targets(const mapper::ConductanceMatrix& m, const mapper::Segment& s) {
  std::vector<double> t(s.rows * s.cols);
  for (std::size_t r = 0; r < s.rows; ++r) {
    for (std::size_t c = 0; c < s.cols; ++c) t[r * s.cols + c] = m.at(s.row0 + r, s.col0 + c);
  }
  return t;
}

MvmRequest segment_request(const Chip& chip, const mapper::Assignment& a, std::span<const int> ext) {
  MvmRequest req;
  req.direction = Direction::forward;
  req.input_offset = a.core_row;
  req.inputs = ext.subspan(a.segment.row0 / 2, a.segment.rows / 2);
  req.output_offset = a.core_col;
  req.output_count = a.segment.cols;
  req.offset_trim = chip.offset_trim(a.core);
  return req;
}

const ChipLayer& runnable_layer(const Chip& chip, int layer_id) {
  const ChipLayer& layer = chip.layer(layer_id);
  if (!layer.programmed) fail(ErrorKind::not_programmed, "layer " + std::to_string(layer_id) + " not programmed");
  if (layer.neuron.activation != Activation::identity && layer.neuron.activation != Activation::relu) {
    fail(ErrorKind::invalid_argument, "layers on the chip support identity and relu activations");
  }
  return layer;
}

void check_item(const ChipLayer& layer, const DigitalVector& item) {
  if (item.values.size() != layer.matrix.weight_pairs()) {
    fail(ErrorKind::invalid_argument, "input length " + std::to_string(item.values.size()) +
                                          " != fan-in " + std::to_string(layer.matrix.weight_pairs()));
  }
  if (item.bits != layer.neuron.in_bits) {
    fail(ErrorKind::bit_width, "input bit width differs from the layer's in_bits");
  }
  item.validate();
}

}  // namespace

std::size_t ProgrammingReport::total_failures() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.failures;
  return n;
}

std::size_t ProgrammingReport::total_cells() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.cells;
  return n;
}

Chip::Chip(std::uint64_t seed, NonIdealityConfig nonideal) : seed_(seed), nonideal_(nonideal) {
  nonideal_.validate();
  powered_.fill(true);
}

void Chip::check_core(int id) const {
  if (id < 0 || id >= kChipCores) fail(ErrorKind::out_of_range, "core id outside 0..47");
}

CoreState& Chip::core(int id) {
  check_core(id);
  auto& slot = cores_[static_cast<std::size_t>(id)];
  if (!slot) {
    slot = std::make_unique<CoreState>();
    const RngStream root(seed_);
    slot->seed_lfsr(root.derive({kTagLfsr, static_cast<std::uint64_t>(id)}).key());
    if (nonideal_.adc_offset_sigma > 0.0) {
      Engine rng = root.derive({kTagOffsets, static_cast<std::uint64_t>(id)}).engine();
      std::normal_distribution<double> d(0.0, nonideal_.adc_offset_sigma);
      for (auto& o : slot->neuron_offsets()) o = d(rng);
    }
  }
  return *slot;
}

const CoreState& Chip::core(int id) const { return const_cast<Chip*>(this)->core(id); }

bool Chip::powered(int id) const {
  check_core(id);
  return powered_[static_cast<std::size_t>(id)];
}

void Chip::set_powered(int id, bool on) {
  check_core(id);
  powered_[static_cast<std::size_t>(id)] = on;
}

ChipLayer& Chip::layer(int id) {
  auto it = layers_.find(id);
  if (it == layers_.end()) fail(ErrorKind::not_programmed, "layer " + std::to_string(id) + " is not on the chip");
  return it->second;
}

const ChipLayer& Chip::layer(int id) const { return const_cast<Chip*>(this)->layer(id); }

void Chip::restore(mapper::PlacementPlan plan, std::map<int, ChipLayer> layers,
                   std::uint64_t invocations, std::uint64_t program_calls) {
  if (const auto bad = mapper::validate_placement(plan); !bad.empty()) {
    fail(ErrorKind::invalid_placement, bad.front());
  }
  for (const auto& a : plan.assignments) {
    if (!layers.count(a.layer)) fail(ErrorKind::schema, "plan layer " + std::to_string(a.layer) + " has no layer entry");
  }
  plan_ = std::move(plan);
  layers_ = std::move(layers);
  invocation_ = invocations;
  program_calls_ = program_calls;
}

std::array<double, kCoreSize>& Chip::offset_trim(int core_id) {
  check_core(core_id);
  return trims_[static_cast<std::size_t>(core_id)];
}

const std::array<double, kCoreSize>& Chip::offset_trim(int core_id) const {
  check_core(core_id);
  return trims_[static_cast<std::size_t>(core_id)];
}

ProgrammingReport program_chip(Chip& chip, const mapper::PlacementPlan& plan,
                               const std::map<int, ChipLayer>& layers) {
  if (auto v = mapper::validate_placement(plan); !v.empty()) {
    fail(ErrorKind::invalid_placement, "invalid placement: " + v.front());
  }
  if (plan.n_cores > kChipCores) fail(ErrorKind::invalid_placement, "plan uses more than 48 cores");
  for (const auto& [id, l] : chip.layers_) {
    if (!l.programmed) continue;
    const auto before = assignments_of(chip.plan_, id);
    const auto after = assignments_of(plan, id);
    bool same = before.size() == after.size();
    for (std::size_t k = 0; same && k < before.size(); ++k) same = same_assignment(*before[k], *after[k]);
    if (!same) {
      fail(ErrorKind::invalid_placement,
           "plan moves already programmed layer " + std::to_string(id));
    }
  }
  for (const auto& [id, l] : layers) {
    auto it = plan.layers.find(id);
    if (it == plan.layers.end()) fail(ErrorKind::invalid_placement, "layer " + std::to_string(id) + " not in plan");
    if (it->second.rows != l.matrix.rows || it->second.cols != l.matrix.cols) {
      fail(ErrorKind::invalid_placement, "layer " + std::to_string(id) + " shape differs from plan");
    }
    if (l.matrix.targets.size() != l.matrix.rows * l.matrix.cols) {
      fail(ErrorKind::invalid_argument, "layer " + std::to_string(id) + " target size mismatch");
    }
    l.neuron.validate();
  }
  chip.plan_ = plan;

  const NonIdealityConfig& ni = chip.nonideal();
  const RngStream root(chip.seed());
  const device::RelaxationModel between =
      ni.relaxation ? chip.relaxation : device::RelaxationModel::zero();
  const std::uint64_t call = chip.program_calls_++;

  ProgrammingReport report;
  std::vector<std::size_t> entry_of;  // report entry per programmed assignment
  std::vector<const mapper::Assignment*> written;
  std::set<int> touched;
  for (const auto& a : plan.assignments) {
    auto it = layers.find(a.layer);
    if (it == layers.end()) continue;
    const auto targets = segment_targets(it->second.matrix, a.segment);
    CoreState& core = chip.core(a.core);
    ProgrammingEntry e;
    e.layer = a.layer;
    e.core = a.core;
    e.group = a.group;
    e.cells = targets.size();
    if (ni.write_verify) {
      const RngStream s = root.derive({kTagProgram, static_cast<std::uint64_t>(a.layer),
                                       static_cast<std::uint64_t>(a.group), a.segment.row_band,
                                       a.segment.col_band});
      const auto stats = core.program_region(a.core_row, a.core_col, a.segment.rows, a.segment.cols,
                                             targets, chip.program_iterations, chip.program_params,
                                             chip.update_rule, between, s);
      e.failures = stats.failures;
      e.mean_pulses = stats.mean_pulses();
    } else {
      core.write_region_exact(a.core_row, a.core_col, a.segment.rows, a.segment.cols, targets);
    }
    touched.insert(a.core);
    written.push_back(&a);
    report.entries.push_back(e);
  }
  if (ni.relaxation) {
    for (int c : touched) {
      chip.core(c).relax(chip.relaxation,
                         root.derive({kTagRelax, call, static_cast<std::uint64_t>(c)}));
    }
  }
  for (std::size_t k = 0; k < written.size(); ++k) {
    const auto& a = *written[k];
    const auto& m = layers.at(a.layer).matrix;
    const CoreState& core = chip.core(a.core);
    double mean = 0.0, sq = 0.0;
    const auto n = static_cast<double>(a.segment.rows * a.segment.cols);
    for (std::size_t r = 0; r < a.segment.rows; ++r) {
      for (std::size_t c = 0; c < a.segment.cols; ++c) {
        const double d = core.conductance(a.core_row + r, a.core_col + c) -
                         m.at(a.segment.row0 + r, a.segment.col0 + c);
        mean += d;
        sq += d * d;
      }
    }
    mean /= n;
    report.entries[k].deviation_sigma = std::sqrt(std::max(sq / n - mean * mean, 0.0));
  }
  for (const auto& [id, l] : layers) {
    ChipLayer copy = l;
    copy.programmed = true;
    chip.layers_[id] = std::move(copy);
  }
  return report;
}

std::size_t row_bands(const mapper::PlacementPlan& plan, int layer) {
  std::set<std::size_t> bands;
  for (const auto& a : plan.assignments) {
    if (a.layer == layer && a.group == 0) bands.insert(a.segment.row_band);
  }
  return bands.size();
}

NeuronConfig segment_config(const ChipLayer& layer, std::size_t bands) {
  NeuronConfig cfg = layer.neuron;
  if (bands > 1 || (cfg.activation != Activation::identity && cfg.activation != Activation::relu)) {
    cfg.activation = Activation::identity;
  }
  if (bands > 1) cfg.out_bits = std::min(8, cfg.in_bits + 2);
  return cfg;
}

LayerOutput execute_layer(Chip& chip, int layer_id, const std::vector<DigitalVector>& batch,
                          kernels::Exec exec) {
  const ChipLayer& layer = runnable_layer(chip, layer_id);
  const auto& plan = chip.plan();
  const auto& m = layer.matrix;
  const int groups = plan.groups(layer_id);
  const std::size_t bands = row_bands(plan, layer_id);
  const NeuronConfig cfg = segment_config(layer, bands);
  const std::size_t pairs = m.weight_pairs();

  std::vector<std::vector<const mapper::Assignment*>> by_group(static_cast<std::size_t>(groups));
  for (const auto& a : plan.assignments) {
    if (a.layer != layer_id) continue;
    if (!chip.powered(a.core)) {
      fail(ErrorKind::invalid_argument, "core " + std::to_string(a.core) + " is powered off");
    }
    chip.core(a.core);  // materialize before any parallel region
    by_group[static_cast<std::size_t>(a.group)].push_back(&a);
  }
  for (const auto& item : batch) check_item(layer, item);

  // Σ_i G_ij of each segment column, from the targets.
  std::map<const mapper::Assignment*, std::vector<double>> sums;
  for (const auto& g : by_group) {
    for (const auto* a : g) {
      auto& s = sums[a];
      s.assign(a->segment.cols, 0.0);
      for (std::size_t r = 0; r < a->segment.rows; ++r) {
        for (std::size_t c = 0; c < a->segment.cols; ++c) s[c] += m.at(a->segment.row0 + r, a->segment.col0 + c);
      }
    }
  }

  const std::uint64_t inv = chip.next_invocation();
  const RngStream root = RngStream(chip.seed()).derive({kTagExec, inv});
  const double reference = cfg.v_read * m.g_max / m.w_max;
  const Chip& cchip = chip;
  const NonIdealityConfig& ni = chip.nonideal();

  LayerOutput out;
  out.values.assign(batch.size(), std::vector<double>(m.cols, 0.0));
  std::vector<OpTrace> traces(batch.size());
  const bool parallel = exec == kernels::Exec::parallel && batch.size() > 1;
  const kernels::Exec inner = parallel ? kernels::Exec::serial : exec;

  auto run_item = [&](std::size_t b) {
    std::vector<int> ext(batch[b].values);
    ext.resize(pairs + m.bias_rows, layer.neuron.input_cap());
    const auto& pieces = by_group[b % static_cast<std::size_t>(groups)];
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      const auto& a = *pieces[k];
      const MvmRequest req = segment_request(cchip, a, ext);
      Engine rng = root.derive({b, static_cast<std::uint64_t>(a.core), k}).engine();
      const MvmOutput r = mvm(cchip.core(a.core), req, cfg, ni, rng, {}, inner);
      const auto vals = denormalize(r.codes, sums.at(&a), cfg, reference);
      for (std::size_t c = 0; c < a.segment.cols; ++c) out.values[b][a.segment.col0 + c] += vals[c];
      traces[b] += r.trace;
    }
    if (layer.neuron.activation == Activation::relu) {
      for (auto& v : out.values[b]) v = std::max(v, 0.0);
    }
  };

  if (parallel) {
    std::exception_ptr error;
    const auto n = static_cast<std::ptrdiff_t>(batch.size());
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t b = 0; b < n; ++b) {
      try {
        run_item(static_cast<std::size_t>(b));
      } catch (...) {
#pragma omp critical
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
  } else {
    for (std::size_t b = 0; b < batch.size(); ++b) run_item(b);
  }
  for (const auto& t : traces) out.trace += t;
  return out;
}

std::vector<SegmentProbe> probe_layer(Chip& chip, int layer_id, const DigitalVector& item,
                                      bool drive_bias, int group) {
  const ChipLayer& layer = runnable_layer(chip, layer_id);
  check_item(layer, item);
  const auto& m = layer.matrix;
  const NeuronConfig cfg = segment_config(layer, row_bands(chip.plan(), layer_id));
  std::vector<int> ext(item.values);
  ext.resize(m.weight_pairs() + m.bias_rows, drive_bias ? layer.neuron.input_cap() : 0);
  const RngStream root = RngStream(chip.seed()).derive({kTagExec, chip.next_invocation()});
  std::vector<SegmentProbe> out;
  std::uint64_t k = 0;
  for (const auto& a : chip.plan().assignments) {
    if (a.layer != layer_id || (group >= 0 && a.group != group)) continue;
    if (!chip.powered(a.core)) fail(ErrorKind::invalid_argument, "core " + std::to_string(a.core) + " is powered off");
    const MvmRequest req = segment_request(chip, a, ext);
    Engine rng = root.derive({static_cast<std::uint64_t>(a.core), k++}).engine();
    SegmentProbe p;
    p.assignment = &a;
    p.charge = mvm_integrate(chip.core(a.core), req, cfg, chip.nonideal(), rng).charge;
    p.codes = mvm(chip.core(a.core), req, cfg, chip.nonideal(), rng).codes;
    out.push_back(std::move(p));
  }
  return out;
}

DigitalVector quantize_input(const std::vector<double>& x, double scale, int bits) {
  if (!(scale > 0)) fail(ErrorKind::invalid_argument, "input scale must be > 0");
  DigitalVector d;
  d.bits = bits;
  const int cap = d.cap();
  d.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double q = std::round(x[i] / scale);
    d.values[i] = static_cast<int>(std::clamp(q, static_cast<double>(-cap), static_cast<double>(cap)));
  }
  return d;
}

namespace {

std::vector<double> im2col_patch(const std::vector<double>& x, const ConvGeometry& g,
                                 std::size_t oy, std::size_t ox) {
  std::vector<double> p(g.k_h * g.k_w * g.in_c, 0.0);
  for (std::size_t ky = 0; ky < g.k_h; ++ky) {
    for (std::size_t kx = 0; kx < g.k_w; ++kx) {
      const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
      const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
      if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(g.in_h) ||
          xx >= static_cast<std::ptrdiff_t>(g.in_w)) {
        continue;
      }
      for (std::size_t c = 0; c < g.in_c; ++c) {
        p[(ky * g.k_w + kx) * g.in_c + c] =
            x[(static_cast<std::size_t>(y) * g.in_w + static_cast<std::size_t>(xx)) * g.in_c + c];
      }
    }
  }
  return p;
}

}  // namespace

std::vector<std::vector<double>> run_network(Chip& chip, const Network& net,
                                             const std::vector<std::vector<double>>& inputs,
                                             OpTrace* trace) {
  std::vector<std::vector<double>> act = inputs;
  for (const auto& op : net.ops) {
    switch (op.kind) {
      case OpKind::dense: {
        const auto& layer = chip.layer(op.layer);
        std::vector<DigitalVector> batch;
        batch.reserve(act.size());
        for (const auto& x : act) batch.push_back(quantize_input(x, op.input_scale, layer.neuron.in_bits));
        LayerOutput r = execute_layer(chip, op.layer, batch);
        for (auto& v : r.values) {
          for (auto& e : v) e *= op.input_scale * op.output_gain;
        }
        if (trace) *trace += r.trace;
        act = std::move(r.values);
        break;
      }
      case OpKind::conv: {
        const auto& g = op.conv;
        const auto& layer = chip.layer(op.layer);
        const std::size_t oh = g.out_h(), ow = g.out_w();
        std::vector<DigitalVector> batch;
        for (const auto& x : act) {
          if (x.size() != g.in_h * g.in_w * g.in_c) fail(ErrorKind::invalid_argument, "conv input size mismatch");
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
              batch.push_back(quantize_input(im2col_patch(x, g, y, xx), op.input_scale, layer.neuron.in_bits));
            }
          }
        }
        LayerOutput r = execute_layer(chip, op.layer, batch);
        if (trace) *trace += r.trace;
        const std::size_t oc = layer.matrix.cols;
        std::vector<std::vector<double>> next(act.size(), std::vector<double>(oh * ow * oc));
        for (std::size_t b = 0; b < act.size(); ++b) {
          for (std::size_t p = 0; p < oh * ow; ++p) {
            const auto& v = r.values[b * oh * ow + p];
            for (std::size_t c = 0; c < oc; ++c) next[b][p * oc + c] = v[c] * op.input_scale * op.output_gain;
          }
        }
        act = std::move(next);
        break;
      }
      case OpKind::relu:
        for (auto& v : act) {
          for (auto& e : v) e = std::max(e, 0.0);
        }
        break;
      case OpKind::maxpool: {
        const auto& g = op.conv;
        const std::size_t oh = g.in_h / op.pool, ow = g.in_w / op.pool;
        for (auto& x : act) {
          if (x.size() != g.in_h * g.in_w * g.in_c) fail(ErrorKind::invalid_argument, "pool input size mismatch");
          std::vector<double> y(oh * ow * g.in_c, -std::numeric_limits<double>::infinity());
          for (std::size_t r = 0; r < oh * op.pool; ++r) {
            for (std::size_t c = 0; c < ow * op.pool; ++c) {
              for (std::size_t k = 0; k < g.in_c; ++k) {
                auto& dst = y[((r / op.pool) * ow + c / op.pool) * g.in_c + k];
                dst = std::max(dst, x[(r * g.in_w + c) * g.in_c + k]);
              }
            }
          }
          x = std::move(y);
        }
        break;
      }
      case OpKind::flatten:
        break;  // activations are kept flat in HWC order
    }
  }
  return act;
}

void EnergyConfig::validate() const {
  if (c_par < 0 || c_wl < 0 || v_wl < 0 || v_dd < 0 || e_adc_step < 0 || e_neuron_static < 0 ||
      ns_per_event < 0) {
    fail(ErrorKind::invalid_argument, "energy constants must be >= 0");
  }
}

EnergyReport estimate_energy(const OpTrace& t, const EnergyConfig& cfg) {
  cfg.validate();
  EnergyReport r;
  r.mac = cfg.c_par * t.mac_var_weighted;
  r.wordline = static_cast<double>(t.wl_toggles) * cfg.c_wl * cfg.v_wl * cfg.v_wl;
  r.adc = static_cast<double>(t.adc_steps) * cfg.e_adc_step;
  r.neuron_static = static_cast<double>(t.conversions) * cfg.e_neuron_static;
  return r;
}

double estimate_latency_ns(const OpTrace& t, const EnergyConfig& cfg) {
  cfg.validate();
  return static_cast<double>(t.latency_units) * cfg.ns_per_event;
}

}  // namespace cimsim
