#include "cimsim/coopt.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cimsim/error.hpp"

namespace cimsim::coopt {

namespace {

std::vector<DigitalVector> quantize_rows(const Eigen::MatrixXd& x, std::size_t n, double scale,
                                         int bits) {
  std::vector<DigitalVector> batch;
  batch.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = x.row(static_cast<Eigen::Index>(r));
    batch.push_back(quantize_input(std::vector<double>(row.begin(), row.end()), scale, bits));
  }
  return batch;
}

double percentile_abs(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  for (auto& x : v) x = std::abs(x);
  const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) - 1;
  const auto idx = std::min(k, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
  return v[idx];
}

struct Fit {
  double gain = 1.0;
  double error = 0.0;
};

// Least-squares gain of chip outputs onto the software reference.
Fit fit_gain(const std::vector<std::vector<double>>& out, double scale, const Eigen::MatrixXd& ref) {
  double oo = 0.0, orr = 0.0;
  for (std::size_t b = 0; b < out.size(); ++b) {
    for (std::size_t c = 0; c < out[b].size(); ++c) {
      const double o = out[b][c] * scale;
      oo += o * o;
      orr += o * ref(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c));
    }
  }
  Fit f;
  f.gain = oo > 0.0 ? orr / oo : 1.0;
  for (std::size_t b = 0; b < out.size(); ++b) {
    for (std::size_t c = 0; c < out[b].size(); ++c) {
      const double e = f.gain * out[b][c] * scale - ref(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c));
      f.error += e * e;
    }
  }
  return f;
}

}  // namespace

void CalibrationOptions::validate() const {
  if (v_read_grid.empty()) fail(ErrorKind::invalid_argument, "empty v_read grid");
  for (double v : v_read_grid) {
    if (!(v > 0)) fail(ErrorKind::invalid_argument, "v_read scales must be > 0");
  }
  if (!(nominal_v_read > 0) || q_grid_points < 2 || !(q_grid_decades > 0) || !(percentile > 0) ||
      percentile > 1 || offset_repeats < 1 || max_samples == 0) {
    fail(ErrorKind::invalid_argument, "invalid calibration options");
  }
}

double full_scale_q_step(const NeuronConfig& seg) {
  return seg.charge_scale * seg.v_read * seg.input_cap() / seg.code_cap();
}

double snap_q_step(double target, double full_scale, int points, double decades) {
  if (!(target > 0)) return full_scale;
  double best = full_scale;
  for (int j = 1; j < points; ++j) {
    const double q = full_scale * std::pow(10.0, -decades * j / (points - 1));
    if (q < target * (1.0 - 1e-12)) break;
    best = q;
  }
  return best;
}

Calibration calibrate_layer(Chip& chip, NetworkOp& op, const nn::TrainingSet& layer_inputs,
                            const Eigen::MatrixXd& reference, const CalibrationOptions& opts) {
  opts.validate();
  const auto& d = layer_inputs.data();
  if (d.size() == 0) fail(ErrorKind::invalid_argument, "calibration needs at least one sample");
  ChipLayer& layer = chip.layer(op.layer);
  if (static_cast<std::size_t>(d.x.cols()) != layer.matrix.weight_pairs()) {
    fail(ErrorKind::invalid_argument, "calibration inputs do not match the layer fan-in");
  }
  const bool with_ref = reference.size() > 0;
  const std::size_t n = std::min(d.size(), opts.max_samples);
  if (with_ref && (static_cast<std::size_t>(reference.rows()) < n ||
                   static_cast<std::size_t>(reference.cols()) != layer.matrix.cols)) {
    fail(ErrorKind::invalid_argument, "reference shape does not match the calibration batch");
  }
  const Eigen::MatrixXd ref = with_ref ? Eigen::MatrixXd(reference.topRows(static_cast<Eigen::Index>(n)))
                                       : Eigen::MatrixXd();
  const auto batch = quantize_rows(d.x, n, op.input_scale, layer.neuron.in_bits);
  const std::size_t bands = row_bands(chip.plan(), op.layer);

  std::vector<const mapper::Assignment*> placed;
  for (const auto& a : chip.plan().assignments) {
    if (a.layer == op.layer) placed.push_back(&a);
  }
  for (const auto* a : placed) {
    auto& trim = chip.offset_trim(a->core);
    for (std::size_t c = 0; c < a->segment.cols; ++c) {
      trim[static_cast<std::size_t>(sensing_neuron(Direction::forward, a->core_col + c))] = 0.0;
    }
  }

  auto choose_q = [&]() {
    std::vector<double> charges;
    for (const auto& item : batch) {
      for (const auto& p : probe_layer(chip, op.layer, item, true, 0)) {
        charges.insert(charges.end(), p.charge.begin(), p.charge.end());
      }
    }
    const NeuronConfig seg = segment_config(layer, bands);
    const double target = percentile_abs(std::move(charges), opts.percentile) / seg.code_cap();
    return snap_q_step(target, full_scale_q_step(seg), opts.q_grid_points, opts.q_grid_decades);
  };

  // Offsets: mean code at zero drive with the bias rows idle, removed in
  // volts. Two passes absorb the rounding of the first estimate.
  const DigitalVector zero{std::vector<int>(layer.matrix.weight_pairs(), 0), layer.neuron.in_bits};
  auto trim_offsets = [&]() {
    for (int round = 0; round < 2; ++round) {
      std::map<std::pair<int, int>, double> mean;
      for (int r = 0; r < opts.offset_repeats; ++r) {
        for (const auto& p : probe_layer(chip, op.layer, zero, false)) {
          for (std::size_t c = 0; c < p.codes.size(); ++c) {
            const int neuron = sensing_neuron(Direction::forward, p.assignment->core_col + c);
            mean[{p.assignment->core, neuron}] += static_cast<double>(p.codes[c]) / opts.offset_repeats;
          }
        }
      }
      const double q = segment_config(layer, bands).q_step;
      for (const auto& [key, m] : mean) chip.offset_trim(key.first)[static_cast<std::size_t>(key.second)] -= m * q;
    }
  };

  layer.neuron.v_read = opts.nominal_v_read;
  layer.neuron.q_step = choose_q();
  trim_offsets();

  // Candidates nearest the nominal read voltage first: ties keep it.
  std::vector<double> grid = opts.v_read_grid;
  std::stable_sort(grid.begin(), grid.end(),
                   [](double a, double b) { return std::abs(a - 1.0) < std::abs(b - 1.0); });
  if (!with_ref) grid.resize(1);

  Calibration cal;
  cal.layer = op.layer;
  double best = INFINITY;
  for (double scale : grid) {
    layer.neuron.v_read = opts.nominal_v_read * scale;
    layer.neuron.q_step = choose_q();
    double err = 0.0;
    if (with_ref) err = fit_gain(execute_layer(chip, op.layer, batch).values, op.input_scale, ref).error;
    if (err < best * (1.0 - 1e-9)) {
      best = err;
      cal.v_read_scale = scale;
      cal.v_read = layer.neuron.v_read;
      cal.q_step = layer.neuron.q_step;
    }
  }
  layer.neuron.v_read = cal.v_read;
  layer.neuron.q_step = cal.q_step;

  trim_offsets();
  for (const auto* a : placed) {
    const auto& trim = chip.offset_trim(a->core);
    for (std::size_t c = 0; c < a->segment.cols; ++c) {
      const int neuron = sensing_neuron(Direction::forward, a->core_col + c);
      cal.offsets.push_back({a->core, neuron, trim[static_cast<std::size_t>(neuron)]});
    }
  }

  cal.output_gain = with_ref ? fit_gain(execute_layer(chip, op.layer, batch).values, op.input_scale, ref).gain
                             : 1.0;
  op.output_gain = cal.output_gain;
  return cal;
}

ChipLayer to_chip_layer(const nn::Mlp& model, std::size_t l, const NeuronConfig& base) {
  model.validate();
  const nn::Dense& d = model.layers.at(l);
  mapper::LayerSpec spec;
  spec.name = "dense" + std::to_string(l);
  spec.kind = mapper::LayerKind::dense;
  spec.in = static_cast<std::size_t>(d.w.rows());
  spec.out = static_cast<std::size_t>(d.w.cols());
  spec.weights.resize(spec.in * spec.out);
  for (std::size_t k = 0; k < spec.in; ++k) {
    for (std::size_t o = 0; o < spec.out; ++o) {
      spec.weights[k * spec.out + o] = d.w(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(o));
    }
  }
  spec.bias.resize(spec.out);
  for (std::size_t o = 0; o < spec.out; ++o) spec.bias[o] = d.b(static_cast<Eigen::Index>(o)) / d.alpha;
  ChipLayer layer;
  layer.matrix = mapper::conv_to_matrix(spec, 1.0, 40.0);
  layer.neuron = base;
  layer.neuron.in_bits = model.in_bits;
  layer.neuron.activation = l + 1 < model.depth() ? Activation::relu : Activation::identity;
  return layer;
}

mapper::LayerSegments segments_for(const nn::Mlp& model, std::size_t l, double intensity,
                                   std::size_t max_rows) {
  const auto m = to_chip_layer(model, l, NeuronConfig{}).matrix;
  return {static_cast<int>(l), {m.rows, m.cols}, intensity, mapper::split_matrix(m, max_rows)};
}

Network network_for(const nn::Mlp& model) {
  Network net;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    NetworkOp op;
    op.kind = OpKind::dense;
    op.layer = static_cast<int>(l);
    op.input_scale = model.input_scale(l);
    net.ops.push_back(op);
  }
  return net;
}

Eigen::MatrixXd chip_forward(Chip& chip, const Network& net, const Eigen::MatrixXd& x,
                             std::size_t upto) {
  if (upto > net.ops.size()) fail(ErrorKind::invalid_argument, "network has fewer ops");
  if (upto == 0) return x;
  Network head;
  head.ops.assign(net.ops.begin(), net.ops.begin() + static_cast<std::ptrdiff_t>(upto));
  std::vector<std::vector<double>> in(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) in[static_cast<std::size_t>(r)].assign(x.row(r).begin(), x.row(r).end());
  const auto out = run_network(chip, head, in);
  Eigen::MatrixXd y(x.rows(), out.empty() ? 0 : static_cast<Eigen::Index>(out[0].size()));
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t c = 0; c < out[r].size(); ++c) y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = out[r][c];
  }
  return y;
}

namespace {

nn::Dataset calibration_rows(const nn::Dataset& d, std::size_t n) {
  std::vector<std::size_t> rows(std::min(n, d.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return d.subset(rows);
}

// Calibrates layer l on the chip's own outputs of the layers before it.
Calibration calibrate_one(const nn::Mlp& model, std::size_t l, Chip& chip, Network& net,
                          const nn::Dataset& cal_rows, const CalibrationOptions& opts) {
  net.ops[l].input_scale = model.input_scale(l);
  nn::Dataset feats;
  feats.classes = cal_rows.classes;
  feats.x = chip_forward(chip, net, cal_rows.x, l);
  feats.y = cal_rows.y;
  const Eigen::MatrixXd ref = nn::forward(model, feats.x, l, l + 1);
  return calibrate_layer(chip, net.ops[l], nn::TrainingSet(std::move(feats)), ref, opts);
}

Calibration program_and_calibrate(const nn::Mlp& model, std::size_t l, Chip& chip,
                                  const mapper::PlacementPlan& plan, Network& net,
                                  const nn::Dataset& cal_rows, const NeuronConfig& base,
                                  const CalibrationOptions& opts, ProgrammingReport& report) {
  const auto r = program_chip(chip, plan, {{static_cast<int>(l), to_chip_layer(model, l, base)}});
  report.entries.insert(report.entries.end(), r.entries.begin(), r.entries.end());
  return calibrate_one(model, l, chip, net, cal_rows, opts);
}

}  // namespace

Deployment deploy(const nn::Mlp& model, Chip& chip, const mapper::PlacementPlan& plan,
                  const nn::TrainingSet& data, const NeuronConfig& base,
                  const CalibrationOptions& opts) {
  Deployment dep;
  dep.net = network_for(model);
  const nn::Dataset cal = calibration_rows(data.data(), opts.max_samples);
  for (std::size_t l = 0; l < model.depth(); ++l) {
    dep.calibration.push_back(program_and_calibrate(model, l, chip, plan, dep.net, cal, base, opts, dep.report));
  }
  return dep;
}

std::vector<Calibration> calibrate_network(const nn::Mlp& model, Chip& chip, Network& net,
                                           const nn::TrainingSet& data, const CalibrationOptions& opts) {
  if (net.ops.size() != model.depth()) fail(ErrorKind::invalid_argument, "network and model depths differ");
  const nn::Dataset cal = calibration_rows(data.data(), opts.max_samples);
  std::vector<Calibration> out;
  for (std::size_t l = 0; l < model.depth(); ++l) out.push_back(calibrate_one(model, l, chip, net, cal, opts));
  return out;
}

FinetuneResult finetune_chip_in_loop(nn::Mlp model, Chip& chip, const mapper::PlacementPlan& plan,
                                     const nn::TrainingSet& data, const FinetuneConfig& cfg) {
  if (!(cfg.lr_divisor > 0) || cfg.epochs < 0) fail(ErrorKind::invalid_argument, "invalid fine-tuning settings");
  FinetuneResult res;
  res.deployment.net = network_for(model);
  const nn::Dataset& all = data.data();
  const nn::Dataset cal = calibration_rows(all, cfg.calibration.max_samples);
  nn::TrainConfig tc = cfg.train;
  tc.lr = cfg.train.lr / cfg.lr_divisor;
  tc.epochs = cfg.epochs;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    res.deployment.calibration.push_back(program_and_calibrate(
        model, l, chip, plan, res.deployment.net, cal, cfg.neuron, cfg.calibration, res.deployment.report));
    nn::Dataset feats;
    feats.classes = all.classes;
    feats.x = chip_forward(chip, res.deployment.net, all.x, l + 1);
    feats.y = all.y;
    FinetuneStep step;
    step.layer = l;
    if (l + 1 < model.depth()) {
      tc.seed = cfg.train.seed + l + 1;
      const nn::TrainingSet measured(feats);
      nn::train(model, measured, tc, l + 1);
      step.hybrid_accuracy = nn::accuracy(model, feats, l + 1);
    } else {
      step.hybrid_accuracy = nn::accuracy(feats.x, feats.y);
    }
    res.trace.push_back(step);
  }
  res.model = std::move(model);
  return res;
}

double chip_accuracy(Chip& chip, const Network& net, const nn::TestSet& test) {
  const auto& d = test.data();
  return nn::accuracy(chip_forward(chip, net, d.x, net.ops.size()), d.y);
}

}  // namespace cimsim::coopt
