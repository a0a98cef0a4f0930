#include "cimsim/rbm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cimsim/error.hpp"

namespace cimsim::rbm {

namespace {

constexpr std::uint64_t kTagGibbs = 0x6188;
constexpr std::uint64_t kTagGibbsLfsr = 0x6189;

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Eigen::MatrixXd bernoulli(const Eigen::MatrixXd& p, Engine& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd s(p.rows(), p.cols());
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    for (Eigen::Index r = 0; r < p.rows(); ++r) s(r, c) = u(rng) < p(r, c) ? 1.0 : 0.0;
  }
  return s;
}

// Fisher-Yates with an explicit bounded draw so the order is the same on every
// standard library.
std::vector<std::size_t> permutation(std::size_t n, Engine& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

const mapper::Assignment& assignment_of(const Chip& chip, int layer) {
  for (const auto& a : chip.plan().assignments) {
    if (a.layer == layer) return a;
  }
  fail(ErrorKind::not_programmed, "RBM slot layer " + std::to_string(layer) + " not on the chip");
}

// Σ G over the cells that conduct onto one sensed line. Backward reads turn
// every WL on, so a hidden row sums the whole core row; forward reads only
// enable the driven rows.
double row_sum(const CoreState& core, std::size_t row) {
  double s = 0.0;
  for (std::size_t c = 0; c < kCoreSize; ++c) s += core.conductance(row, c);
  return s;
}

double col_sum(const CoreState& core, std::size_t row0, std::size_t rows, std::size_t col) {
  double s = 0.0;
  for (std::size_t r = row0; r < row0 + rows; ++r) s += core.conductance(r, col);
  return s;
}

// Charge per unit of model pre-activation on a line with conductance sum `sum`.
double charge_per_unit(const NeuronConfig& n, const mapper::ConductanceMatrix& m, double sum) {
  return n.charge_scale * n.v_read * m.g_max / (m.w_max * sum);
}

}  // namespace

void RbmModel::validate() const {
  if (w.rows() == 0 || w.cols() == 0) fail(ErrorKind::invalid_argument, "RBM has no units");
  if (a.size() != w.rows() || b.size() != w.cols()) {
    fail(ErrorKind::invalid_argument, "RBM bias lengths do not match the weight matrix");
  }
  if (!w.allFinite() || !a.allFinite() || !b.allFinite()) {
    fail(ErrorKind::divergence, "RBM parameters are not finite");
  }
}

RbmModel init_rbm(std::size_t visible, std::size_t hidden, std::uint64_t seed, double scale) {
  if (visible == 0 || hidden == 0) fail(ErrorKind::invalid_argument, "RBM needs visible and hidden units");
  Engine rng = RngStream(seed).derive(0x4B3).engine();
  std::normal_distribution<double> g(0.0, scale);
  RbmModel m;
  m.w.resize(static_cast<Eigen::Index>(visible), static_cast<Eigen::Index>(hidden));
  for (Eigen::Index c = 0; c < m.w.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.w.rows(); ++r) m.w(r, c) = g(rng);
  }
  m.a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(visible));
  m.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden));
  return m;
}

void CdConfig::validate() const {
  if (epochs < 0 || batch == 0 || !(lr > 0) || momentum < 0 || momentum >= 1 || weight_decay < 0 ||
      noise_fraction < 0) {
    fail(ErrorKind::invalid_argument, "invalid CD settings");
  }
}

double reconstruction_error(const RbmModel& model, const Eigen::MatrixXd& data) {
  const Eigen::MatrixXd ph = sigmoid((data * model.w).rowwise() + model.b.transpose());
  const Eigen::MatrixXd pv = sigmoid((ph * model.w.transpose()).rowwise() + model.a.transpose());
  return (data - pv).squaredNorm() / static_cast<double>(data.size());
}

RbmModel cd1_train_rbm(const Eigen::MatrixXd& data, std::size_t hidden, const CdConfig& cfg,
                       CdHistory* history) {
  cfg.validate();
  if (data.rows() == 0) fail(ErrorKind::invalid_argument, "no training rows");
  if (((data.array() != 0.0) && (data.array() != 1.0)).any()) {
    fail(ErrorKind::invalid_argument, "RBM training data must be binary");
  }
  RbmModel m = init_rbm(static_cast<std::size_t>(data.cols()), hidden, cfg.seed);
  if (history) history->recon_error = {reconstruction_error(m, data)};

  Eigen::MatrixXd vw = Eigen::MatrixXd::Zero(m.w.rows(), m.w.cols());
  Eigen::VectorXd va = Eigen::VectorXd::Zero(m.a.size());
  Eigen::VectorXd vb = Eigen::VectorXd::Zero(m.b.size());
  const RngStream root = RngStream(cfg.seed).derive(0xCD1);
  const auto n = static_cast<std::size_t>(data.rows());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Engine order_rng = root.derive({0, static_cast<std::uint64_t>(epoch)}).engine();
    const auto order = permutation(n, order_rng);
    std::uint64_t step = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch, ++step) {
      const std::size_t len = std::min(cfg.batch, n - start);
      Eigen::MatrixXd v0(static_cast<Eigen::Index>(len), data.cols());
      for (std::size_t k = 0; k < len; ++k) v0.row(static_cast<Eigen::Index>(k)) = data.row(static_cast<Eigen::Index>(order[start + k]));
      Engine rng = root.derive({1, static_cast<std::uint64_t>(epoch), step}).engine();

      Eigen::MatrixXd w = m.w;
      if (cfg.noise_fraction > 0) {
        std::normal_distribution<double> g(0.0, cfg.noise_fraction * m.w.cwiseAbs().maxCoeff());
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
          for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) += g(rng);
        }
      }
      const Eigen::MatrixXd ph0 = sigmoid((v0 * w).rowwise() + m.b.transpose());
      const Eigen::MatrixXd h0 = bernoulli(ph0, rng);
      const Eigen::MatrixXd pv1 = sigmoid((h0 * w.transpose()).rowwise() + m.a.transpose());
      const Eigen::MatrixXd ph1 = sigmoid((pv1 * w).rowwise() + m.b.transpose());

      const double inv = 1.0 / static_cast<double>(len);
      const Eigen::MatrixXd gw = (v0.transpose() * ph0 - pv1.transpose() * ph1) * inv - cfg.weight_decay * m.w;
      vw = cfg.momentum * vw + cfg.lr * gw;
      va = cfg.momentum * va + cfg.lr * (v0 - pv1).colwise().mean().transpose();
      vb = cfg.momentum * vb + cfg.lr * (ph0 - ph1).colwise().mean().transpose();
      m.w += vw;
      m.a += va;
      m.b += vb;
    }
    if (!m.w.allFinite() || !m.a.allFinite() || !m.b.allFinite()) {
      fail(ErrorKind::divergence, "RBM parameters are not finite at epoch " + std::to_string(epoch));
    }
    if (history) history->recon_error.push_back(reconstruction_error(m, data));
  }
  return m;
}

RbmDeployment deploy_rbm(Chip& chip, const RbmModel& model, std::size_t interleave, int first_layer,
                         double g_max) {
  model.validate();
  const std::size_t V = model.visible(), H = model.hidden();
  if (interleave == 0 || interleave > V) fail(ErrorKind::invalid_argument, "interleave must be in 1..visible");
  if (interleave > static_cast<std::size_t>(kChipCores)) {
    fail(ErrorKind::capacity_exceeded, "RBM interleave needs more than 48 cores");
  }
  RbmDeployment dep;
  dep.visible = V;
  dep.hidden = H;
  dep.slots = mapper::rbm_interleave(V, interleave);
  dep.neuron.in_bits = 2;
  dep.neuron.out_bits = 8;
  dep.neuron.dither = Dither::logistic;
  dep.neuron.stochastic_range = 1.0;

  std::vector<mapper::LayerSegments> segs;
  std::map<int, ChipLayer> layers;
  for (std::size_t s = 0; s < dep.slots.size(); ++s) {
    const auto& units = dep.slots[s];
    std::vector<double> w(units.size() * H), a(units.size()), b(H, 0.0);
    for (std::size_t k = 0; k < units.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(units[k]);
      for (std::size_t j = 0; j < H; ++j) w[k * H + j] = model.w(i, static_cast<Eigen::Index>(j));
      a[k] = model.a(i);
    }
    if (s == 0) {
      for (std::size_t j = 0; j < H; ++j) b[j] = model.b(static_cast<Eigen::Index>(j));
    }
    auto quad = mapper::rbm_to_quad(w, a, b, units.size(), H, 1.0, g_max);
    if (quad.m.rows > kCoreSize || quad.m.cols > kCoreSize) {
      fail(ErrorKind::capacity_exceeded, "RBM slot does not fit one core; raise the interleave");
    }
    const int id = first_layer + static_cast<int>(s);
    segs.push_back({id, {quad.m.rows, quad.m.cols}, 1.0, mapper::split_matrix(quad.m)});
    ChipLayer layer;
    layer.matrix = quad.m;
    layer.neuron = dep.neuron;
    layers.emplace(id, std::move(layer));
    dep.layers.push_back(id);
    dep.quads.push_back(std::move(quad));
  }
  mapper::PlaceHints hints;
  hints.auto_duplicate = false;
  program_chip(chip, mapper::place(segs, kChipCores, hints), layers);

  // Identity-mode step for the hidden partial sums: the largest charge any
  // binary visible pattern can produce maps to the top code.
  for (std::size_t s = 0; s < dep.slots.size(); ++s) {
    const auto& a = assignment_of(chip, dep.layers[s]);
    const CoreState& core = chip.core(a.core);
    const auto& q = dep.quads[s];
    double bound = 0.0;
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t row = a.core_row + 2 * j;
      double pos = 0.0, neg = 0.0;
      for (std::size_t c = 0; c < q.m.cols / 2; ++c) {
        const double d = core.conductance(row, a.core_col + 2 * c) - core.conductance(row, a.core_col + 2 * c + 1);
        (d > 0 ? pos : neg) += std::abs(d);
      }
      bound = std::max(bound, std::max(pos, neg) / row_sum(core, row));
    }
    NeuronConfig n = dep.neuron;
    const double full = n.charge_scale * n.v_read;
    dep.q_step.push_back((bound > 0 ? bound * full : full) / n.code_cap());
  }
  return dep;
}

RbmModel effective_model(const Chip& chip, const RbmDeployment& dep) {
  RbmModel m;
  m.w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dep.visible), static_cast<Eigen::Index>(dep.hidden));
  m.a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dep.visible));
  m.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dep.hidden));
  for (std::size_t s = 0; s < dep.slots.size(); ++s) {
    const auto& a = assignment_of(chip, dep.layers[s]);
    const CoreState& core = chip.core(a.core);
    const auto& q = dep.quads[s];
    const double unit = q.m.w_max / q.m.g_max;
    auto pair = [&](std::size_t rp, std::size_t cp) {
      return (core.conductance(a.core_row + 2 * rp, a.core_col + 2 * cp) -
              core.conductance(a.core_row + 2 * rp, a.core_col + 2 * cp + 1)) * unit;
    };
    const auto& units = dep.slots[s];
    for (std::size_t k = 0; k < units.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(units[k]);
      for (std::size_t j = 0; j < dep.hidden; ++j) m.w(i, static_cast<Eigen::Index>(j)) = pair(j, k);
      for (std::size_t t = 0; t < q.visible_bias_pairs; ++t) m.a(i) += pair(dep.hidden + t, k);
    }
    if (s == 0) {
      for (std::size_t j = 0; j < dep.hidden; ++j) {
        for (std::size_t t = 0; t < q.hidden_bias_pairs; ++t) {
          m.b(static_cast<Eigen::Index>(j)) += pair(j, units.size() + t);
        }
      }
    }
  }
  return m;
}

void seed_sampler(Chip& chip, const RbmDeployment& dep, std::uint64_t seed) {
  for (int layer : dep.layers) {
    const int core = assignment_of(chip, layer).core;
    chip.core(core).seed_lfsr(RngStream(seed).derive({kTagGibbsLfsr, static_cast<std::uint64_t>(core)}).key());
  }
}

std::vector<int> sample_hidden(Chip& chip, const RbmDeployment& dep, const std::vector<int>& v) {
  if (v.size() != dep.visible) fail(ErrorKind::invalid_argument, "visible state has the wrong length");
  const std::size_t H = dep.hidden;
  const std::size_t k = dep.slots.size();
  const RngStream root = RngStream(chip.seed()).derive({kTagGibbs, chip.next_invocation()});
  NeuronConfig stoch = dep.neuron;
  stoch.activation = Activation::stochastic;

  // Drive the source lines, sense the even bit lines.
  std::vector<int> h(H, 0);
  std::vector<double> pre(H, 0.0);
  for (std::size_t s = 0; s < k; ++s) {
    const auto& a = assignment_of(chip, dep.layers[s]);
    const auto& q = dep.quads[s];
    CoreState& core = chip.core(a.core);
    std::vector<int> in(q.m.cols / 2, 0);
    for (std::size_t t = 0; t < dep.slots[s].size(); ++t) in[t] = v[dep.slots[s][t]];
    if (s == 0) std::fill(in.begin() + static_cast<std::ptrdiff_t>(dep.slots[s].size()), in.end(), 1);
    MvmRequest req;
    req.direction = Direction::backward;
    req.input_offset = a.core_col;
    req.inputs = in;
    req.output_offset = a.core_row;
    req.output_count = 2 * H;
    req.offset_trim = chip.offset_trim(a.core);
    std::vector<double> sums(2 * H);
    for (std::size_t r = 0; r < 2 * H; ++r) sums[r] = row_sum(core, a.core_row + r);
    Engine rng = root.derive(s).engine();
    NeuronConfig cfg = dep.neuron;
    cfg.q_step = dep.q_step[s];
    if (k == 1) {
      stoch.q_step = cfg.q_step;
      std::vector<double> scale(2 * H);
      for (std::size_t r = 0; r < 2 * H; ++r) scale[r] = charge_per_unit(stoch, q.m, sums[r]) / stoch.q_step;
      req.dither_scale = scale;
      const auto out = mvm(core, req, stoch, chip.nonideal(), rng, core.lfsr_states());
      for (std::size_t j = 0; j < H; ++j) h[j] = out.codes[2 * j];
      return h;
    }
    const auto out = mvm(core, req, cfg, chip.nonideal(), rng);
    const auto vals = denormalize(out.codes, sums, cfg, cfg.v_read * q.m.g_max / q.m.w_max);
    for (std::size_t j = 0; j < H; ++j) pre[j] += vals[2 * j];
  }
  const auto& a0 = assignment_of(chip, dep.layers[0]);
  auto lfsr = chip.core(a0.core).lfsr_states();
  for (std::size_t j = 0; j < H; ++j) {
    const int neuron = sensing_neuron(Direction::backward, a0.core_row + 2 * j);
    h[j] = stochastic_sample(pre[j], 1.0, lfsr[static_cast<std::size_t>(neuron)], Dither::logistic);
  }
  return h;
}

std::vector<int> sample_visible(Chip& chip, const RbmDeployment& dep, const std::vector<int>& h) {
  if (h.size() != dep.hidden) fail(ErrorKind::invalid_argument, "hidden state has the wrong length");
  const RngStream root = RngStream(chip.seed()).derive({kTagGibbs, chip.next_invocation()});
  NeuronConfig stoch = dep.neuron;
  stoch.activation = Activation::stochastic;

  // Drive the bit lines, sense the even source lines.
  std::vector<int> v(dep.visible, 0);
  for (std::size_t s = 0; s < dep.slots.size(); ++s) {
    const auto& a = assignment_of(chip, dep.layers[s]);
    const auto& q = dep.quads[s];
    CoreState& core = chip.core(a.core);
    const std::size_t pairs = dep.hidden + q.visible_bias_pairs;
    std::vector<int> in(pairs, 1);
    std::copy(h.begin(), h.end(), in.begin());
    const std::size_t n_vis = dep.slots[s].size();
    MvmRequest req;
    req.direction = Direction::forward;
    req.input_offset = a.core_row;
    req.inputs = in;
    req.output_offset = a.core_col;
    req.output_count = 2 * n_vis;
    req.offset_trim = chip.offset_trim(a.core);
    stoch.q_step = dep.q_step[s];
    std::vector<double> scale(2 * n_vis);
    for (std::size_t c = 0; c < 2 * n_vis; ++c) {
      scale[c] = charge_per_unit(stoch, q.m, col_sum(core, a.core_row, 2 * pairs, a.core_col + c)) / stoch.q_step;
    }
    req.dither_scale = scale;
    Engine rng = root.derive(s).engine();
    const auto out = mvm(core, req, stoch, chip.nonideal(), rng, core.lfsr_states());
    for (std::size_t t = 0; t < n_vis; ++t) v[dep.slots[s][t]] = out.codes[2 * t];
  }
  return v;
}

Eigen::VectorXd gibbs_recover(Chip& chip, const RbmDeployment& dep, const Eigen::VectorXd& image,
                              const std::vector<int>& mask, int cycles, std::uint64_t seed) {
  if (static_cast<std::size_t>(image.size()) != dep.visible || mask.size() != dep.visible) {
    fail(ErrorKind::invalid_argument, "image and mask must hold one entry per visible unit");
  }
  if (((image.array() != 0.0) && (image.array() != 1.0)).any()) {
    fail(ErrorKind::invalid_argument, "RBM images must be binary");
  }
  if (cycles < 0) fail(ErrorKind::invalid_argument, "cycles must be >= 0");
  seed_sampler(chip, dep, seed);
  std::vector<int> v(dep.visible);
  for (std::size_t i = 0; i < dep.visible; ++i) v[i] = static_cast<int>(image(static_cast<Eigen::Index>(i)));
  for (int cycle = 0; cycle < cycles; ++cycle) {
    v = sample_visible(chip, dep, sample_hidden(chip, dep, v));
    for (std::size_t i = 0; i < dep.visible; ++i) {
      if (mask[i]) v[i] = static_cast<int>(image(static_cast<Eigen::Index>(i)));
    }
  }
  Eigen::VectorXd out(static_cast<Eigen::Index>(dep.visible));
  for (std::size_t i = 0; i < dep.visible; ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

std::pair<Eigen::VectorXd, std::vector<int>> flip_pixels(const Eigen::VectorXd& image, double fraction,
                                                         std::uint64_t seed) {
  if (fraction < 0 || fraction > 1) fail(ErrorKind::invalid_argument, "flip fraction must be in [0, 1]");
  const auto n = static_cast<std::size_t>(image.size());
  Engine rng = RngStream(seed).derive(0xF11B).engine();
  const auto idx = permutation(n, rng);
  const auto flips = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  Eigen::VectorXd out = image;
  std::vector<int> mask(n, 1);
  for (std::size_t k = 0; k < flips; ++k) {
    const auto i = static_cast<Eigen::Index>(idx[k]);
    out(i) = 1.0 - out(i);
    mask[idx[k]] = 0;
  }
  return {out, mask};
}

}  // namespace cimsim::rbm
