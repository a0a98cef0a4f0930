#include "checks.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

#include "cimsim/coopt.hpp"
#include "cimsim/rbm.hpp"
#include "oracle.hpp"

namespace checks {

using namespace cimsim;

namespace {

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, static_cast<double>(a)...);
  return buf;
}

struct Recorder {
  Result r;
  const Options& o;

  Recorder(int id, std::string name, const Options& opts) : o(opts) {
    r.id = id;
    r.name = std::move(name);
  }
  void metric(const std::string& name, double value, const std::string& unit) {
    r.metrics.push_back({o.run_id, "c" + std::to_string(r.id) + "." + name, value, unit, o.seed});
  }
  Result done(bool pass, std::string detail) {
    r.pass = pass;
    r.detail = std::move(detail);
    return r;
  }
};

mapper::ConductanceMatrix random_conductances(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> g(1.0, 40.0);
  mapper::ConductanceMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.targets.resize(rows * cols);
  for (auto& t : m.targets) t = g(rng);
  return m;
}

std::vector<int> random_codes(std::size_t n, int cap, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-cap, cap);
  std::vector<int> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

MvmRequest forward_request(std::span<const int> x, std::size_t cols) {
  MvmRequest r;
  r.inputs = x;
  r.output_count = cols;
  return r;
}

std::vector<double> uniform_targets(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 pick(seed);
  std::uniform_real_distribution<double> u(1.0, 40.0);
  std::vector<double> t(n);
  for (auto& v : t) v = u(pick);
  return t;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

mapper::PlacementPlan place_model(const nn::Mlp& m, const mapper::PlaceHints& hints,
                                  std::size_t first_rows = 256) {
  std::vector<mapper::LayerSegments> segs;
  for (std::size_t l = 0; l < m.depth(); ++l) segs.push_back(coopt::segments_for(m, l, 1.0, l == 0 ? first_rows : 256));
  return mapper::place(segs, kChipCores, hints);
}

}  // namespace

Result oracle_equivalence(const Options& o) {
  Recorder rec(1, "oracle equivalence (ideal mode)", o);
  const int cases = o.quick ? 40 : 200;
  std::mt19937_64 rng(o.seed ^ 0xC1);
  std::uniform_int_distribution<std::size_t> pairs_d(1, kCoreSize / 2), cols_d(1, kCoreSize);
  const int in_choices[] = {2, 4, 6}, out_choices[] = {4, 8};
  std::uniform_real_distribution<double> log_frac(std::log(1.0 / 64), 0.0);
  CoreState core;
  std::size_t compared = 0, mismatched = 0;
  Engine mvm_rng(o.seed);
  for (int t = 0; t < cases; ++t) {
    const std::size_t pairs = pairs_d(rng), cols = cols_d(rng);
    const auto m = random_conductances(2 * pairs, cols, rng);
    core.write_region_exact(0, 0, m.rows, m.cols, m.targets);
    NeuronConfig cfg;
    cfg.in_bits = in_choices[rng() % 3];
    cfg.out_bits = out_choices[rng() % 2];
    // Steps from full swing down to 1/64 of it, so saturation, zero and
    // mid-range codes all occur.
    cfg.q_step = cfg.v_read * cfg.input_cap() / cfg.code_cap() * std::exp(log_frac(rng));
    const int cap = std::min((1 << (cfg.out_bits - 1)) - 1, cfg.n_max - 1);
    for (int k = 0; k < 4; ++k) {
      const auto x = random_codes(pairs, (1 << (cfg.in_bits - 1)) - 1, rng);
      const auto out = mvm(core, forward_request(x, cols), cfg, {}, mvm_rng);
      for (std::size_t c = 0; c < cols; ++c) {
        ++compared;
        mismatched += out.codes[c] != oracle::column_code(m, 0, m.rows, c, x, cfg.v_read, cfg.q_step, 1.0, cap);
      }
    }
  }
  rec.metric("cases", cases, "count");
  rec.metric("codes_compared", static_cast<double>(compared), "count");
  rec.metric("mismatches", static_cast<double>(mismatched), "count");
  return rec.done(mismatched == 0, fmt("%.0f cases, %.0f codes, %.0f mismatches", cases, compared, mismatched));
}

Result bit_serial_structure(const Options& o) {
  Recorder rec(2, "bit-serial pulses and sample cycles", o);
  std::mt19937_64 rng(o.seed ^ 0xC2);
  CoreState core;
  const auto m = random_conductances(32, 8, rng);
  core.write_region_exact(0, 0, m.rows, m.cols, m.targets);
  bool ok = true;
  std::string detail;
  for (int bits = 2; bits <= 6; ++bits) {
    NeuronConfig cfg;
    cfg.in_bits = bits;
    const auto x = random_codes(16, cfg.input_cap(), rng);
    Engine e(0);
    const auto t = mvm_integrate(core, forward_request(x, 8), cfg, {}, e).trace;
    const bool good = t.input_pulses == static_cast<std::uint64_t>(bits - 1) &&
                      t.sample_cycles == (std::uint64_t{1} << (bits - 1)) - 1;
    ok = ok && good;
    rec.metric("pulses_b" + std::to_string(bits), static_cast<double>(t.input_pulses), "count");
    rec.metric("cycles_b" + std::to_string(bits), static_cast<double>(t.sample_cycles), "count");
    detail += fmt("b%.0f:%.0f/%.0f ", bits, static_cast<double>(t.input_pulses), static_cast<double>(t.sample_cycles));
  }
  return rec.done(ok, "pulses/cycles " + detail);
}

Result write_verify_yield(const Options& o) {
  Recorder rec(3, "write-verify yield", o);
  const std::size_t n = o.quick ? 2000 : 10000;
  std::vector<device::CellState> cells(n);
  const auto targets = uniform_targets(n, o.seed ^ 0xC3);
  const auto s = device::program_array_iterative(cells, targets, 0, {}, {}, {}, RngStream(o.seed).derive(0xC3));
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n; ++i) inside += std::abs(cells[i].conductance - targets[i]) <= 1.0;
  const double converged = 1.0 - static_cast<double>(s.initial_failures) / static_cast<double>(n);
  const double in_window = static_cast<double>(inside) / static_cast<double>(n);
  rec.metric("converged_fraction", converged, "fraction");
  rec.metric("in_window_fraction", in_window, "fraction");
  rec.metric("mean_pulses", s.mean_pulses(), "pulses");
  return rec.done(converged >= 0.99 && in_window >= 0.99,
                  fmt("%.4f converged, %.4f within +-1 uS of %.0f cells (need >= 0.99)", converged, in_window,
                      static_cast<double>(n)));
}

Result iterative_reprogramming(const Options& o) {
  Recorder rec(4, "iterative reprogramming", o);
  const std::size_t n = o.quick ? 2000 : 10000;
  std::vector<device::CellState> cells(n);
  const auto targets = uniform_targets(n, o.seed ^ 0xC4);
  const auto s = device::program_array_iterative(cells, targets, 3, {}, {}, {}, RngStream(o.seed).derive(0xC4));
  const double ratio = s.deviation_sigma[2] / s.deviation_sigma[0];
  for (std::size_t i = 0; i < s.deviation_sigma.size(); ++i) {
    rec.metric("sigma_iter" + std::to_string(i + 1), s.deviation_sigma[i], "uS");
  }
  rec.metric("reduction", 1.0 - ratio, "fraction");
  return rec.done(ratio <= 0.8, fmt("sigma %.3f -> %.3f uS, %.1f%% lower (need >= 20%%)", s.deviation_sigma[0],
                                    s.deviation_sigma[2], 100 * (1 - ratio)));
}

Result placement_transparency(const Options& o) {
  Recorder rec(5, "placement transparency", o);
  const auto split = nn::load_digits();
  auto m = nn::init_mlp({64, 48, 32, 10}, o.seed);
  nn::TrainConfig tc;
  tc.epochs = 3;
  tc.seed = o.seed;
  nn::train(m, split.train, tc);

  mapper::PlaceHints plain;
  plain.auto_duplicate = false;
  mapper::PlaceHints merged = plain;
  merged.force_merge = true;
  merged.protect = {0};  // keeps the merge of layers 1 and 2 diagonal
  mapper::PlaceHints dup;
  dup.copies = {{0, 2}, {1, 3}, {2, 2}};
  // Layer 0 is split into row bands of 64 in every variant.
  const std::vector<mapper::PlacementPlan> plans{place_model(m, plain, 64), place_model(m, merged, 64),
                                                 place_model(m, dup, 64)};
  bool has_merge = false, has_dup = plans[2].groups(1) == 3;
  for (const auto& a : plans[1].assignments) has_merge |= a.merge == mapper::MergeStyle::diagonal;
  std::size_t violations = 0;
  for (const auto& p : plans) violations += mapper::validate_placement(p).size();

  NeuronConfig base;
  base.q_step = 0.02;
  std::vector<std::vector<double>> x;
  for (Eigen::Index r = 0; r < 40; ++r) {
    const auto row = split.test.data().x.row(r);
    x.emplace_back(row.begin(), row.end());
  }
  std::vector<std::vector<std::vector<double>>> outs;
  for (const auto& p : plans) {
    Chip chip(o.seed);
    std::map<int, ChipLayer> layers;
    for (std::size_t l = 0; l < m.depth(); ++l) layers[static_cast<int>(l)] = coopt::to_chip_layer(m, l, base);
    program_chip(chip, p, layers);
    outs.push_back(run_network(chip, coopt::network_for(m), x));
  }
  const bool same = outs[0] == outs[1] && outs[0] == outs[2];
  // Guard against a degenerate pass where every output saturates or vanishes.
  std::set<std::vector<double>> distinct_rows(outs[0].begin(), outs[0].end());
  const bool informative = distinct_rows.size() > x.size() / 2;
  rec.metric("cores_plain", plans[0].cores_used(), "count");
  rec.metric("cores_merged", plans[1].cores_used(), "count");
  rec.metric("cores_duplicated", plans[2].cores_used(), "count");
  rec.metric("identical_outputs", same, "bool");
  const bool distinct = plans[0].cores_used() != plans[1].cores_used() && plans[0].cores_used() != plans[2].cores_used();
  return rec.done(same && informative && has_merge && has_dup && distinct && violations == 0,
                  fmt("cores %.0f / %.0f / %.0f (split / diagonal merge / duplicated), outputs identical %.0f, "
                      "distinct rows %.0f/%.0f, diagonal merge %.0f, layer-1 groups %.0f, violations %.0f",
                      plans[0].cores_used(), plans[1].cores_used(), plans[2].cores_used(), same,
                      distinct_rows.size(), x.size(), has_merge, plans[2].groups(1), violations));
}

Result noise_resilient_training(const Options& o) {
  Recorder rec(6, "noise-resilient training ordering", o);
  const auto split = nn::load_digits();
  const double ps[] = {0.0, 0.15, 0.20};
  std::vector<double> acc[3];
  for (int s = 0; s < 5; ++s) {
    const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(s);
    for (int k = 0; k < 3; ++k) {
      auto m = nn::init_mlp({64, 32, 10}, seed);
      nn::TrainConfig c;
      c.noise_fraction = ps[k];
      c.seed = seed;
      nn::train(m, split.train, c);
      acc[k].push_back(nn::noisy_accuracy(m, split.test.data(), 0.10, 20, seed ^ 0xA11));
    }
  }
  for (int k = 0; k < 3; ++k) rec.metric(fmt("noisy_acc_p%.2f", ps[k]), mean(acc[k]), "fraction");
  const bool ok = mean(acc[1]) > mean(acc[0]) && mean(acc[2]) > mean(acc[0]);
  return rec.done(ok, fmt("mean accuracy under 10%% weight noise: p=0 %.4f, p=0.15 %.4f, p=0.20 %.4f", mean(acc[0]),
                          mean(acc[1]), mean(acc[2])));
}

Result chip_in_the_loop(const Options& o) {
  Recorder rec(7, "chip-in-the-loop fine-tuning", o);
  const auto split = nn::load_digits();
  NonIdealityConfig ni;
  ni.relaxation = true;
  ni.write_verify = true;
  ni.ir_drop_driver = true;
  ni.r_driver = 10000.0;
  NeuronConfig base;
  base.out_bits = 8;
  std::vector<double> ideal, dep, ft;
  bool each = true;
  const int seeds = o.quick ? 1 : 5;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(s);
    auto m = nn::init_mlp({64, 64, 32, 10}, seed);
    nn::TrainConfig c;
    c.seed = seed;
    nn::train(m, split.train, c);
    const auto plan = place_model(m, {});
    ideal.push_back(nn::accuracy(m, split.test.data()));

    Chip a(100 + seed, ni);
    a.program_iterations = 3;
    const auto d = coopt::deploy(m, a, plan, split.train, base);
    dep.push_back(coopt::chip_accuracy(a, d.net, split.test));

    Chip b(100 + seed, ni);
    b.program_iterations = 3;
    coopt::FinetuneConfig fc;
    fc.train = c;
    fc.neuron = base;
    const auto r = coopt::finetune_chip_in_loop(m, b, plan, split.train, fc);
    ft.push_back(coopt::chip_accuracy(b, r.deployment.net, split.test));
    each = each && ft.back() >= dep.back();
    rec.metric("ideal_s" + std::to_string(s), ideal.back(), "fraction");
    rec.metric("deployed_s" + std::to_string(s), dep.back(), "fraction");
    rec.metric("finetuned_s" + std::to_string(s), ft.back(), "fraction");
  }
  const double loss = mean(ideal) - mean(dep);
  const double recovery = loss > 0 ? (mean(ft) - mean(dep)) / loss : 1.0;
  rec.metric("recovery", recovery, "fraction");
  return rec.done(each && recovery >= 0.3,
                  fmt("ideal %.4f, deployed %.4f, fine-tuned %.4f; %.0f%% of the loss recovered (need >= 30%%)",
                      mean(ideal), mean(dep), mean(ft), 100 * recovery));
}

Result rbm_recovery(const Options& o) {
  Recorder rec(8, "RBM image recovery", o);
  const auto split = nn::load_digits();
  const Eigen::MatrixXd train = nn::binarize(split.train.data().x);
  const Eigen::MatrixXd test = nn::binarize(split.test.data().x);
  rbm::CdConfig c;
  c.seed = o.seed;
  const auto model = rbm::cd1_train_rbm(train, 16, c);
  NonIdealityConfig ni;
  ni.relaxation = true;
  ni.write_verify = true;
  ni.ir_drop_driver = true;
  Chip chip(o.seed + 1, ni);
  const auto dep = rbm::deploy_rbm(chip, model, 4);
  double corrupted = 0.0, recovered = 0.0;
  for (Eigen::Index i = 0; i < 100; ++i) {
    const Eigen::VectorXd img = test.row(i).transpose();
    const auto [bad, mask] = rbm::flip_pixels(img, 0.2, o.seed + static_cast<std::uint64_t>(i));
    corrupted += (bad - img).norm();
    recovered += (rbm::gibbs_recover(chip, dep, bad, mask, 10, o.seed + static_cast<std::uint64_t>(i)) - img).norm();
  }
  const double ratio = recovered / corrupted;
  rec.metric("corruption_l2", corrupted / 100, "pixels");
  rec.metric("recovered_l2", recovered / 100, "pixels");
  rec.metric("ratio", ratio, "fraction");
  return rec.done(ratio <= 0.5, fmt("mean L2 %.3f -> %.3f, ratio %.3f (need <= 0.5)", corrupted / 100, recovered / 100, ratio));
}

Result adc_properties(const Options& o) {
  Recorder rec(9, "ADC properties", o);
  bool ok = true;
  std::string detail;
  for (int n_max : {128, 32}) {
    for (int bits = 1; bits <= 8; ++bits) {
      NeuronConfig cfg;
      cfg.out_bits = bits;
      cfg.n_max = n_max;
      cfg.q_step = 0.01;
      const int cap = std::min((1 << (bits - 1)) - 1, n_max - 1);
      const double span = 1.5 * (cap + 1) * cfg.q_step;
      int prev = adc_convert(-span, cfg);
      bool mono = true;
      for (int i = 1; i < 10000; ++i) {
        const int code = adc_convert(-span + 2 * span * i / 9999.0, cfg);
        mono = mono && code >= prev;
        prev = code;
      }
      const bool good = mono && adc_convert(0.0, cfg) == 0 && adc_convert(span, cfg) == cap &&
                        adc_convert(-span, cfg) == -cap;
      ok = ok && good;
      if (!good) detail += fmt("fail b=%.0f n_max=%.0f; ", bits, n_max);
      if (n_max == 128) rec.metric("cap_b" + std::to_string(bits), adc_convert(span, cfg), "code");
    }
  }
  return rec.done(ok, ok ? "monotone over 10^4 charges, code(0)=0, saturation at min(2^(b-1)-1, N_max-1)" : detail);
}

Result scaling_invariance(const Options& o) {
  Recorder rec(10, "conductance-scaling invariance", o);
  std::mt19937_64 rng(o.seed ^ 0xCA);
  std::size_t compared = 0, differing = 0;
  for (int t = 0; t < 5; ++t) {
    const std::size_t pairs = 10 + rng() % 100, cols = 4 + rng() % 60;
    const auto m = random_conductances(2 * pairs, cols, rng);
    NeuronConfig cfg;
    cfg.q_step = 0.002 * (1 + t);
    for (double k : {0.5, 2.0}) {
      CoreState base, scaled;
      base.write_region_exact(0, 0, m.rows, m.cols, m.targets);
      std::vector<bool> pick(cols);
      for (auto&& p : pick) p = rng() % 2;
      for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) scaled.set_conductance(r, c, m.at(r, c) * (pick[c] ? k : 1.0));
      }
      Engine e(0);
      for (int n = 0; n < 20; ++n) {
        const auto x = random_codes(pairs, cfg.input_cap(), rng);
        const auto a = mvm(base, forward_request(x, cols), cfg, {}, e).codes;
        const auto b = mvm(scaled, forward_request(x, cols), cfg, {}, e).codes;
        for (std::size_t c = 0; c < cols; ++c) {
          ++compared;
          differing += a[c] != b[c];
        }
      }
    }
  }
  rec.metric("codes_compared", static_cast<double>(compared), "count");
  rec.metric("codes_changed", static_cast<double>(differing), "count");
  return rec.done(differing == 0, fmt("%.0f codes under k in {0.5, 2}, %.0f changed", compared, differing));
}

Result energy_estimator(const Options& o) {
  Recorder rec(11, "energy estimator", o);
  const EnergyConfig cfg;
  const double zero = estimate_energy(OpTrace{}, cfg).total();
  std::mt19937_64 rng(o.seed ^ 0xCB);
  mapper::LayerSpec spec;
  spec.in = 60;
  spec.out = 32;
  spec.weights.resize(60 * 32);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& w : spec.weights) w = u(rng);
  std::vector<DigitalVector> batch;
  for (int b = 0; b < 8; ++b) batch.push_back({random_codes(60, 7, rng), 4});
  bool increasing = true;
  double prev = 0.0;
  std::string detail;
  for (int bits = 3; bits <= 8; ++bits) {
    ChipLayer layer;
    layer.matrix = mapper::conv_to_matrix(spec, 1.0, 40.0);
    layer.neuron.q_step = 0.32 / (1 << bits);  // same full-scale range at every precision
    layer.neuron.out_bits = bits;
    mapper::LayerSegments seg{0, {layer.matrix.rows, layer.matrix.cols}, 1.0, mapper::split_matrix(layer.matrix)};
    mapper::PlaceHints h;
    h.auto_duplicate = false;
    Chip chip(o.seed);
    program_chip(chip, mapper::place({seg}, kChipCores, h), {{0, layer}});
    const double adc = estimate_energy(execute_layer(chip, 0, batch).trace, cfg).adc;
    increasing = increasing && adc > prev;
    prev = adc;
    rec.metric("adc_j_b" + std::to_string(bits), adc, "J");
    detail += fmt("%.3g ", adc);
  }
  rec.metric("zero_trace_j", zero, "J");
  return rec.done(zero == 0.0 && increasing, fmt("zero trace %.3g J; ADC J for 3..8 bits: ", zero) + detail);
}

std::vector<Result> selftest(const Options& o) {
  Options q = o;
  q.quick = true;
  return {oracle_equivalence(q),       bit_serial_structure(q), write_verify_yield(q),
          iterative_reprogramming(q),   placement_transparency(q), noise_resilient_training(q),
          chip_in_the_loop(q),          rbm_recovery(q),         adc_properties(q),
          scaling_invariance(q),        energy_estimator(q)};
}

}  // namespace checks
