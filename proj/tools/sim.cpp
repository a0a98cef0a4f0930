// Command-line front end. Failures print one `error kind=<kind> message=<text>`
// line on stderr and exit with status 2 (usage errors: status 1).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "checks.hpp"
#include "cimsim/coopt.hpp"
#include "cimsim/error.hpp"
#include "cimsim/io.hpp"
#include "cimsim/rbm.hpp"

using namespace cimsim;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string nonideal;
  std::string out;
};

io::RunConfig run_config(const Globals& g) {
  io::RunConfig c = g.config.empty() ? io::RunConfig{} : io::load_run_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.nonideal.empty()) c.nonideal = io::parse_nonideal(g.nonideal, c.nonideal);
  return c;
}

const std::string& need_out(const Globals& g) {
  if (g.out.empty()) fail(ErrorKind::invalid_argument, "--out is required");
  return g.out;
}

nn::Split digits(const io::RunConfig& c) { return nn::load_digits(c.digits_path, c.split_seed); }

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "bad layer size '" + item + "'");
    }
  }
  return out;
}

mapper::PlacementPlan load_plan(const std::string& path) {
  mapper::PlacementPlan p;
  try {
    mapper::from_json(io::read_json(path), p);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, path + ": " + e.what());
  }
  return p;
}

void write_metrics_if(const std::string& path, const std::vector<io::Metric>& rows) {
  if (!path.empty()) io::write_metrics(path, rows);
}

int cmd_selftest(const Globals& g) {
  const auto cfg = run_config(g);
  checks::Options o;
  o.seed = cfg.seed;
  o.run_id = "selftest";
  const auto results = checks::selftest(o);
  std::vector<io::Metric> rows;
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %2d %s: %s\n", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(), r.detail.c_str());
    rows.insert(rows.end(), r.metrics.begin(), r.metrics.end());
    ok = ok && r.pass;
  }
  write_metrics_if(g.out, rows);
  return ok ? 0 : 3;
}

int cmd_train(const Globals& g, std::optional<double> noise, const std::string& sizes,
              const std::string& metrics) {
  auto cfg = run_config(g);
  if (noise) cfg.train.noise_fraction = *noise;
  if (!sizes.empty()) cfg.sizes = parse_sizes(sizes);
  cfg.train.seed = cfg.seed;
  const auto split = digits(cfg);
  auto m = nn::init_mlp(cfg.sizes, cfg.seed, cfg.in_bits);
  const auto hist = nn::train(m, split.train, cfg.train);
  io::write_json(need_out(g), io::to_json(m));
  const double acc = nn::accuracy(m, split.test.data());
  const double noisy = nn::noisy_accuracy(m, split.test.data(), 0.1, 10, cfg.seed);
  std::printf("final loss %.6f, test accuracy %.4f, under 10%% weight noise %.4f\n", hist.loss.back(), acc, noisy);
  write_metrics_if(metrics, {{"train", "test_accuracy", acc, "fraction", cfg.seed},
                             {"train", "noisy_accuracy_0.1", noisy, "fraction", cfg.seed},
                             {"train", "final_loss", hist.loss.back(), "nats", cfg.seed}});
  return 0;
}

int cmd_map(const Globals& g, const std::string& model_path, std::size_t max_rows, bool no_dup) {
  const auto m = io::mlp_from_json(io::read_json(model_path));
  std::vector<mapper::LayerSegments> segs;
  for (std::size_t l = 0; l < m.depth(); ++l) segs.push_back(coopt::segments_for(m, l, 1.0, max_rows));
  mapper::PlaceHints hints;
  hints.auto_duplicate = !no_dup;
  const auto plan = mapper::place(segs, kChipCores, hints);
  nlohmann::json j;
  mapper::to_json(j, plan);
  io::write_json(need_out(g), j);
  std::printf("%zu assignments on %d cores\n", plan.assignments.size(), plan.cores_used());
  return 0;
}

int cmd_validate(const std::string& plan_path) {
  const auto bad = mapper::validate_placement(load_plan(plan_path));
  if (bad.empty()) {
    std::printf("valid\n");
    return 0;
  }
  for (const auto& b : bad) std::printf("violation: %s\n", b.c_str());
  fail(ErrorKind::invalid_placement, std::to_string(bad.size()) + " violation(s) in " + plan_path);
}

int cmd_program(const Globals& g, const std::string& plan_path, const std::string& model_path) {
  const auto cfg = run_config(g);
  const auto m = io::mlp_from_json(io::read_json(model_path));
  const auto plan = load_plan(plan_path);
  Chip chip(cfg.seed, cfg.nonideal);
  cfg.configure(chip);
  std::map<int, ChipLayer> layers;
  for (std::size_t l = 0; l < m.depth(); ++l) layers[static_cast<int>(l)] = coopt::to_chip_layer(m, l, cfg.neuron);
  const auto report = program_chip(chip, plan, layers);
  io::save_chip(need_out(g), chip, coopt::network_for(m));
  std::printf("programmed %zu cells, %zu write-verify failures\n", report.total_cells(), report.total_failures());
  return 0;
}

int cmd_calibrate(const Globals& g, const std::string& chip_path, const std::string& model_path,
                  const std::string& cal_path) {
  const auto cfg = run_config(g);
  const auto m = io::mlp_from_json(io::read_json(model_path));
  auto b = io::load_chip(chip_path);
  const auto cals = coopt::calibrate_network(m, *b.chip, b.net, digits(cfg).train, cfg.calibration);
  io::save_chip(need_out(g), *b.chip, b.net);
  if (!cal_path.empty()) io::write_json(cal_path, io::to_json(cals));
  for (const auto& c : cals) {
    std::printf("layer %d: v_read %.3f V, q_step %.6g V, gain %.4f\n", c.layer, c.v_read, c.q_step, c.output_gain);
  }
  return 0;
}

int cmd_infer(const Globals& g, const std::string& chip_path, const std::string& input_path,
              const std::string& trace_path, const std::string& metrics) {
  const auto cfg = run_config(g);
  auto b = io::load_chip(chip_path);
  // --seed picks the read-noise stream; without it the saved counter continues.
  if (g.seed) {
    Chip& c = *b.chip;
    c.restore(c.plan(), c.layers(), RngStream(*g.seed).derive(0x1F).key(), c.program_calls());
  }
  std::optional<nn::Split> split;
  Eigen::MatrixXd x;
  if (input_path.empty()) {
    split = digits(cfg);
    x = split->test.data().x;
  } else {
    x = io::load_tensor(input_path);
  }
  std::vector<std::vector<double>> in(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) in[static_cast<std::size_t>(r)].assign(x.row(r).begin(), x.row(r).end());
  OpTrace trace;
  const auto out = run_network(*b.chip, b.net, in, &trace);
  Eigen::MatrixXd y(x.rows(), out.empty() ? 0 : static_cast<Eigen::Index>(out[0].size()));
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t c = 0; c < out[r].size(); ++c) y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = out[r][c];
  }
  io::save_tensor(need_out(g), y);
  if (!trace_path.empty()) io::write_json(trace_path, io::to_json(trace));
  std::vector<io::Metric> rows{{"infer", "mvms", static_cast<double>(trace.mvms), "count", cfg.seed}};
  if (split) {
    const double acc = nn::accuracy(y, split->test.data().y);
    std::printf("test accuracy %.4f over %zu images\n", acc, split->test.size());
    rows.push_back({"infer", "test_accuracy", acc, "fraction", cfg.seed});
  } else {
    std::printf("%lld outputs written\n", static_cast<long long>(y.rows()));
  }
  write_metrics_if(metrics, rows);
  return 0;
}

int cmd_finetune(const Globals& g, const std::string& plan_path, const std::string& model_path,
                 const std::string& model_out, const std::string& metrics) {
  const auto cfg = run_config(g);
  const auto m = io::mlp_from_json(io::read_json(model_path));
  const auto plan = load_plan(plan_path);
  const auto split = digits(cfg);
  Chip chip(cfg.seed, cfg.nonideal);
  cfg.configure(chip);
  coopt::FinetuneConfig fc;
  fc.train = cfg.train;
  fc.train.seed = cfg.seed;
  fc.lr_divisor = cfg.finetune_lr_divisor;
  fc.epochs = cfg.finetune_epochs;
  fc.neuron = cfg.neuron;
  fc.calibration = cfg.calibration;
  const auto res = coopt::finetune_chip_in_loop(m, chip, plan, split.train, fc);
  io::save_chip(need_out(g), chip, res.deployment.net);
  if (!model_out.empty()) io::write_json(model_out, io::to_json(res.model));
  std::vector<io::Metric> rows;
  for (const auto& s : res.trace) {
    std::printf("after layer %zu: hybrid training accuracy %.4f\n", s.layer, s.hybrid_accuracy);
    rows.push_back({"finetune", "hybrid_accuracy_l" + std::to_string(s.layer), s.hybrid_accuracy, "fraction", cfg.seed});
  }
  const double acc = coopt::chip_accuracy(chip, res.deployment.net, split.test);
  std::printf("chip test accuracy %.4f\n", acc);
  rows.push_back({"finetune", "test_accuracy", acc, "fraction", cfg.seed});
  write_metrics_if(metrics, rows);
  return 0;
}

int cmd_recover(const Globals& g, const std::string& rbm_path, const std::string& save_rbm,
                const std::string& metrics) {
  const auto cfg = run_config(g);
  const auto split = digits(cfg);
  rbm::RbmModel model;
  if (rbm_path.empty()) {
    rbm::CdConfig cd = cfg.rbm.cd;
    cd.seed = cfg.seed;
    model = rbm::cd1_train_rbm(nn::binarize(split.train.data().x), cfg.rbm.hidden, cd);
  } else {
    model = io::rbm_from_json(io::read_json(rbm_path));
  }
  if (!save_rbm.empty()) io::write_json(save_rbm, io::to_json(model));
  Chip chip(cfg.seed, cfg.nonideal);
  cfg.configure(chip);
  const auto dep = rbm::deploy_rbm(chip, model, cfg.rbm.interleave, 0, cfg.rbm.g_max);
  const Eigen::MatrixXd test = nn::binarize(split.test.data().x);
  const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(cfg.rbm.images, split.test.size()));
  Eigen::MatrixXd recovered(n, test.cols());
  double corrupted = 0.0, residual = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd img = test.row(i).transpose();
    const auto s = cfg.seed + static_cast<std::uint64_t>(i);
    const auto [bad, mask] = rbm::flip_pixels(img, cfg.rbm.flip_fraction, s);
    const auto rec = rbm::gibbs_recover(chip, dep, bad, mask, cfg.rbm.cycles, s);
    recovered.row(i) = rec.transpose();
    corrupted += (bad - img).norm();
    residual += (rec - img).norm();
  }
  io::save_tensor(need_out(g), recovered);
  const double ratio = corrupted > 0 ? residual / corrupted : 0.0;
  std::printf("mean L2 error %.4f -> %.4f over %lld images (ratio %.4f)\n", corrupted / static_cast<double>(n),
              residual / static_cast<double>(n), static_cast<long long>(n), ratio);
  write_metrics_if(metrics, {{"recover", "corruption_l2", corrupted / static_cast<double>(n), "pixels", cfg.seed},
                             {"recover", "recovered_l2", residual / static_cast<double>(n), "pixels", cfg.seed},
                             {"recover", "ratio", ratio, "fraction", cfg.seed}});
  return 0;
}

int cmd_energy(const Globals& g, const std::string& trace_path) {
  const auto cfg = run_config(g);
  const auto trace = io::trace_from_json(io::read_json(trace_path));
  const auto e = estimate_energy(trace, cfg.energy);
  auto j = io::to_json(e);
  j["latency_ns"] = estimate_latency_ns(trace, cfg.energy);
  if (g.out.empty()) {
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    io::write_json(g.out, j);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-core RRAM compute-in-memory chip simulator"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "RunConfig JSON file");
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--nonideal", g.nonideal, "all | none | comma list of non-idealities");
  app.add_option("--out", g.out, "Primary output path");

  std::string model, plan, chip, input, trace, metrics, cal, model_out, rbm_path, save_rbm, sizes;
  std::optional<double> noise;
  std::size_t max_rows = 256;
  bool no_dup = false;

  auto* selftest = app.add_subcommand("selftest", "Run the fast invariant checks");
  auto* train = app.add_subcommand("train", "Train a noise-resilient MLP on the digits");
  train->add_option("--noise", noise, "Training weight-noise fraction");
  train->add_option("--sizes", sizes, "Layer widths, e.g. 64,32,10");
  train->add_option("--metrics", metrics, "Metrics CSV");
  auto* map = app.add_subcommand("map", "Place a model onto the cores");
  map->add_option("--model", model, "Model file (.nnj)")->required();
  map->add_option("--max-rows", max_rows, "Row-band height for splitting");
  map->add_flag("--no-duplicate", no_dup, "Disable automatic duplication");
  auto* validate = app.add_subcommand("validate", "Check a placement plan");
  validate->add_option("plan", plan, "Plan JSON")->required();
  auto* program = app.add_subcommand("program", "Program a model onto a chip");
  program->add_option("--plan", plan)->required();
  program->add_option("--model", model)->required();
  auto* calibrate = app.add_subcommand("calibrate", "Calibrate a programmed chip");
  calibrate->add_option("--chip", chip)->required();
  calibrate->add_option("--model", model)->required();
  calibrate->add_option("--calibration", cal, "Calibration JSON output");
  auto* infer = app.add_subcommand("infer", "Run inference on a chip state");
  infer->add_option("--chip", chip)->required();
  infer->add_option("--input", input, "Input tensor; defaults to the digits test set");
  infer->add_option("--trace", trace, "Operation trace JSON output");
  infer->add_option("--metrics", metrics, "Metrics CSV");
  auto* finetune = app.add_subcommand("finetune", "Chip-in-the-loop fine-tuning");
  finetune->add_option("--plan", plan)->required();
  finetune->add_option("--model", model)->required();
  finetune->add_option("--model-out", model_out, "Fine-tuned model output");
  finetune->add_option("--metrics", metrics, "Metrics CSV");
  auto* recover = app.add_subcommand("recover", "RBM image recovery on the chip");
  recover->add_option("--rbm", rbm_path, "Trained RBM; trained on the digits when absent");
  recover->add_option("--save-rbm", save_rbm, "Write the RBM used");
  recover->add_option("--metrics", metrics, "Metrics CSV");
  auto* energy = app.add_subcommand("energy", "Energy and latency of an operation trace");
  energy->add_option("--trace", trace)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error kind=usage message=" << e.what() << '\n';
    return 1;
  }

  try {
    if (*selftest) return cmd_selftest(g);
    if (*train) return cmd_train(g, noise, sizes, metrics);
    if (*map) return cmd_map(g, model, max_rows, no_dup);
    if (*validate) return cmd_validate(plan);
    if (*program) return cmd_program(g, plan, model);
    if (*calibrate) return cmd_calibrate(g, chip, model, cal);
    if (*infer) return cmd_infer(g, chip, input, trace, metrics);
    if (*finetune) return cmd_finetune(g, plan, model, model_out, metrics);
    if (*recover) return cmd_recover(g, rbm_path, save_rbm, metrics);
    if (*energy) return cmd_energy(g, trace);
  } catch (const Error& e) {
    std::cerr << "error kind=" << to_string(e.kind()) << " message=" << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal message=" << e.what() << '\n';
    return 2;
  }
  return 1;
}
