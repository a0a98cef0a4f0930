#include "cimsim/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "cimsim/error.hpp"

namespace cimsim::io {

using nlohmann::json;

namespace {

constexpr const char* kMlpFormat = "cimsim-mlp/1";
constexpr const char* kRbmFormat = "cimsim-rbm/1";
constexpr const char* kChipFormat = "cimsim-chip/1";

// Reads named members of one JSON object and remembers which were seen, so
// finish() can reject the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorKind::schema, where_ + ": expected an object");
  }

  template <class T>
  void opt(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::schema, where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  T req(const char* key) {
    if (!j_.contains(key)) fail(ErrorKind::schema, where_ + ": missing key '" + std::string(key) + "'");
    T out{};
    opt(key, out);
    return out;
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& need(const char* key) {
    const json* c = child(key);
    if (!c) fail(ErrorKind::schema, where_ + ": missing key '" + std::string(key) + "'");
    return *c;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(ErrorKind::schema, where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void check_format(const json& j, const char* format) {
  if (!j.is_object() || !j.contains("format") || j["format"] != format) {
    fail(ErrorKind::schema, std::string("expected format ") + format);
  }
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(path, mode);
  if (!f) fail(ErrorKind::io, "cannot write " + path);
  return f;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream f(path, mode);
  if (!f) fail(ErrorKind::io, "cannot read " + path);
  return f;
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) fail(ErrorKind::schema, where + ": expected a non-empty matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != j[0].size()) fail(ErrorKind::schema, where + ": ragged matrix");
    for (std::size_t c = 0; c < j[r].size(); ++c) {
      if (!j[r][c].is_number()) fail(ErrorKind::schema, where + ": non-numeric entry");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.begin(), v.end()); }

Eigen::VectorXd vector_from(const json& j, const std::string& where) {
  if (!j.is_array()) fail(ErrorKind::schema, where + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) fail(ErrorKind::schema, where + ": non-numeric entry");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

template <class T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <class T>
T read_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(ErrorKind::schema, "binary block too short");
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  pos += sizeof(T);
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::stochastic: return "stochastic";
  }
  return "identity";
}

Activation activation_from(const std::string& s) {
  for (auto a : {Activation::identity, Activation::relu, Activation::sigmoid, Activation::tanh,
                 Activation::stochastic}) {
    if (activation_name(a) == s) return a;
  }
  fail(ErrorKind::schema, "unknown activation '" + s + "'");
}

std::string op_name(OpKind k) {
  switch (k) {
    case OpKind::dense: return "dense";
    case OpKind::conv: return "conv";
    case OpKind::relu: return "relu";
    case OpKind::maxpool: return "maxpool";
    case OpKind::flatten: return "flatten";
  }
  return "dense";
}

OpKind op_from(const std::string& s) {
  for (auto k : {OpKind::dense, OpKind::conv, OpKind::relu, OpKind::maxpool, OpKind::flatten}) {
    if (op_name(k) == s) return k;
  }
  fail(ErrorKind::schema, "unknown op '" + s + "'");
}

json to_json(const device::ProgramParams& p) {
  return {{"v_set_init", p.v_set_init},       {"v_reset_init", p.v_reset_init},
          {"v_increment", p.v_increment},     {"pulse_width", p.pulse_width},
          {"acceptance", p.acceptance},       {"reversal_timeout", p.reversal_timeout},
          {"g_min", p.g_min},                 {"g_max", p.g_max},
          {"g_max_hard", p.g_max_hard},       {"max_pulses", p.max_pulses}};
}

device::ProgramParams program_from(const json& j, device::ProgramParams p) {
  Reader r(j, "program");
  r.opt("v_set_init", p.v_set_init);
  r.opt("v_reset_init", p.v_reset_init);
  r.opt("v_increment", p.v_increment);
  r.opt("pulse_width", p.pulse_width);
  r.opt("acceptance", p.acceptance);
  r.opt("reversal_timeout", p.reversal_timeout);
  r.opt("g_min", p.g_min);
  r.opt("g_max", p.g_max);
  r.opt("g_max_hard", p.g_max_hard);
  r.opt("max_pulses", p.max_pulses);
  r.finish();
  p.validate();
  return p;
}

json to_json(const device::DeviceUpdateRule& u) {
  return {{"set_gain", u.set_gain},
          {"set_threshold", u.set_threshold},
          {"reset_gain", u.reset_gain},
          {"reset_threshold", u.reset_threshold},
          {"cycle_noise_sigma", u.cycle_noise_sigma}};
}

device::DeviceUpdateRule rule_from(const json& j, device::DeviceUpdateRule u) {
  Reader r(j, "update_rule");
  r.opt("set_gain", u.set_gain);
  r.opt("set_threshold", u.set_threshold);
  r.opt("reset_gain", u.reset_gain);
  r.opt("reset_threshold", u.reset_threshold);
  r.opt("cycle_noise_sigma", u.cycle_noise_sigma);
  r.finish();
  u.validate();
  return u;
}

json to_json(const device::RelaxationModel& m) {
  return {{"sigma_table", m.sigma_table},
          {"mean_bias", m.mean_bias},
          {"g_floor", m.g_floor},
          {"g_ceiling", m.g_ceiling}};
}

device::RelaxationModel relaxation_from(const json& j, device::RelaxationModel m) {
  Reader r(j, "relaxation");
  r.opt("sigma_table", m.sigma_table);
  r.opt("mean_bias", m.mean_bias);
  r.opt("g_floor", m.g_floor);
  r.opt("g_ceiling", m.g_ceiling);
  r.finish();
  m.validate();
  return m;
}

json to_json(const nn::TrainConfig& c) {
  return {{"noise_fraction", c.noise_fraction}, {"lr", c.lr},
          {"momentum", c.momentum},             {"epochs", c.epochs},
          {"batch", c.batch},                   {"weight_decay", c.weight_decay},
          {"alpha_decay", c.alpha_decay},       {"seed", c.seed}};
}

nn::TrainConfig train_from(const json& j, nn::TrainConfig c) {
  Reader r(j, "train");
  r.opt("noise_fraction", c.noise_fraction);
  r.opt("lr", c.lr);
  r.opt("momentum", c.momentum);
  r.opt("epochs", c.epochs);
  r.opt("batch", c.batch);
  r.opt("weight_decay", c.weight_decay);
  r.opt("alpha_decay", c.alpha_decay);
  r.opt("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

json to_json(const coopt::CalibrationOptions& o) {
  return {{"v_read_grid", o.v_read_grid},       {"nominal_v_read", o.nominal_v_read},
          {"q_grid_points", o.q_grid_points},   {"q_grid_decades", o.q_grid_decades},
          {"percentile", o.percentile},         {"offset_repeats", o.offset_repeats},
          {"max_samples", o.max_samples}};
}

coopt::CalibrationOptions calibration_options_from(const json& j, coopt::CalibrationOptions o) {
  Reader r(j, "calibration");
  r.opt("v_read_grid", o.v_read_grid);
  r.opt("nominal_v_read", o.nominal_v_read);
  r.opt("q_grid_points", o.q_grid_points);
  r.opt("q_grid_decades", o.q_grid_decades);
  r.opt("percentile", o.percentile);
  r.opt("offset_repeats", o.offset_repeats);
  r.opt("max_samples", o.max_samples);
  r.finish();
  o.validate();
  return o;
}

json to_json(const rbm::CdConfig& c) {
  return {{"epochs", c.epochs},   {"lr", c.lr},       {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},           {"batch", c.batch},
          {"noise_fraction", c.noise_fraction},       {"seed", c.seed}};
}

rbm::CdConfig cd_from(const json& j, rbm::CdConfig c) {
  Reader r(j, "rbm.cd");
  r.opt("epochs", c.epochs);
  r.opt("lr", c.lr);
  r.opt("momentum", c.momentum);
  r.opt("weight_decay", c.weight_decay);
  r.opt("batch", c.batch);
  r.opt("noise_fraction", c.noise_fraction);
  r.opt("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

json to_json(const mapper::ConductanceMatrix& m) {
  return {{"rows", m.rows},           {"cols", m.cols},   {"w_max", m.w_max},
          {"bias_rows", m.bias_rows}, {"g_min", m.g_min}, {"g_max", m.g_max},
          {"targets", m.targets}};
}

mapper::ConductanceMatrix matrix_from_json(const json& j) {
  Reader r(j, "matrix");
  mapper::ConductanceMatrix m;
  m.rows = r.req<std::size_t>("rows");
  m.cols = r.req<std::size_t>("cols");
  m.w_max = r.req<double>("w_max");
  m.bias_rows = r.req<std::size_t>("bias_rows");
  m.g_min = r.req<double>("g_min");
  m.g_max = r.req<double>("g_max");
  m.targets = r.req<std::vector<double>>("targets");
  r.finish();
  if (m.targets.size() != m.rows * m.cols) fail(ErrorKind::schema, "matrix: targets size != rows*cols");
  return m;
}

}  // namespace

// --- tensors -----------------------------------------------------------------

void save_tensor(const std::string& path, const Eigen::MatrixXd& t) {
  auto f = open_out(path, std::ios::binary);
  const json header = {{"dtype", "f32"},
                       {"endianness", "little"},
                       {"shape", {t.rows(), t.cols()}}};
  f << header.dump() << '\n';
  std::vector<std::uint8_t> buf;
  buf.reserve(static_cast<std::size_t>(t.size()) * 4);
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) append_le(buf, static_cast<float>(t(r, c)));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) fail(ErrorKind::io, "write failed: " + path);
}

Eigen::MatrixXd load_tensor(const std::string& path) {
  auto f = open_in(path, std::ios::binary);
  std::string line;
  if (!std::getline(f, line)) fail(ErrorKind::schema, path + ": missing tensor header");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, path + ": bad tensor header: " + e.what());
  }
  Reader r(h, "tensor header");
  const auto dtype = r.req<std::string>("dtype");
  const auto endian = r.req<std::string>("endianness");
  const auto shape = r.req<std::vector<std::size_t>>("shape");
  r.finish();
  if (dtype != "f32" || endian != "little") fail(ErrorKind::schema, path + ": only little-endian f32 tensors");
  if (shape.size() != 2) fail(ErrorKind::schema, path + ": tensors are two-dimensional");
  const std::size_t n = shape[0] * shape[1];
  std::vector<std::uint8_t> buf(n * 4);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(f.gcount()) != buf.size()) fail(ErrorKind::schema, path + ": truncated tensor data");
  if (f.peek() != std::char_traits<char>::eof()) fail(ErrorKind::schema, path + ": trailing bytes after tensor data");
  Eigen::MatrixXd t(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
  std::size_t pos = 0;
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) t(i, c) = read_le<float>(buf, pos);
  }
  return t;
}

// --- JSON documents ----------------------------------------------------------

json read_json(const std::string& path) {
  auto f = open_in(path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  auto f = open_out(path);
  f << j.dump(2) << '\n';
  if (!f) fail(ErrorKind::io, "write failed: " + path);
}

json to_json(const nn::Mlp& m) {
  json layers = json::array();
  for (const auto& d : m.layers) {
    layers.push_back({{"w", matrix_json(d.w)}, {"b", vector_json(d.b)}, {"alpha", d.alpha}});
  }
  return {{"format", kMlpFormat}, {"in_bits", m.in_bits}, {"layers", layers}};
}

nn::Mlp mlp_from_json(const json& j) {
  check_format(j, kMlpFormat);
  Reader r(j, "model");
  r.req<std::string>("format");
  nn::Mlp m;
  m.in_bits = r.req<int>("in_bits");
  const json& layers = r.need("layers");
  r.finish();
  if (!layers.is_array()) fail(ErrorKind::schema, "model.layers: expected an array");
  for (const auto& l : layers) {
    Reader lr(l, "model.layers[]");
    nn::Dense d;
    d.w = matrix_from(lr.need("w"), "w");
    d.b = vector_from(lr.need("b"), "b");
    d.alpha = lr.req<double>("alpha");
    lr.finish();
    m.layers.push_back(std::move(d));
  }
  try {
    m.validate();
  } catch (const Error& e) {
    fail(ErrorKind::schema, std::string("model: ") + e.what());
  }
  return m;
}

json to_json(const rbm::RbmModel& m) {
  return {{"format", kRbmFormat}, {"w", matrix_json(m.w)}, {"a", vector_json(m.a)}, {"b", vector_json(m.b)}};
}

rbm::RbmModel rbm_from_json(const json& j) {
  check_format(j, kRbmFormat);
  Reader r(j, "rbm");
  r.req<std::string>("format");
  rbm::RbmModel m;
  m.w = matrix_from(r.need("w"), "w");
  m.a = vector_from(r.need("a"), "a");
  m.b = vector_from(r.need("b"), "b");
  r.finish();
  m.validate();
  return m;
}

json to_json(const NeuronConfig& c) {
  json bps = json::array();
  for (const auto& b : c.sigmoid_breakpoints) bps.push_back({b.counter, b.step});
  return {{"v_read", c.v_read},
          {"q_step", c.q_step},
          {"charge_scale", c.charge_scale},
          {"n_max", c.n_max},
          {"out_bits", c.out_bits},
          {"in_bits", c.in_bits},
          {"activation", activation_name(c.activation)},
          {"sigmoid_breakpoints", bps},
          {"stochastic_range", c.stochastic_range},
          {"dither", c.dither == Dither::logistic ? "logistic" : "uniform"}};
}

NeuronConfig neuron_from_json(const json& j, NeuronConfig c) {
  Reader r(j, "neuron");
  r.opt("v_read", c.v_read);
  r.opt("q_step", c.q_step);
  r.opt("charge_scale", c.charge_scale);
  r.opt("n_max", c.n_max);
  r.opt("out_bits", c.out_bits);
  r.opt("in_bits", c.in_bits);
  std::string act = activation_name(c.activation);
  r.opt("activation", act);
  c.activation = activation_from(act);
  std::vector<std::pair<int, int>> bps;
  for (const auto& b : c.sigmoid_breakpoints) bps.emplace_back(b.counter, b.step);
  r.opt("sigmoid_breakpoints", bps);
  c.sigmoid_breakpoints.clear();
  for (const auto& [counter, step] : bps) c.sigmoid_breakpoints.push_back({counter, step});
  r.opt("stochastic_range", c.stochastic_range);
  std::string dither = c.dither == Dither::logistic ? "logistic" : "uniform";
  r.opt("dither", dither);
  if (dither != "logistic" && dither != "uniform") fail(ErrorKind::schema, "neuron.dither: unknown shape '" + dither + "'");
  c.dither = dither == "logistic" ? Dither::logistic : Dither::uniform;
  r.finish();
  c.validate();
  return c;
}

json to_json(const NonIdealityConfig& c) {
  return {{"relaxation", c.relaxation},       {"write_verify", c.write_verify},
          {"ir_drop_driver", c.ir_drop_driver}, {"r_driver", c.r_driver},
          {"ir_drop_wire", c.ir_drop_wire},   {"r_wire", c.r_wire},
          {"coupling_sigma", c.coupling_sigma}, {"adc_offset_sigma", c.adc_offset_sigma}};
}

NonIdealityConfig nonideal_from_json(const json& j, NonIdealityConfig c) {
  Reader r(j, "nonideal");
  r.opt("relaxation", c.relaxation);
  r.opt("write_verify", c.write_verify);
  r.opt("ir_drop_driver", c.ir_drop_driver);
  r.opt("r_driver", c.r_driver);
  r.opt("ir_drop_wire", c.ir_drop_wire);
  r.opt("r_wire", c.r_wire);
  r.opt("coupling_sigma", c.coupling_sigma);
  r.opt("adc_offset_sigma", c.adc_offset_sigma);
  r.finish();
  c.validate();
  return c;
}

json to_json(const EnergyConfig& c) {
  return {{"c_par", c.c_par},           {"c_wl", c.c_wl},
          {"v_wl", c.v_wl},             {"v_dd", c.v_dd},
          {"e_adc_step", c.e_adc_step}, {"e_neuron_static", c.e_neuron_static},
          {"ns_per_event", c.ns_per_event}};
}

EnergyConfig energy_from_json(const json& j, EnergyConfig c) {
  Reader r(j, "energy");
  r.opt("c_par", c.c_par);
  r.opt("c_wl", c.c_wl);
  r.opt("v_wl", c.v_wl);
  r.opt("v_dd", c.v_dd);
  r.opt("e_adc_step", c.e_adc_step);
  r.opt("e_neuron_static", c.e_neuron_static);
  r.opt("ns_per_event", c.ns_per_event);
  r.finish();
  c.validate();
  return c;
}

json to_json(const OpTrace& t) {
  return {{"mvms", t.mvms},
          {"wl_toggles", t.wl_toggles},
          {"input_pulses", t.input_pulses},
          {"sample_cycles", t.sample_cycles},
          {"settle_events", t.settle_events},
          {"adc_steps", t.adc_steps},
          {"conversions", t.conversions},
          {"macs", t.macs},
          {"mac_var_weighted", t.mac_var_weighted},
          {"latency_units", t.latency_units}};
}

OpTrace trace_from_json(const json& j) {
  Reader r(j, "trace");
  OpTrace t;
  r.opt("mvms", t.mvms);
  r.opt("wl_toggles", t.wl_toggles);
  r.opt("input_pulses", t.input_pulses);
  r.opt("sample_cycles", t.sample_cycles);
  r.opt("settle_events", t.settle_events);
  r.opt("adc_steps", t.adc_steps);
  r.opt("conversions", t.conversions);
  r.opt("macs", t.macs);
  r.opt("mac_var_weighted", t.mac_var_weighted);
  r.opt("latency_units", t.latency_units);
  r.finish();
  return t;
}

json to_json(const EnergyReport& e) {
  return {{"mac_j", e.mac},
          {"wordline_j", e.wordline},
          {"adc_j", e.adc},
          {"neuron_static_j", e.neuron_static},
          {"total_j", e.total()}};
}

json to_json(const Network& n) {
  json ops = json::array();
  for (const auto& op : n.ops) {
    json o = {{"kind", op_name(op.kind)},
              {"layer", op.layer},
              {"input_scale", op.input_scale},
              {"output_gain", op.output_gain}};
    if (op.kind == OpKind::conv || op.kind == OpKind::maxpool) {
      o["conv"] = {{"in_h", op.conv.in_h},     {"in_w", op.conv.in_w}, {"in_c", op.conv.in_c},
                   {"k_h", op.conv.k_h},       {"k_w", op.conv.k_w},   {"stride", op.conv.stride},
                   {"pad", op.conv.pad}};
      o["pool"] = op.pool;
    }
    ops.push_back(std::move(o));
  }
  return {{"ops", ops}};
}

Network network_from_json(const json& j) {
  Reader r(j, "network");
  const json& ops = r.need("ops");
  r.finish();
  Network n;
  for (const auto& o : ops) {
    Reader orr(o, "network.ops[]");
    NetworkOp op;
    op.kind = op_from(orr.req<std::string>("kind"));
    orr.opt("layer", op.layer);
    orr.opt("input_scale", op.input_scale);
    orr.opt("output_gain", op.output_gain);
    orr.opt("pool", op.pool);
    if (const json* c = orr.child("conv")) {
      Reader cr(*c, "network.ops[].conv");
      cr.opt("in_h", op.conv.in_h);
      cr.opt("in_w", op.conv.in_w);
      cr.opt("in_c", op.conv.in_c);
      cr.opt("k_h", op.conv.k_h);
      cr.opt("k_w", op.conv.k_w);
      cr.opt("stride", op.conv.stride);
      cr.opt("pad", op.conv.pad);
      cr.finish();
    }
    orr.finish();
    n.ops.push_back(op);
  }
  return n;
}

json to_json(const std::vector<coopt::Calibration>& cals) {
  json out = json::array();
  for (const auto& c : cals) {
    json trims = json::array();
    for (const auto& t : c.offsets) trims.push_back({{"core", t.core}, {"neuron", t.neuron}, {"trim", t.trim}});
    out.push_back({{"layer", c.layer},
                   {"v_read_scale", c.v_read_scale},
                   {"v_read", c.v_read},
                   {"q_step", c.q_step},
                   {"output_gain", c.output_gain},
                   {"offsets", trims}});
  }
  return {{"format", "cimsim-calibration/1"}, {"layers", out}};
}

std::vector<coopt::Calibration> calibration_from_json(const json& j) {
  check_format(j, "cimsim-calibration/1");
  Reader r(j, "calibration");
  r.req<std::string>("format");
  const json& layers = r.need("layers");
  r.finish();
  std::vector<coopt::Calibration> out;
  for (const auto& l : layers) {
    Reader lr(l, "calibration.layers[]");
    coopt::Calibration c;
    c.layer = lr.req<int>("layer");
    c.v_read_scale = lr.req<double>("v_read_scale");
    c.v_read = lr.req<double>("v_read");
    c.q_step = lr.req<double>("q_step");
    c.output_gain = lr.req<double>("output_gain");
    for (const auto& t : lr.need("offsets")) {
      Reader tr(t, "calibration.layers[].offsets[]");
      c.offsets.push_back({tr.req<int>("core"), tr.req<int>("neuron"), tr.req<double>("trim")});
      tr.finish();
    }
    lr.finish();
    out.push_back(std::move(c));
  }
  return out;
}

NonIdealityConfig parse_nonideal(const std::string& text, NonIdealityConfig base) {
  if (text == "none") return NonIdealityConfig::ideal();
  if (text == "all") return NonIdealityConfig::all();
  const NonIdealityConfig all = NonIdealityConfig::all();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "relaxation") base.relaxation = true;
    else if (item == "write_verify") base.write_verify = true;
    else if (item == "ir_drop_driver") base.ir_drop_driver = true;
    else if (item == "ir_drop_wire") base.ir_drop_wire = true;
    else if (item == "coupling") base.coupling_sigma = base.coupling_sigma > 0 ? base.coupling_sigma : all.coupling_sigma;
    else if (item == "adc_offset") base.adc_offset_sigma = base.adc_offset_sigma > 0 ? base.adc_offset_sigma : all.adc_offset_sigma;
    else fail(ErrorKind::invalid_argument, "unknown non-ideality '" + item + "'");
  }
  return base;
}

// --- chip state --------------------------------------------------------------

void save_chip(const std::string& path, const Chip& chip, const Network& net) {
  json layers = json::array();
  for (const auto& [id, l] : chip.layers()) {
    layers.push_back({{"id", id}, {"matrix", to_json(l.matrix)}, {"neuron", to_json(l.neuron)}, {"programmed", l.programmed}});
  }
  std::set<int> used;
  for (const auto& a : chip.plan().assignments) used.insert(a.core);
  json cores = json::array();
  for (int id : used) {
    const CoreState& core = chip.core(id);
    std::vector<std::uint8_t> cells;
    cells.reserve(kCoreSize * kCoreSize * 17);
    for (std::size_t r = 0; r < kCoreSize; ++r) {
      for (std::size_t c = 0; c < kCoreSize; ++c) {
        const auto& cell = core.cell(r, c);
        append_le(cells, cell.conductance);
        append_le(cells, static_cast<std::int32_t>(cell.polarity_reversals));
        append_le(cells, static_cast<std::int32_t>(cell.pulses_applied));
        cells.push_back(cell.pending_relaxation ? 1 : 0);
      }
    }
    std::vector<std::uint16_t> lfsr;
    for (const auto& p : const_cast<CoreState&>(core).lfsr_states()) {
      lfsr.push_back(p.forward_state);
      lfsr.push_back(p.backward_state);
    }
    const auto& trim = chip.offset_trim(id);
    const auto& offs = core.neuron_offsets();
    cores.push_back({{"id", id},
                     {"powered", chip.powered(id)},
                     {"cells", json::binary(std::move(cells))},
                     {"trim", std::vector<double>(trim.begin(), trim.end())},
                     {"offsets", std::vector<double>(offs.begin(), offs.end())},
                     {"lfsr", lfsr}});
  }
  json plan;
  mapper::to_json(plan, chip.plan());
  const json doc = {{"format", kChipFormat},
                    {"seed", chip.seed()},
                    {"nonideal", to_json(chip.nonideal())},
                    {"program", to_json(chip.program_params)},
                    {"update_rule", to_json(chip.update_rule)},
                    {"relaxation", to_json(chip.relaxation)},
                    {"program_iterations", chip.program_iterations},
                    {"invocations", chip.invocations()},
                    {"program_calls", chip.program_calls()},
                    {"plan", plan},
                    {"layers", layers},
                    {"network", to_json(net)},
                    {"cores", cores}};
  const auto bytes = json::to_cbor(doc);
  auto f = open_out(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::io, "write failed: " + path);
}

ChipBundle load_chip(const std::string& path) {
  auto f = open_in(path, std::ios::binary);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  json doc;
  try {
    doc = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, path + ": not a chip state file: " + e.what());
  }
  check_format(doc, kChipFormat);
  Reader r(doc, "chip");
  r.req<std::string>("format");
  ChipBundle b;
  b.chip = std::make_unique<Chip>(r.req<std::uint64_t>("seed"), nonideal_from_json(r.need("nonideal")));
  Chip& chip = *b.chip;
  chip.program_params = program_from(r.need("program"), {});
  chip.update_rule = rule_from(r.need("update_rule"), {});
  chip.relaxation = relaxation_from(r.need("relaxation"), {});
  chip.program_iterations = r.req<int>("program_iterations");
  const auto invocations = r.req<std::uint64_t>("invocations");
  const auto program_calls = r.req<std::uint64_t>("program_calls");
  mapper::PlacementPlan plan;
  try {
    mapper::from_json(r.need("plan"), plan);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, std::string("chip.plan: ") + e.what());
  }
  std::map<int, ChipLayer> layers;
  for (const auto& l : r.need("layers")) {
    Reader lr(l, "chip.layers[]");
    const int id = lr.req<int>("id");
    ChipLayer cl;
    cl.matrix = matrix_from_json(lr.need("matrix"));
    cl.neuron = neuron_from_json(lr.need("neuron"));
    cl.programmed = lr.req<bool>("programmed");
    lr.finish();
    layers[id] = std::move(cl);
  }
  b.net = network_from_json(r.need("network"));
  for (const auto& c : r.need("cores")) {
    Reader cr(c, "chip.cores[]");
    const int id = cr.req<int>("id");
    chip.set_powered(id, cr.req<bool>("powered"));
    const json& cells_j = cr.need("cells");
    if (!cells_j.is_binary()) fail(ErrorKind::schema, "chip.cores[].cells: expected a binary block");
    const auto& cells = cells_j.get_binary();
    CoreState& core = chip.core(id);
    std::size_t pos = 0;
    for (std::size_t row = 0; row < kCoreSize; ++row) {
      for (std::size_t col = 0; col < kCoreSize; ++col) {
        device::CellState s;
        s.conductance = read_le<double>(cells, pos);
        s.polarity_reversals = read_le<std::int32_t>(cells, pos);
        s.pulses_applied = read_le<std::int32_t>(cells, pos);
        s.pending_relaxation = read_le<std::uint8_t>(cells, pos) != 0;
        core.set_cell(row, col, s);
      }
    }
    if (pos != cells.size()) fail(ErrorKind::schema, "chip.cores[].cells: wrong size");
    const auto trim = cr.req<std::vector<double>>("trim");
    const auto offs = cr.req<std::vector<double>>("offsets");
    const auto lfsr = cr.req<std::vector<std::uint16_t>>("lfsr");
    cr.finish();
    if (trim.size() != kCoreSize || offs.size() != kCoreSize || lfsr.size() != 2 * kCoreSize) {
      fail(ErrorKind::schema, "chip.cores[]: per-neuron arrays must hold 256 entries");
    }
    std::copy(trim.begin(), trim.end(), chip.offset_trim(id).begin());
    std::copy(offs.begin(), offs.end(), core.neuron_offsets().begin());
    auto regs = core.lfsr_states();
    for (std::size_t n = 0; n < kCoreSize; ++n) {
      regs[n].forward_state = lfsr[2 * n];
      regs[n].backward_state = lfsr[2 * n + 1];
    }
  }
  r.finish();
  chip.restore(std::move(plan), std::move(layers), invocations, program_calls);
  return b;
}

// --- run configuration -------------------------------------------------------

void RunConfig::configure(Chip& chip) const {
  chip.program_params = program;
  chip.update_rule = update_rule;
  chip.relaxation = relaxation;
  chip.program_iterations = program_iterations;
}

void RunConfig::validate() const {
  nonideal.validate();
  program.validate();
  update_rule.validate();
  relaxation.validate();
  neuron.validate();
  energy.validate();
  train.validate();
  calibration.validate();
  rbm.cd.validate();
  if (program_iterations < 0) fail(ErrorKind::invalid_argument, "program_iterations must be >= 0");
  if (sizes.size() < 2) fail(ErrorKind::invalid_argument, "sizes needs an input and an output width");
  if (in_bits < 2 || in_bits > 8) fail(ErrorKind::bit_width, "in_bits must be in 2..8");
  if (!(finetune_lr_divisor > 0) || finetune_epochs < 0) fail(ErrorKind::invalid_argument, "invalid fine-tuning settings");
  if (rbm.hidden == 0 || rbm.interleave == 0 || rbm.cycles < 0 || rbm.flip_fraction < 0 ||
      rbm.flip_fraction > 1 || !(rbm.g_max > 0)) {
    fail(ErrorKind::invalid_argument, "invalid RBM settings");
  }
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"nonideal", to_json(c.nonideal)},
          {"program", to_json(c.program)},
          {"update_rule", to_json(c.update_rule)},
          {"relaxation", to_json(c.relaxation)},
          {"program_iterations", c.program_iterations},
          {"neuron", to_json(c.neuron)},
          {"energy", to_json(c.energy)},
          {"data", {{"digits", c.digits_path}, {"split_seed", c.split_seed}}},
          {"model", {{"sizes", c.sizes}, {"in_bits", c.in_bits}}},
          {"train", to_json(c.train)},
          {"calibration", to_json(c.calibration)},
          {"finetune", {{"lr_divisor", c.finetune_lr_divisor}, {"epochs", c.finetune_epochs}}},
          {"rbm",
           {{"hidden", c.rbm.hidden},
            {"interleave", c.rbm.interleave},
            {"cycles", c.rbm.cycles},
            {"flip_fraction", c.rbm.flip_fraction},
            {"images", c.rbm.images},
            {"g_max", c.rbm.g_max},
            {"cd", to_json(c.rbm.cd)}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "config");
  r.opt("seed", c.seed);
  if (const json* x = r.child("nonideal")) c.nonideal = nonideal_from_json(*x, c.nonideal);
  if (const json* x = r.child("program")) c.program = program_from(*x, c.program);
  if (const json* x = r.child("update_rule")) c.update_rule = rule_from(*x, c.update_rule);
  if (const json* x = r.child("relaxation")) c.relaxation = relaxation_from(*x, c.relaxation);
  r.opt("program_iterations", c.program_iterations);
  if (const json* x = r.child("neuron")) c.neuron = neuron_from_json(*x, c.neuron);
  if (const json* x = r.child("energy")) c.energy = energy_from_json(*x, c.energy);
  if (const json* x = r.child("data")) {
    Reader d(*x, "config.data");
    d.opt("digits", c.digits_path);
    d.opt("split_seed", c.split_seed);
    d.finish();
  }
  if (const json* x = r.child("model")) {
    Reader m(*x, "config.model");
    m.opt("sizes", c.sizes);
    m.opt("in_bits", c.in_bits);
    m.finish();
  }
  if (const json* x = r.child("train")) c.train = train_from(*x, c.train);
  if (const json* x = r.child("calibration")) c.calibration = calibration_options_from(*x, c.calibration);
  if (const json* x = r.child("finetune")) {
    Reader f(*x, "config.finetune");
    f.opt("lr_divisor", c.finetune_lr_divisor);
    f.opt("epochs", c.finetune_epochs);
    f.finish();
  }
  if (const json* x = r.child("rbm")) {
    Reader b(*x, "config.rbm");
    b.opt("hidden", c.rbm.hidden);
    b.opt("interleave", c.rbm.interleave);
    b.opt("cycles", c.rbm.cycles);
    b.opt("flip_fraction", c.rbm.flip_fraction);
    b.opt("images", c.rbm.images);
    b.opt("g_max", c.rbm.g_max);
    if (const json* cd = b.child("cd")) c.rbm.cd = cd_from(*cd, c.rbm.cd);
    b.finish();
  }
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_json(path)); }

// --- metrics -----------------------------------------------------------------

void write_metrics(const std::string& path, const std::vector<Metric>& rows) {
  auto f = open_out(path);
  f << "run_id,metric,value,unit,seed\n";
  for (const auto& m : rows) {
    for (const auto* s : {&m.run_id, &m.metric, &m.unit}) {
      if (s->find_first_of(",\n\"") != std::string::npos) fail(ErrorKind::invalid_argument, "metric fields may not contain ',', '\"' or newlines");
    }
    f << m.run_id << ',' << m.metric << ',' << std::setprecision(17) << m.value << ',' << m.unit
      << ',' << m.seed << '\n';
  }
  if (!f) fail(ErrorKind::io, "write failed: " + path);
}

std::vector<Metric> read_metrics(const std::string& path) {
  auto f = open_in(path);
  std::string line;
  if (!std::getline(f, line) || line != "run_id,metric,value,unit,seed") {
    fail(ErrorKind::schema, path + ": missing metrics header");
  }
  std::vector<Metric> out;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::vector<std::string> cols;
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 5) fail(ErrorKind::schema, path + ": expected 5 columns");
    try {
      out.push_back({cols[0], cols[1], std::stod(cols[2]), cols[3], std::stoull(cols[4])});
    } catch (const std::exception&) {
      fail(ErrorKind::schema, path + ": bad number in '" + line + "'");
    }
  }
  return out;
}

}  // namespace cimsim::io
