#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cimsim/coopt.hpp"
#include "cimsim/error.hpp"
#include "cimsim/io.hpp"

using namespace cimsim;
using nlohmann::json;

namespace {

std::string tmp(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cimsim_io_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("tensor: header line then little-endian f32; float values round trip exactly") {
  Eigen::MatrixXd t(2, 3);
  t << 1.5, -2.25, 0.0, 3e-7, 1e30, -0.125;
  t = t.cast<float>().cast<double>();
  const auto path = tmp("t.bin");
  io::save_tensor(path, t);
  CHECK(io::load_tensor(path) == t);
  const auto bytes = slurp(path);
  const auto nl = bytes.find('\n');
  CHECK(bytes.substr(0, nl) == R"({"dtype":"f32","endianness":"little","shape":[2,3]})");
  CHECK(bytes.size() == nl + 1 + 6 * 4);
  // 1.5f = 0x3FC00000, least significant byte first.
  CHECK(static_cast<unsigned char>(bytes[nl + 1]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[nl + 2]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[nl + 3]) == 0xC0);
  CHECK(static_cast<unsigned char>(bytes[nl + 4]) == 0x3F);

  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  CHECK(kind_of([&] { io::load_tensor(path); }) == ErrorKind::schema);
  CHECK(kind_of([&] { io::load_tensor(tmp("missing.bin")); }) == ErrorKind::io);
}

TEST_CASE("model files: MLP and RBM round trip exactly") {
  auto m = nn::init_mlp({64, 12, 10}, 3);
  m.layers[1].alpha = 1.2345678901234567;
  m.layers[0].b(3) = -1e-17;
  const auto path = tmp("m.nnj");
  io::write_json(path, io::to_json(m));
  const auto back = io::mlp_from_json(io::read_json(path));
  REQUIRE(back.depth() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(back.layers[l].w == m.layers[l].w);
    CHECK(back.layers[l].b == m.layers[l].b);
    CHECK(back.layers[l].alpha == m.layers[l].alpha);
  }
  CHECK(back.in_bits == m.in_bits);

  const auto r = rbm::init_rbm(8, 3, 1, 0.3);
  const auto rb = io::rbm_from_json(io::to_json(r));
  CHECK(rb.w == r.w);
  CHECK(rb.a == r.a);

  auto j = io::to_json(m);
  j["layers"][0]["extra"] = 1;
  CHECK(kind_of([&] { io::mlp_from_json(j); }) == ErrorKind::schema);
  j = io::to_json(m);
  j["format"] = "other";
  CHECK(kind_of([&] { io::mlp_from_json(j); }) == ErrorKind::schema);
}

TEST_CASE("run config: defaults round trip; unknown keys and bad types are rejected") {
  io::RunConfig c;
  c.seed = 9;
  c.nonideal.relaxation = true;
  c.rbm.cd.epochs = 4;
  c.sizes = {64, 20, 10};
  const json j = io::to_json(c);
  CHECK(io::to_json(io::run_config_from_json(j)) == j);
  CHECK(io::run_config_from_json(json::object()).seed == 0);

  for (const char* bad : {R"({"sed": 1})", R"({"nonideal": {"relax": true}})",
                          R"({"rbm": {"cd": {"epoch": 3}}})", R"({"neuron": {"in_bits": "four"}})"}) {
    CAPTURE(bad);
    CHECK(kind_of([&] { io::run_config_from_json(json::parse(bad)); }) == ErrorKind::schema);
  }
  CHECK_THROWS_AS(io::run_config_from_json(json::parse(R"({"neuron": {"out_bits": 9}})")), Error);
}

TEST_CASE("plan, network and calibration documents round trip") {
  const auto m = nn::init_mlp({64, 16, 10}, 0);
  std::vector<mapper::LayerSegments> segs;
  for (std::size_t l = 0; l < m.depth(); ++l) segs.push_back(coopt::segments_for(m, l));
  const auto plan = mapper::place(segs);
  const json pj = plan;
  const auto back = pj.get<mapper::PlacementPlan>();
  CHECK(json(back) == pj);

  const auto net = coopt::network_for(m);
  CHECK(io::to_json(io::network_from_json(io::to_json(net))) == io::to_json(net));

  std::vector<coopt::Calibration> cal(1);
  cal[0].layer = 2;
  cal[0].q_step = 0.0123;
  cal[0].offsets = {{1, 7, -0.002}};
  const auto cj = io::to_json(cal);
  CHECK(io::to_json(io::calibration_from_json(cj)) == cj);
}

TEST_CASE("chip state: a saved chip reloads with identical outputs and counters") {
  const auto split = nn::load_digits();
  auto m = nn::init_mlp({64, 16, 10}, 1);
  nn::TrainConfig tc;
  tc.epochs = 3;
  nn::train(m, split.train, tc);
  std::vector<mapper::LayerSegments> segs;
  for (std::size_t l = 0; l < m.depth(); ++l) segs.push_back(coopt::segments_for(m, l));
  const auto plan = mapper::place(segs);
  NonIdealityConfig ni;
  ni.relaxation = true;
  ni.write_verify = true;
  ni.adc_offset_sigma = 2e-3;
  Chip chip(4, ni);
  chip.program_iterations = 1;
  const auto dep = coopt::deploy(m, chip, plan, split.train, NeuronConfig{});
  const auto path = tmp("chip.cbor");
  io::save_chip(path, chip, dep.net);
  auto b = io::load_chip(path);
  CHECK(b.chip->invocations() == chip.invocations());
  CHECK(b.chip->program_calls() == chip.program_calls());
  CHECK(b.chip->seed() == chip.seed());
  CHECK(io::to_json(b.net) == io::to_json(dep.net));

  const Eigen::MatrixXd x = split.test.data().x.topRows(16);
  CHECK(coopt::chip_forward(*b.chip, b.net, x, b.net.ops.size()) ==
        coopt::chip_forward(chip, dep.net, x, dep.net.ops.size()));
  // Saving the reloaded chip reproduces the file byte for byte.
  const auto path2 = tmp("chip2.cbor");
  auto c = io::load_chip(path);
  io::save_chip(path2, *c.chip, c.net);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("metrics CSV: fixed columns, exact round trip, identical bytes") {
  const std::vector<io::Metric> rows{{"r1", "accuracy", 0.1, "fraction", 7},
                                     {"r1", "energy", 1.2345678901234567e-12, "J", 7}};
  const auto a = tmp("a.csv"), b = tmp("b.csv");
  io::write_metrics(a, rows);
  io::write_metrics(b, rows);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a).rfind("run_id,metric,value,unit,seed\n", 0) == 0);
  const auto back = io::read_metrics(a);
  REQUIRE(back.size() == 2);
  CHECK(back[1].value == rows[1].value);
  CHECK(back[1].unit == "J");
  CHECK(back[0].seed == 7);
  CHECK_THROWS_AS(io::write_metrics(a, {{"a,b", "m", 0, "", 0}}), Error);
}

TEST_CASE("parse_nonideal") {
  CHECK(io::parse_nonideal("none").analog_ideal());
  CHECK(io::parse_nonideal("all").ir_drop_wire);
  const auto c = io::parse_nonideal("relaxation,ir_drop_driver");
  CHECK(c.relaxation);
  CHECK(c.ir_drop_driver);
  CHECK_FALSE(c.write_verify);
  CHECK(kind_of([] { io::parse_nonideal("bogus"); }) == ErrorKind::invalid_argument);
}

}  // TEST_SUITE
