#pragma once

// File formats. Every JSON object read here rejects keys it does not know
// (ErrorKind::schema); file-system failures raise ErrorKind::io.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cimsim/chip.hpp"
#include "cimsim/coopt.hpp"
#include "cimsim/nn.hpp"
#include "cimsim/rbm.hpp"

namespace cimsim::io {

// --- tensors -----------------------------------------------------------------

/// One UTF-8 JSON header line {"dtype":"f32","endianness":"little","shape":[r,c]}
/// followed by r·c little-endian float32 values, row-major.
void save_tensor(const std::string& path, const Eigen::MatrixXd& t);
Eigen::MatrixXd load_tensor(const std::string& path);

// --- JSON documents ----------------------------------------------------------

nlohmann::json read_json(const std::string& path);
void write_json(const std::string& path, const nlohmann::json& j);

nlohmann::json to_json(const nn::Mlp& m);
nn::Mlp mlp_from_json(const nlohmann::json& j);
nlohmann::json to_json(const rbm::RbmModel& m);
rbm::RbmModel rbm_from_json(const nlohmann::json& j);

nlohmann::json to_json(const NeuronConfig& c);
NeuronConfig neuron_from_json(const nlohmann::json& j, NeuronConfig base = {});
nlohmann::json to_json(const NonIdealityConfig& c);
NonIdealityConfig nonideal_from_json(const nlohmann::json& j, NonIdealityConfig base = {});
nlohmann::json to_json(const EnergyConfig& c);
EnergyConfig energy_from_json(const nlohmann::json& j, EnergyConfig base = {});
nlohmann::json to_json(const OpTrace& t);
OpTrace trace_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EnergyReport& r);
nlohmann::json to_json(const Network& n);
Network network_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<coopt::Calibration>& c);
std::vector<coopt::Calibration> calibration_from_json(const nlohmann::json& j);

/// "all", "none", or a comma list of relaxation, write_verify, ir_drop_driver,
/// ir_drop_wire, coupling, adc_offset. Listed effects are switched on over
/// `base`; "none" returns the ideal configuration.
NonIdealityConfig parse_nonideal(const std::string& text, NonIdealityConfig base = {});

// --- chip state --------------------------------------------------------------

/// A chip together with the network graph that runs on it.
struct ChipBundle {
  std::unique_ptr<Chip> chip;
  Network net;
};

/// CBOR document: seed, non-idealities, device settings, counters, plan,
/// layers, network, and per used core the cells, trims and LFSR registers.
void save_chip(const std::string& path, const Chip& chip, const Network& net);
ChipBundle load_chip(const std::string& path);

// --- run configuration -------------------------------------------------------

struct RbmSettings {
  std::size_t hidden = 16;
  std::size_t interleave = 4;
  int cycles = 10;
  double flip_fraction = 0.2;
  std::size_t images = 100;
  double g_max = 30.0;
  rbm::CdConfig cd;
};

struct RunConfig {
  std::uint64_t seed = 0;
  NonIdealityConfig nonideal;
  device::ProgramParams program;
  device::DeviceUpdateRule update_rule;
  device::RelaxationModel relaxation;
  int program_iterations = 3;
  NeuronConfig neuron;
  EnergyConfig energy;
  std::string digits_path = std::string(CIMSIM_DATA_DIR) + "/digits.csv";
  std::uint64_t split_seed = 0;
  std::vector<std::size_t> sizes{64, 32, 10};
  int in_bits = 4;
  nn::TrainConfig train;
  coopt::CalibrationOptions calibration;
  double finetune_lr_divisor = 100.0;
  int finetune_epochs = 30;
  RbmSettings rbm;

  /// Copies the device and programming settings into a chip.
  void configure(Chip& chip) const;
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// --- metrics -----------------------------------------------------------------

struct Metric {
  std::string run_id;
  std::string metric;
  double value = 0.0;
  std::string unit;
  std::uint64_t seed = 0;
};

/// CSV with the header run_id,metric,value,unit,seed. Values are written with
/// 17 significant digits so equal runs give equal bytes.
void write_metrics(const std::string& path, const std::vector<Metric>& rows);
std::vector<Metric> read_metrics(const std::string& path);

}  // namespace cimsim::io
