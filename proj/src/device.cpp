#include "cimsim/device.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cimsim/error.hpp"
#include "cimsim/kernels.hpp"

namespace cimsim::device {

void ProgramParams::validate() const {
  if (!(acceptance > 0)) fail(ErrorKind::invalid_argument, "acceptance must be > 0");
  if (reversal_timeout < 1) fail(ErrorKind::invalid_argument, "reversal_timeout must be >= 1");
  if (!(g_min < g_max)) fail(ErrorKind::invalid_argument, "g_min must be < g_max");
  if (g_min < 0) fail(ErrorKind::invalid_argument, "g_min must be >= 0");
  if (g_max_hard < g_max) fail(ErrorKind::invalid_argument, "g_max_hard must be >= g_max");
  if (v_increment < 0) fail(ErrorKind::invalid_argument, "v_increment must be >= 0");
  if (max_pulses < 1) fail(ErrorKind::invalid_argument, "max_pulses must be >= 1");
}

void DeviceUpdateRule::validate() const {
  if (!(set_gain > 0 && reset_gain > 0)) fail(ErrorKind::invalid_argument, "gains must be > 0");
  if (!(set_threshold > 0 && reset_threshold > 0)) {
    fail(ErrorKind::invalid_argument, "thresholds must be > 0");
  }
  if (cycle_noise_sigma < 0) fail(ErrorKind::invalid_argument, "cycle_noise_sigma must be >= 0");
}

double RelaxationModel::sigma_at(double g) const {
  if (sigma_table.empty()) return 0.0;
  if (g <= sigma_table.front().first) return sigma_table.front().second;
  if (g >= sigma_table.back().first) return sigma_table.back().second;
  auto hi = std::upper_bound(sigma_table.begin(), sigma_table.end(), g,
                             [](double v, const auto& p) { return v < p.first; });
  auto lo = std::prev(hi);
  const double t = (g - lo->first) / (hi->first - lo->first);
  return lo->second + t * (hi->second - lo->second);
}

void RelaxationModel::validate() const {
  for (std::size_t i = 0; i < sigma_table.size(); ++i) {
    if (sigma_table[i].second < 0) fail(ErrorKind::invalid_argument, "relaxation sigma must be >= 0");
    if (i > 0 && !(sigma_table[i].first > sigma_table[i - 1].first)) {
      fail(ErrorKind::invalid_argument, "relaxation table must be strictly increasing in conductance");
    }
  }
  if (g_ceiling < g_floor) fail(ErrorKind::invalid_argument, "relaxation ceiling below floor");
}

RelaxationModel RelaxationModel::zero() {
  RelaxationModel m;
  for (auto& p : m.sigma_table) p.second = 0.0;
  return m;
}

std::pair<double, double> encode_weight(double w, double w_max, double g_min, double g_max) {
  if (!(w_max > 0)) fail(ErrorKind::invalid_argument, "w_max must be > 0");
  if (std::abs(w) > w_max) {
    fail(ErrorKind::out_of_range,
         "weight " + std::to_string(w) + " outside ±w_max " + std::to_string(w_max));
  }
  // w / w_max first so |w| = w_max maps to exactly g_max.
  const double scaled = std::clamp(g_max * (w / w_max), -g_max, g_max);
  return {std::max(scaled, g_min), std::max(-scaled, g_min)};
}

double decode_weight(double g_plus, double g_minus, double w_max, double g_max) {
  return (g_plus - g_minus) * w_max / g_max;
}

namespace {

enum class Polarity { set, reset };

}  // namespace

ProgramResult write_verify_cell(CellState& cell, double target, const ProgramParams& params,
                                const DeviceUpdateRule& rule, Engine& rng) {
  if (target < params.g_min || target > params.g_max) {
    fail(ErrorKind::out_of_range, "write-verify target " + std::to_string(target) +
                                      " µS outside [g_min, g_max]");
  }
  ProgramResult result;
  auto within = [&] { return std::abs(cell.conductance - target) <= params.acceptance; };
  if (within()) {
    result.converged = true;
    result.final_g = cell.conductance;
    return result;
  }

  std::normal_distribution<double> cycle_noise(0.0, 1.0);
  Polarity polarity = cell.conductance < target ? Polarity::set : Polarity::reset;
  double amplitude = polarity == Polarity::set ? params.v_set_init : params.v_reset_init;

  while (result.pulses < params.max_pulses) {
    const double noise = rule.cycle_noise_sigma > 0 ? rule.cycle_noise_sigma * cycle_noise(rng) : 0.0;
    double delta;
    if (polarity == Polarity::set) {
      delta = rule.set_gain * std::max(amplitude - rule.set_threshold, 0.0) + noise;
    } else {
      delta = -(rule.reset_gain * std::max(amplitude - rule.reset_threshold, 0.0) + noise);
    }
    cell.conductance = std::clamp(cell.conductance + delta, 0.0, params.g_max_hard);
    cell.pending_relaxation = true;
    ++cell.pulses_applied;
    ++result.pulses;

    if (within()) {
      result.converged = true;
      break;
    }
    const bool overshoot = polarity == Polarity::set ? cell.conductance > target
                                                     : cell.conductance < target;
    if (overshoot) {
      ++result.reversals;
      ++cell.polarity_reversals;
      if (result.reversals >= params.reversal_timeout) break;
      polarity = polarity == Polarity::set ? Polarity::reset : Polarity::set;
      amplitude = polarity == Polarity::set ? params.v_set_init : params.v_reset_init;
    } else {
      amplitude += params.v_increment;
    }
  }
  result.final_g = cell.conductance;
  return result;
}

void relax_cell(CellState& cell, const RelaxationModel& model, Engine& rng) {
  if (!cell.pending_relaxation) return;
  cell.pending_relaxation = false;
  const double sigma = model.sigma_at(cell.conductance);
  if (sigma == 0.0 && model.mean_bias == 0.0) return;
  std::normal_distribution<double> dist(model.mean_bias, sigma > 0 ? sigma : 0.0);
  const double before = cell.conductance;
  const double draw = sigma > 0 ? dist(rng) : model.mean_bias;
  double after = before + draw;
  if (before <= model.g_floor) {
    // Near g_min the drift is one-sided: downward excursions fall back to the floor.
    after = std::max(after, std::min(before, model.g_floor));
  }
  cell.conductance = std::clamp(after, 0.0, model.g_ceiling);
}

void apply_relaxation(std::span<CellState> cells, const RelaxationModel& model,
                      const RngStream& stream) {
  if (kernels::default_exec() == kernels::Exec::parallel) {
    kernels::relax_parallel(cells, model, stream);
  } else {
    kernels::relax_serial(cells, model, stream);
  }
}

double deviation_sigma(std::span<const CellState> cells, std::span<const double> targets) {
  if (cells.size() != targets.size()) {
    fail(ErrorKind::invalid_argument, "cells and targets differ in length");
  }
  if (cells.empty()) return 0.0;
  double mean = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i) mean += cells[i].conductance - targets[i];
  mean /= static_cast<double>(cells.size());
  double var = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const double d = cells[i].conductance - targets[i] - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(cells.size()));
}

namespace {

std::size_t run_write_verify(std::span<CellState> cells, std::span<const double> targets,
                             std::span<const std::size_t> indices, const ProgramParams& params,
                             const DeviceUpdateRule& rule, const RngStream& stream,
                             std::size_t& pulses) {
  std::vector<ProgramResult> results(indices.size());
  if (kernels::default_exec() == kernels::Exec::parallel) {
    kernels::write_verify_parallel(cells, targets, indices, params, rule, stream, results);
  } else {
    kernels::write_verify_serial(cells, targets, indices, params, rule, stream, results);
  }
  std::size_t failures = 0;
  for (const auto& r : results) {
    pulses += static_cast<std::size_t>(r.pulses);
    if (!r.converged) ++failures;
  }
  return failures;
}

}  // namespace

IterativeStats program_array_iterative(std::span<CellState> cells, std::span<const double> targets,
                                       int iterations, const ProgramParams& params,
                                       const DeviceUpdateRule& rule,
                                       const RelaxationModel& model, const RngStream& stream) {
  if (cells.size() != targets.size()) {
    fail(ErrorKind::invalid_argument, "targets.len != cells.len");
  }
  if (iterations < 0) fail(ErrorKind::invalid_argument, "iterations must be >= 0");
  params.validate();
  rule.validate();
  model.validate();

  IterativeStats stats;
  std::vector<std::size_t> all(cells.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  stats.initial_failures =
      run_write_verify(cells, targets, all, params, rule, stream.derive(0), stats.total_pulses);
  stats.failures = stats.initial_failures;
  stats.programmed_cells = cells.size();
  stats.initial_sigma = deviation_sigma(cells, targets);

  for (int it = 1; it <= iterations; ++it) {
    const RngStream pass = stream.derive(static_cast<std::uint64_t>(it));
    apply_relaxation(cells, model, pass.derive(0xae1a));
    stats.deviation_sigma.push_back(deviation_sigma(cells, targets));

    std::vector<std::size_t> drifted;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (std::abs(cells[i].conductance - targets[i]) > params.acceptance) drifted.push_back(i);
    }
    stats.reprogrammed.push_back(drifted.size());
    stats.failures =
        run_write_verify(cells, targets, drifted, params, rule, pass.derive(0xb0b), stats.total_pulses);
  }
  return stats;
}

}  // namespace cimsim::device
