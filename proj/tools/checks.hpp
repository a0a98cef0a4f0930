#pragma once

// Acceptance checks shared by `sim selftest` and the acceptance binary. Each
// check measures one property, compares it with a tolerance fixed here, and
// reports deterministic metrics (no timings).

#include <cstdint>
#include <string>
#include <vector>

#include "cimsim/io.hpp"

namespace checks {

struct Result {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  std::vector<cimsim::io::Metric> metrics;
};

struct Options {
  std::uint64_t seed = 0;
  std::string run_id = "acceptance";
  bool quick = false;  // smaller samples and one fine-tuning seed, for selftest
};

Result oracle_equivalence(const Options& o);       // 1
Result bit_serial_structure(const Options& o);     // 2
Result write_verify_yield(const Options& o);       // 3
Result iterative_reprogramming(const Options& o);  // 4
Result placement_transparency(const Options& o);   // 5
Result noise_resilient_training(const Options& o); // 6
Result chip_in_the_loop(const Options& o);         // 7
Result rbm_recovery(const Options& o);             // 8
Result adc_properties(const Options& o);           // 9
Result scaling_invariance(const Options& o);       // 10
Result energy_estimator(const Options& o);         // 11

/// Every check in quick mode: fewer samples, and one seed for fine-tuning.
std::vector<Result> selftest(const Options& o);

}  // namespace checks
