#include "cimsim/error.hpp"

namespace cimsim {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::out_of_range: return "out_of_range";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::bit_width: return "bit_width";
    case ErrorKind::zero_conductance: return "zero_conductance";
    case ErrorKind::capacity_exceeded: return "capacity_exceeded";
    case ErrorKind::invalid_placement: return "invalid_placement";
    case ErrorKind::not_programmed: return "not_programmed";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
    case ErrorKind::schema: return "schema";
  }
  return "unknown";
}

}  // namespace cimsim
