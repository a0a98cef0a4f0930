#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace cimsim::mapper {

enum class LayerKind { conv, dense, rbm_weights };

struct BatchNorm {
  std::vector<double> gamma, beta, mean, var;
  double eps = 1e-5;
};

/// Weights are stored flattened as (H·W·I) × O, row-major, with the fan-in
/// index ((y·W + x)·I + c). Dense layers use H = W = 1 and I = fan-in.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::dense;
  std::size_t h = 1, w = 1, in = 0, out = 0;
  std::vector<double> weights;
  std::vector<double> bias;  // per output; in units of one full-scale input code
  std::optional<BatchNorm> batchnorm;
  double intensity = 1.0;  // ops per weight; drives duplication and merge protection

  std::size_t fan_in() const { return h * w * in; }
  void validate() const;
};

/// W' = W·γ/√(σ²+ε), b' = (b − µ)·γ/√(σ²+ε) + β, per output channel.
void merge_batchnorm(std::vector<double>& weights, std::vector<double>& bias,
                     std::size_t fan_in, const BatchNorm& bn);
LayerSpec merge_batchnorm(LayerSpec layer);

/// Differential targets, row-major. Weight row k occupies physical rows 2k
/// (g⁺) and 2k+1 (g⁻); the B bias pairs follow the weight rows.
struct ConductanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> targets;
  double w_max = 1.0;
  std::size_t bias_rows = 0;  // B
  double g_min = 1.0, g_max = 40.0;

  double at(std::size_t r, std::size_t c) const { return targets[r * cols + c]; }
  std::size_t weight_pairs() const { return rows / 2 - bias_rows; }
};

/// B = max(1, ceil(max|b| / max|W|)); each bias row carries b/B.
ConductanceMatrix conv_to_matrix(const LayerSpec& layer, double g_min, double g_max);

/// RBM weights (visible × hidden) in a quad layout usable from both axes:
/// weight (i, j) sits at rows 2j..2j+1, cols 2i..2i+1 as [[g⁺, g⁻], [g⁻, g⁺]].
/// Visible biases occupy B_v extra row quads after the hidden rows, hidden
/// biases B_h extra column quads after the visible columns.
struct QuadMatrix {
  ConductanceMatrix m;
  std::size_t visible = 0, hidden = 0;
  std::size_t visible_bias_pairs = 0;  // B_v, row pairs
  std::size_t hidden_bias_pairs = 0;   // B_h, column pairs
};
QuadMatrix rbm_to_quad(const std::vector<double>& weights, const std::vector<double>& visible_bias,
                       const std::vector<double>& hidden_bias, std::size_t visible,
                       std::size_t hidden, double g_min, double g_max);

/// Visible unit i goes to core slot i mod k, so neighbouring pixels land on
/// different cores.
std::vector<std::vector<std::size_t>> rbm_interleave(std::size_t visible, std::size_t k);

struct Segment {
  std::size_t row0 = 0, rows = 0, col0 = 0, cols = 0;
  std::size_t row_band = 0, col_band = 0;
};

std::vector<Segment> split_matrix(std::size_t rows, std::size_t cols, std::size_t max_rows = 256,
                                  std::size_t max_cols = 256);
inline std::vector<Segment> split_matrix(const ConductanceMatrix& m, std::size_t max_rows = 256,
                                         std::size_t max_cols = 256) {
  return split_matrix(m.rows, m.cols, max_rows, max_cols);
}

enum class MergeStyle { none, diagonal, horizontal };

struct Assignment {
  int layer = 0;
  Segment segment;
  int core = 0;
  std::size_t core_row = 0, core_col = 0;
  int group = 0;  // duplicate group
  MergeStyle merge = MergeStyle::none;
};

struct LayerShape {
  std::size_t rows = 0, cols = 0;
};

struct PlacementPlan {
  int n_cores = 48;
  std::map<int, LayerShape> layers;
  std::vector<Assignment> assignments;

  int cores_used() const;
  int groups(int layer) const;
};

struct LayerSegments {
  int layer = 0;
  LayerShape shape;
  double intensity = 1.0;
  std::vector<Segment> segments;
};

struct PlaceHints {
  std::map<int, int> copies;  // layer → total copies; when non-empty, no automatic duplication
  std::set<int> protect;      // layers never merged
  bool auto_duplicate = true;
  std::size_t wide_cols = 128;  // segments wider than this are never merged
  double intensity_protect = 0.0;  // > 0: layers at or above this intensity are never merged
  bool force_merge = false;  // merge mergeable segments even when they fit one per core
};

PlacementPlan place(const std::vector<LayerSegments>& layers, int n_cores = 48,
                    const PlaceHints& hints = {});

/// Every violated invariant, one human-readable line each.
std::vector<std::string> validate_placement(const PlacementPlan& plan);

std::string to_string(MergeStyle m);
MergeStyle merge_style_from_string(const std::string& s);

void to_json(nlohmann::json& j, const PlacementPlan& plan);
void from_json(const nlohmann::json& j, PlacementPlan& plan);

}  // namespace cimsim::mapper
