#include "cimsim/mapper.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cimsim/device.hpp"
#include "cimsim/error.hpp"

namespace cimsim::mapper {

namespace {

constexpr std::size_t kCore = 256;

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

std::size_t bias_pairs(double bias_range, double weight_range) {
  if (bias_range <= 0.0) return 1;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(bias_range / weight_range)));
}

}  // namespace

void LayerSpec::validate() const {
  if (fan_in() == 0 || out == 0) fail(ErrorKind::invalid_argument, name + ": empty layer");
  if (weights.size() != fan_in() * out) {
    fail(ErrorKind::invalid_argument, name + ": weight count does not match H·W·I·O");
  }
  if (!bias.empty() && bias.size() != out) {
    fail(ErrorKind::invalid_argument, name + ": bias length must equal O");
  }
  if (batchnorm) {
    const auto& bn = *batchnorm;
    if (bn.gamma.size() != out || bn.beta.size() != out || bn.mean.size() != out ||
        bn.var.size() != out) {
      fail(ErrorKind::invalid_argument, name + ": batch-norm parameters must have length O");
    }
  }
}

void merge_batchnorm(std::vector<double>& weights, std::vector<double>& bias, std::size_t fan_in,
                     const BatchNorm& bn) {
  const std::size_t out = bn.gamma.size();
  if (weights.size() != fan_in * out) fail(ErrorKind::invalid_argument, "weights size mismatch");
  if (bias.empty()) bias.assign(out, 0.0);
  if (bias.size() != out) fail(ErrorKind::invalid_argument, "bias size mismatch");
  for (std::size_t o = 0; o < out; ++o) {
    const double d = bn.var[o] + bn.eps;
    if (!(d > 0.0)) fail(ErrorKind::invalid_argument, "batch-norm variance + eps must be > 0");
    const double s = bn.gamma[o] / std::sqrt(d);
    for (std::size_t k = 0; k < fan_in; ++k) weights[k * out + o] *= s;
    bias[o] = (bias[o] - bn.mean[o]) * s + bn.beta[o];
  }
}

LayerSpec merge_batchnorm(LayerSpec layer) {
  layer.validate();
  if (!layer.batchnorm) return layer;
  merge_batchnorm(layer.weights, layer.bias, layer.fan_in(), *layer.batchnorm);
  layer.batchnorm.reset();
  return layer;
}

ConductanceMatrix conv_to_matrix(const LayerSpec& layer, double g_min, double g_max) {
  layer.validate();
  if (layer.batchnorm) {
    fail(ErrorKind::invalid_argument, layer.name + ": merge batch-norm before mapping");
  }
  const double w_range = max_abs(layer.weights);
  if (w_range == 0.0) fail(ErrorKind::invalid_argument, layer.name + ": all-zero weights");
  const std::size_t B = bias_pairs(max_abs(layer.bias), w_range);

  ConductanceMatrix m;
  m.g_min = g_min;
  m.g_max = g_max;
  m.bias_rows = B;
  m.cols = layer.out;
  m.rows = 2 * (layer.fan_in() + B);
  m.w_max = w_range;
  m.targets.assign(m.rows * m.cols, g_min);
  auto put = [&](std::size_t pair, std::size_t o, double w) {
    const auto [gp, gn] = device::encode_weight(w, m.w_max, g_min, g_max);
    m.targets[(2 * pair) * m.cols + o] = gp;
    m.targets[(2 * pair + 1) * m.cols + o] = gn;
  };
  for (std::size_t k = 0; k < layer.fan_in(); ++k) {
    for (std::size_t o = 0; o < layer.out; ++o) put(k, o, layer.weights[k * layer.out + o]);
  }
  for (std::size_t t = 0; t < B; ++t) {
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double b = layer.bias.empty() ? 0.0 : layer.bias[o];
      put(layer.fan_in() + t, o, std::clamp(b / static_cast<double>(B), -m.w_max, m.w_max));
    }
  }
  return m;
}

QuadMatrix rbm_to_quad(const std::vector<double>& weights, const std::vector<double>& visible_bias,
                       const std::vector<double>& hidden_bias, std::size_t visible,
                       std::size_t hidden, double g_min, double g_max) {
  if (weights.size() != visible * hidden || visible_bias.size() != visible ||
      hidden_bias.size() != hidden) {
    fail(ErrorKind::invalid_argument, "RBM dimensions inconsistent");
  }
  double w_range = max_abs(weights);
  if (w_range == 0.0) w_range = std::max({max_abs(visible_bias), max_abs(hidden_bias), 1.0});
  QuadMatrix q;
  q.visible = visible;
  q.hidden = hidden;
  q.visible_bias_pairs = bias_pairs(max_abs(visible_bias), w_range);
  q.hidden_bias_pairs = bias_pairs(max_abs(hidden_bias), w_range);
  auto& m = q.m;
  m.g_min = g_min;
  m.g_max = g_max;
  m.w_max = w_range;
  m.rows = 2 * (hidden + q.visible_bias_pairs);
  m.cols = 2 * (visible + q.hidden_bias_pairs);
  m.bias_rows = q.visible_bias_pairs;
  m.targets.assign(m.rows * m.cols, g_min);
  auto quad = [&](std::size_t rp, std::size_t cp, double w) {
    const auto [gp, gn] = device::encode_weight(w, w_range, g_min, g_max);
    m.targets[(2 * rp) * m.cols + 2 * cp] = gp;
    m.targets[(2 * rp) * m.cols + 2 * cp + 1] = gn;
    m.targets[(2 * rp + 1) * m.cols + 2 * cp] = gn;
    m.targets[(2 * rp + 1) * m.cols + 2 * cp + 1] = gp;
  };
  for (std::size_t i = 0; i < visible; ++i) {
    for (std::size_t j = 0; j < hidden; ++j) quad(j, i, weights[i * hidden + j]);
  }
  const auto bv = static_cast<double>(q.visible_bias_pairs);
  for (std::size_t t = 0; t < q.visible_bias_pairs; ++t) {
    for (std::size_t i = 0; i < visible; ++i) quad(hidden + t, i, visible_bias[i] / bv);
  }
  const auto bh = static_cast<double>(q.hidden_bias_pairs);
  for (std::size_t t = 0; t < q.hidden_bias_pairs; ++t) {
    for (std::size_t j = 0; j < hidden; ++j) quad(j, visible + t, hidden_bias[j] / bh);
  }
  return q;
}

std::vector<std::vector<std::size_t>> rbm_interleave(std::size_t visible, std::size_t k) {
  if (k == 0) fail(ErrorKind::invalid_argument, "interleave factor must be >= 1");
  std::vector<std::vector<std::size_t>> slots(k);
  for (std::size_t i = 0; i < visible; ++i) slots[i % k].push_back(i);
  return slots;
}

std::vector<Segment> split_matrix(std::size_t rows, std::size_t cols, std::size_t max_rows,
                                  std::size_t max_cols) {
  if (max_rows < 2 || max_rows % 2 != 0 || max_cols < 1) {
    fail(ErrorKind::invalid_argument, "max_rows must be even and >= 2, max_cols >= 1");
  }
  if (rows % 2 != 0) fail(ErrorKind::invalid_argument, "conductance matrix row count must be even");
  std::vector<Segment> out;
  for (std::size_t r = 0, rb = 0; r < rows; r += max_rows, ++rb) {
    for (std::size_t c = 0, cb = 0; c < cols; c += max_cols, ++cb) {
      out.push_back({r, std::min(max_rows, rows - r), c, std::min(max_cols, cols - c), rb, cb});
    }
  }
  return out;
}

int PlacementPlan::cores_used() const {
  std::set<int> used;
  for (const auto& a : assignments) used.insert(a.core);
  return static_cast<int>(used.size());
}

int PlacementPlan::groups(int layer) const {
  int g = 0;
  for (const auto& a : assignments) {
    if (a.layer == layer) g = std::max(g, a.group + 1);
  }
  return g;
}

namespace {

struct Piece {
  int layer;
  Segment seg;
  int group;
  std::size_t row = 0, col = 0;
  MergeStyle merge = MergeStyle::none;
};

// Pieces sharing one core. Pieces are appended left to right; diagonal
// appends also stack downward so row ranges stay disjoint.
struct Bin {
  std::vector<Piece> pieces;
  std::size_t next_row = 0, next_col = 0;
  std::size_t max_rows = 0;
  bool locked = false;

  std::size_t area() const {
    std::size_t a = 0;
    for (const auto& p : pieces) a += p.seg.rows * p.seg.cols;
    return a;
  }
  bool fits_diagonal(const Bin& o) const {
    return next_row + o.next_row <= kCore && next_col + o.next_col <= kCore;
  }
  bool fits_horizontal(const Bin& o) const { return next_col + o.next_col <= kCore; }

  void absorb(const Bin& o, MergeStyle style) {
    const std::size_t dr = style == MergeStyle::diagonal ? next_row : 0;
    for (auto p : o.pieces) {
      p.row += dr;
      p.col += next_col;
      if (style == MergeStyle::horizontal) {
        p.merge = MergeStyle::horizontal;
      } else if (p.merge == MergeStyle::none) {
        p.merge = MergeStyle::diagonal;
      }
      pieces.push_back(p);
    }
    for (auto& p : pieces) {
      if (style == MergeStyle::horizontal) {
        p.merge = MergeStyle::horizontal;
      } else if (p.merge == MergeStyle::none) {
        p.merge = MergeStyle::diagonal;
      }
    }
    next_col += o.next_col;
    next_row = style == MergeStyle::diagonal ? next_row + o.next_row : std::max(next_row, o.next_row);
    max_rows = std::max(max_rows, dr + o.max_rows);
  }
};

Bin single(int layer, const Segment& s, int group, bool locked) {
  Bin b;
  b.pieces.push_back({layer, s, group});
  b.next_row = s.rows;
  b.next_col = s.cols;
  b.max_rows = s.rows;
  b.locked = locked;
  return b;
}

}  // namespace

PlacementPlan place(const std::vector<LayerSegments>& layers, int n_cores, const PlaceHints& hints) {
  if (n_cores < 1 || n_cores > 48) fail(ErrorKind::invalid_argument, "n_cores must be in 1..48");
  PlacementPlan plan;
  plan.n_cores = n_cores;

  std::vector<Bin> bins;
  std::size_t total_segments = 0;
  for (const auto& l : layers) {
    if (plan.layers.count(l.layer)) fail(ErrorKind::invalid_argument, "duplicate layer id");
    plan.layers[l.layer] = l.shape;
    const bool protected_layer = hints.protect.count(l.layer) > 0 ||
                                 (hints.intensity_protect > 0 && l.intensity >= hints.intensity_protect);
    for (const auto& s : l.segments) {
      if (s.rows > kCore || s.cols > kCore) {
        fail(ErrorKind::invalid_argument, "segment larger than one core");
      }
      bins.push_back(single(l.layer, s, 0, protected_layer || s.cols > hints.wide_cols));
      ++total_segments;
    }
  }
  const auto cores = static_cast<std::size_t>(n_cores);

  if (bins.size() > cores || hints.force_merge) {
    // Merge the two smallest unlocked bins that still fit, diagonal first.
    const std::size_t goal = hints.force_merge ? 1 : cores;
    while (bins.size() > goal) {
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < bins.size(); ++i) {
        if (!bins[i].locked) order.push_back(i);
      }
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return bins[a].area() < bins[b].area(); });
      std::optional<std::pair<std::size_t, std::size_t>> pick;
      MergeStyle style = MergeStyle::diagonal;
      for (MergeStyle s : {MergeStyle::diagonal, MergeStyle::horizontal}) {
        for (std::size_t x = 0; x < order.size() && !pick; ++x) {
          for (std::size_t y = x + 1; y < order.size(); ++y) {
            const Bin& a = bins[order[x]];
            const Bin& b = bins[order[y]];
            if (s == MergeStyle::diagonal ? a.fits_diagonal(b) : a.fits_horizontal(b)) {
              pick = std::make_pair(order[x], order[y]);
              style = s;
              break;
            }
          }
        }
        if (pick) break;
      }
      if (!pick) {
        if (bins.size() <= cores) break;
        fail(ErrorKind::capacity_exceeded,
             "placement needs " + std::to_string(bins.size() - cores) +
                 " more cores than available after merging (" + std::to_string(total_segments) +
                 " segments, " + std::to_string(n_cores) + " cores)");
      }
      auto [a, b] = *pick;
      bins[a].absorb(bins[b], style);
      bins.erase(bins.begin() + static_cast<std::ptrdiff_t>(b));
    }
  } else {
    // Spare cores hold whole copies of layers.
    std::size_t spare = cores - bins.size();
    std::map<int, std::size_t> seg_count;
    for (const auto& l : layers) seg_count[l.layer] = l.segments.size();
    auto add_copy = [&](const LayerSegments& l, int group) {
      for (const auto& s : l.segments) bins.push_back(single(l.layer, s, group, true));
      spare -= l.segments.size();
    };
    if (!hints.copies.empty()) {
      for (const auto& l : layers) {
        auto it = hints.copies.find(l.layer);
        if (it == hints.copies.end()) continue;
        for (int g = 1; g < it->second; ++g) {
          if (l.segments.size() > spare) {
            fail(ErrorKind::capacity_exceeded,
                 "duplicate hint for layer " + std::to_string(l.layer) + " needs " +
                     std::to_string(l.segments.size() - spare) + " more cores");
          }
          add_copy(l, g);
        }
      }
    } else if (hints.auto_duplicate) {
      std::vector<const LayerSegments*> order;
      for (const auto& l : layers) order.push_back(&l);
      std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
        return a->intensity > b->intensity;
      });
      std::map<int, int> copies;
      bool added = true;
      while (added) {
        added = false;
        for (const auto* l : order) {
          if (l->segments.empty() || l->segments.size() > spare) continue;
          add_copy(*l, ++copies[l->layer]);
          added = true;
          break;  // re-rank after every copy: intensity per copy halves
        }
        if (added) {
          std::stable_sort(order.begin(), order.end(), [&](const auto* a, const auto* b) {
            return a->intensity / (1 + copies[a->layer]) > b->intensity / (1 + copies[b->layer]);
          });
        }
      }
    }
  }

  int core = 0;
  for (const auto& b : bins) {
    for (const auto& p : b.pieces) {
      plan.assignments.push_back({p.layer, p.seg, core, p.row, p.col, p.group, p.merge});
    }
    ++core;
  }
  return plan;
}

std::vector<std::string> validate_placement(const PlacementPlan& plan) {
  std::vector<std::string> v;
  auto where = [](const Assignment& a) {
    std::ostringstream s;
    s << "layer " << a.layer << " segment rows " << a.segment.row0 << "+" << a.segment.rows
      << " cols " << a.segment.col0 << "+" << a.segment.cols << " on core " << a.core;
    return s.str();
  };
  if (plan.n_cores < 1 || plan.n_cores > 48) v.push_back("n_cores outside 1..48");
  for (const auto& a : plan.assignments) {
    if (a.core < 0 || a.core >= plan.n_cores) {
      v.push_back("core id out of range: " + where(a));
    }
    if (a.segment.rows == 0 || a.segment.cols == 0) v.push_back("empty segment: " + where(a));
    if (a.core_row + a.segment.rows > kCore || a.core_col + a.segment.cols > kCore) {
      v.push_back("segment exceeds the 256x256 array: " + where(a));
    }
    if (a.segment.row0 % 2 || a.segment.rows % 2 || a.core_row % 2) {
      v.push_back("differential pair split: " + where(a));
    }
    auto it = plan.layers.find(a.layer);
    if (it == plan.layers.end()) {
      v.push_back("unknown layer: " + where(a));
    } else if (a.segment.row0 + a.segment.rows > it->second.rows ||
               a.segment.col0 + a.segment.cols > it->second.cols) {
      v.push_back("segment outside its layer matrix: " + where(a));
    }
  }
  const auto& as = plan.assignments;
  for (std::size_t x = 0; x < as.size(); ++x) {
    for (std::size_t y = x + 1; y < as.size(); ++y) {
      const auto& a = as[x];
      const auto& b = as[y];
      if (a.core != b.core) continue;
      const bool rows = a.core_row < b.core_row + b.segment.rows && b.core_row < a.core_row + a.segment.rows;
      const bool cols = a.core_col < b.core_col + b.segment.cols && b.core_col < a.core_col + a.segment.cols;
      if (rows && cols) v.push_back("overlap on core " + std::to_string(a.core) + ": " + where(a) + " / " + where(b));
      if (rows && !cols &&
          (a.merge != MergeStyle::horizontal || b.merge != MergeStyle::horizontal)) {
        v.push_back("shared rows not marked horizontal: " + where(a) + " / " + where(b));
      }
    }
  }
  // Coverage: each (layer, group) tiles its matrix exactly once.
  std::map<std::pair<int, int>, std::vector<const Assignment*>> by_group;
  for (const auto& a : as) by_group[{a.layer, a.group}].push_back(&a);
  for (const auto& [id, shape] : plan.layers) {
    const int groups = plan.groups(id);
    if (groups == 0) v.push_back("layer " + std::to_string(id) + " not placed");
    for (int g = 0; g < groups; ++g) {
      const auto& list = by_group[{id, g}];
      std::size_t area = 0;
      bool overlap = false;
      for (std::size_t x = 0; x < list.size(); ++x) {
        area += list[x]->segment.rows * list[x]->segment.cols;
        for (std::size_t y = x + 1; y < list.size(); ++y) {
          const auto& s = list[x]->segment;
          const auto& t = list[y]->segment;
          if (s.row0 < t.row0 + t.rows && t.row0 < s.row0 + s.rows && s.col0 < t.col0 + t.cols &&
              t.col0 < s.col0 + s.cols) {
            overlap = true;
          }
        }
      }
      if (overlap || area != shape.rows * shape.cols) {
        v.push_back("layer " + std::to_string(id) + " group " + std::to_string(g) +
                    " does not tile its matrix exactly once");
      }
    }
  }
  return v;
}

std::string to_string(MergeStyle m) {
  switch (m) {
    case MergeStyle::none: return "none";
    case MergeStyle::diagonal: return "diagonal";
    case MergeStyle::horizontal: return "horizontal";
  }
  return "none";
}

MergeStyle merge_style_from_string(const std::string& s) {
  if (s == "none") return MergeStyle::none;
  if (s == "diagonal") return MergeStyle::diagonal;
  if (s == "horizontal") return MergeStyle::horizontal;
  fail(ErrorKind::schema, "unknown merge style '" + s + "'");
}

void to_json(nlohmann::json& j, const PlacementPlan& plan) {
  j = nlohmann::json::object();
  j["format"] = "cimsim-plan/1";
  j["n_cores"] = plan.n_cores;
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& [id, s] : plan.layers) layers.push_back({{"id", id}, {"rows", s.rows}, {"cols", s.cols}});
  auto& as = j["assignments"] = nlohmann::json::array();
  for (const auto& a : plan.assignments) {
    as.push_back({{"layer", a.layer},
                  {"row0", a.segment.row0},
                  {"rows", a.segment.rows},
                  {"col0", a.segment.col0},
                  {"cols", a.segment.cols},
                  {"row_band", a.segment.row_band},
                  {"col_band", a.segment.col_band},
                  {"core", a.core},
                  {"core_row", a.core_row},
                  {"core_col", a.core_col},
                  {"group", a.group},
                  {"merge", to_string(a.merge)}});
  }
}

void from_json(const nlohmann::json& j, PlacementPlan& plan) {
  try {
    if (j.at("format").get<std::string>() != "cimsim-plan/1") {
      fail(ErrorKind::schema, "unsupported plan format");
    }
    plan = PlacementPlan{};
    plan.n_cores = j.at("n_cores").get<int>();
    for (const auto& l : j.at("layers")) {
      plan.layers[l.at("id").get<int>()] = {l.at("rows").get<std::size_t>(), l.at("cols").get<std::size_t>()};
    }
    for (const auto& a : j.at("assignments")) {
      Assignment x;
      x.layer = a.at("layer").get<int>();
      x.segment = {a.at("row0").get<std::size_t>(),     a.at("rows").get<std::size_t>(),
                   a.at("col0").get<std::size_t>(),     a.at("cols").get<std::size_t>(),
                   a.at("row_band").get<std::size_t>(), a.at("col_band").get<std::size_t>()};
      x.core = a.at("core").get<int>();
      x.core_row = a.at("core_row").get<std::size_t>();
      x.core_col = a.at("core_col").get<std::size_t>();
      x.group = a.at("group").get<int>();
      x.merge = merge_style_from_string(a.at("merge").get<std::string>());
      plan.assignments.push_back(x);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("plan: ") + e.what());
  }
}

}  // namespace cimsim::mapper
