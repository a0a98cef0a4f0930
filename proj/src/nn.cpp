#include "cimsim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "cimsim/error.hpp"

namespace cimsim::nn {

namespace {

constexpr std::size_t kDigitsTrain = 1437;

std::vector<std::size_t> shuffled(std::size_t n, Engine& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

// Standard-normal draws; the weight noise is eps · fraction · max|W|.
Eigen::MatrixXd unit_noise(Eigen::Index rows, Eigen::Index cols, Engine& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::MatrixXd eps(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) eps(r, c) = d(rng);
  }
  return eps;
}

Eigen::MatrixXd noisy(const Eigen::MatrixXd& w, double fraction, Engine& rng) {
  if (fraction <= 0.0) return w;
  return w + unit_noise(w.rows(), w.cols(), rng) * (fraction * w.cwiseAbs().maxCoeff());
}

Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace

void Dataset::validate() const {
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    fail(ErrorKind::invalid_argument, "dataset: feature rows and label count differ");
  }
  for (int label : y) {
    if (label < 0 || label >= classes) fail(ErrorKind::invalid_argument, "dataset: label out of range");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset d;
  d.classes = classes;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    d.y.push_back(y.at(rows[i]));
  }
  return d;
}

Split load_digits(const std::string& path, std::uint64_t split_seed) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open digits file " + path);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 65) fail(ErrorKind::schema, "digits row must hold 64 pixels and a label");
    labels.push_back(static_cast<int>(v.back()));
    v.pop_back();
    rows.push_back(std::move(v));
  }
  if (rows.size() <= kDigitsTrain) fail(ErrorKind::schema, "digits file too short");
  Dataset all;
  all.x.resize(static_cast<Eigen::Index>(rows.size()), 64);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < 64; ++j) {
      all.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j] / 16.0;
    }
  }
  all.y = labels;
  Engine rng = RngStream(split_seed).derive(0xD161).engine();
  const auto idx = shuffled(rows.size(), rng);
  const std::vector<std::size_t> tr(idx.begin(), idx.begin() + kDigitsTrain);
  const std::vector<std::size_t> te(idx.begin() + kDigitsTrain, idx.end());
  return {TrainingSet(all.subset(tr)), TestSet(all.subset(te))};
}

Eigen::MatrixXd binarize(const Eigen::MatrixXd& x, double threshold) {
  return (x.array() > threshold).cast<double>().matrix();
}

void Mlp::validate() const {
  if (layers.empty()) fail(ErrorKind::invalid_argument, "model has no layers");
  if (in_bits < 2 || in_bits > 6) fail(ErrorKind::bit_width, "in_bits must be in 2..6");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& d = layers[l];
    if (d.b.size() != d.w.cols()) fail(ErrorKind::invalid_argument, "bias length must equal layer width");
    if (l > 0 && layers[l - 1].w.cols() != d.w.rows()) {
      fail(ErrorKind::invalid_argument, "layer widths do not chain");
    }
    if (!(d.alpha > 0)) fail(ErrorKind::invalid_argument, "clip values must be > 0");
  }
}

Mlp init_mlp(const std::vector<std::size_t>& sizes, std::uint64_t seed, int in_bits,
             double hidden_alpha) {
  if (sizes.size() < 2) fail(ErrorKind::invalid_argument, "need at least input and output sizes");
  Mlp m;
  m.in_bits = in_bits;
  Engine rng = RngStream(seed).derive(0x1417).engine();
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Dense d;
    const auto in = static_cast<Eigen::Index>(sizes[l]);
    const auto out = static_cast<Eigen::Index>(sizes[l + 1]);
    std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    d.w.resize(in, out);
    for (Eigen::Index c = 0; c < out; ++c) {
      for (Eigen::Index r = 0; r < in; ++r) d.w(r, c) = g(rng);
    }
    d.b = Eigen::VectorXd::Zero(out);
    d.alpha = l == 0 ? 1.0 : hidden_alpha;
    m.layers.push_back(std::move(d));
  }
  m.validate();
  return m;
}

Eigen::MatrixXd quantize(const Eigen::MatrixXd& a, double alpha, int cap) {
  const double s = alpha / cap;
  return a.unaryExpr([&](double v) { return std::round(std::clamp(v, 0.0, alpha) / s) * s; });
}

void TrainConfig::validate() const {
  if (noise_fraction < 0) fail(ErrorKind::invalid_argument, "noise fraction must be >= 0");
  if (epochs < 0) fail(ErrorKind::invalid_argument, "epochs must be >= 0");
  if (batch == 0 || !(lr > 0)) fail(ErrorKind::invalid_argument, "batch and lr must be positive");
}

TrainHistory train(Mlp& model, const TrainingSet& data, const TrainConfig& cfg, std::size_t first) {
  model.validate();
  cfg.validate();
  const Dataset& d = data.data();
  const std::size_t L = model.depth();
  if (first >= L) fail(ErrorKind::invalid_argument, "no trainable layers");
  if (d.x.cols() != model.layers[first].w.rows()) {
    fail(ErrorKind::invalid_argument, "data width differs from the first trained layer");
  }
  const int cap = model.input_cap();
  const RngStream root = RngStream(cfg.seed).derive(0x791A);

  std::vector<Eigen::MatrixXd> vw(L);
  std::vector<Eigen::VectorXd> vb(L);
  std::vector<double> va(L, 0.0);
  for (std::size_t l = first; l < L; ++l) {
    vw[l] = Eigen::MatrixXd::Zero(model.layers[l].w.rows(), model.layers[l].w.cols());
    vb[l] = Eigen::VectorXd::Zero(model.layers[l].b.size());
  }

  TrainHistory hist;
  std::vector<Eigen::MatrixXd> a(L + 1), q(L), wn(L), z(L), eps(L);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Engine order_rng = root.derive({0, static_cast<std::uint64_t>(epoch)}).engine();
    const auto order = shuffled(d.size(), order_rng);
    double loss_sum = 0.0;
    std::uint64_t step = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch, ++step) {
      const std::size_t n = std::min(cfg.batch, order.size() - s);
      Engine noise_rng = root.derive({1, static_cast<std::uint64_t>(epoch), step}).engine();
      a[first].resize(static_cast<Eigen::Index>(n), d.x.cols());
      Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), d.classes);
      for (std::size_t i = 0; i < n; ++i) {
        a[first].row(static_cast<Eigen::Index>(i)) = d.x.row(static_cast<Eigen::Index>(order[s + i]));
        onehot(static_cast<Eigen::Index>(i), d.y[order[s + i]]) = 1.0;
      }
      for (std::size_t l = first; l < L; ++l) {
        const Dense& layer = model.layers[l];
        q[l] = quantize(a[l], layer.alpha, cap);
        if (cfg.noise_fraction > 0) {
          eps[l] = unit_noise(layer.w.rows(), layer.w.cols(), noise_rng);
          wn[l] = layer.w + eps[l] * (cfg.noise_fraction * layer.w.cwiseAbs().maxCoeff());
        } else {
          wn[l] = layer.w;
        }
        z[l] = (q[l] * wn[l]).rowwise() + layer.b.transpose();
        if (l + 1 < L) a[l + 1] = z[l].cwiseMax(0.0);
      }
      const Eigen::MatrixXd p = softmax(z[L - 1]);
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        loss_sum -= std::log(std::max(p(r, d.y[order[s + i]]), 1e-300));
      }
      Eigen::MatrixXd g = (p - onehot) / static_cast<double>(n);
      for (std::size_t l = L; l-- > first;) {
        Dense& layer = model.layers[l];
        const Eigen::MatrixXd gn = q[l].transpose() * g;
        Eigen::MatrixXd gw = gn + cfg.weight_decay * layer.w;
        if (cfg.noise_fraction > 0) {
          // The noise scale depends on the largest weight; its gradient lands there.
          Eigen::Index r = 0, c = 0;
          layer.w.cwiseAbs().maxCoeff(&r, &c);
          const double sign = layer.w(r, c) < 0 ? -1.0 : 1.0;
          gw(r, c) += sign * cfg.noise_fraction * (gn.array() * eps[l].array()).sum();
        }
        const Eigen::VectorXd gb = g.colwise().sum().transpose();
        Eigen::MatrixXd next;
        double galpha = 0.0;
        if (l > 0) {
          const Eigen::MatrixXd dq = g * wn[l].transpose();
          const Eigen::ArrayXXd inside = (a[l].array() > 0.0 && a[l].array() < layer.alpha).cast<double>();
          const Eigen::ArrayXXd above = (a[l].array() >= layer.alpha).cast<double>();
          galpha = (dq.array() * above).sum() + cfg.alpha_decay * layer.alpha;
          if (l > first) next = (dq.array() * inside).matrix();
        }
        vw[l] = cfg.momentum * vw[l] - cfg.lr * gw;
        vb[l] = cfg.momentum * vb[l] - cfg.lr * gb;
        layer.w += vw[l];
        layer.b += vb[l];
        if (l > 0) {
          va[l] = cfg.momentum * va[l] - cfg.lr * galpha;
          layer.alpha = std::max(layer.alpha + va[l], 1e-3);
        }
        if (l > first) g = next;
      }
    }
    const double loss = loss_sum / static_cast<double>(d.size());
    if (!std::isfinite(loss)) {
      fail(ErrorKind::divergence, "training loss is not finite at epoch " + std::to_string(epoch));
    }
    hist.loss.push_back(loss);
  }
  return hist;
}

Eigen::MatrixXd forward(const Mlp& model, const Eigen::MatrixXd& x, std::size_t first,
                        std::size_t last, double noise_fraction, Engine* rng) {
  model.validate();
  if (first > last || last > model.depth()) fail(ErrorKind::invalid_argument, "bad layer range");
  if (noise_fraction > 0 && rng == nullptr) fail(ErrorKind::invalid_argument, "noise needs an RNG");
  Eigen::MatrixXd a = x;
  for (std::size_t l = first; l < last; ++l) {
    const Dense& layer = model.layers[l];
    const Eigen::MatrixXd w = noise_fraction > 0 ? noisy(layer.w, noise_fraction, *rng) : layer.w;
    a = (quantize(a, layer.alpha, model.input_cap()) * w).rowwise() + layer.b.transpose();
    if (l + 1 < model.depth()) a = a.cwiseMax(0.0);
  }
  return a;
}

double accuracy(const Eigen::MatrixXd& logits, const std::vector<int>& y) {
  if (static_cast<std::size_t>(logits.rows()) != y.size()) {
    fail(ErrorKind::invalid_argument, "logit rows and label count differ");
  }
  if (y.empty()) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    hits += arg == y[static_cast<std::size_t>(r)];
  }
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

double accuracy(const Mlp& model, const Dataset& d, std::size_t first, double noise_fraction,
                Engine* rng) {
  return accuracy(forward(model, d.x, first, model.depth(), noise_fraction, rng), d.y);
}

double noisy_accuracy(const Mlp& model, const Dataset& d, double noise_fraction, int draws,
                      std::uint64_t seed) {
  if (draws < 1) fail(ErrorKind::invalid_argument, "draws must be >= 1");
  double sum = 0.0;
  for (int k = 0; k < draws; ++k) {
    Engine rng = RngStream(seed).derive({0x7E57, static_cast<std::uint64_t>(k)}).engine();
    sum += accuracy(model, d, 0, noise_fraction, &rng);
  }
  return sum / draws;
}

double excess_kurtosis(const Mlp& model) {
  std::vector<double> w;
  for (const auto& l : model.layers) w.insert(w.end(), l.w.data(), l.w.data() + l.w.size());
  if (w.size() < 2) return 0.0;
  const double n = static_cast<double>(w.size());
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / n;
  double m2 = 0.0, m4 = 0.0;
  for (double v : w) {
    const double d2 = (v - mean) * (v - mean);
    m2 += d2;
    m4 += d2 * d2;
  }
  m2 /= n;
  m4 /= n;
  return m4 / (m2 * m2) - 3.0;
}

}  // namespace cimsim::nn
