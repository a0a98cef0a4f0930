#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cimsim/error.hpp"
#include "cimsim/nn.hpp"

using namespace cimsim;

namespace {

const nn::Split& digits() {
  static const nn::Split s = nn::load_digits();
  return s;
}

// Straight loops over the same math as nn::forward, for a clean model.
Eigen::MatrixXd forward_by_hand(const nn::Mlp& m, const Eigen::MatrixXd& x) {
  std::vector<std::vector<double>> a(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) a[r].assign(x.row(r).begin(), x.row(r).end());
  const int cap = m.input_cap();
  for (std::size_t l = 0; l < m.depth(); ++l) {
    const auto& d = m.layers[l];
    const double s = d.alpha / cap;
    for (auto& row : a) {
      std::vector<double> next(static_cast<std::size_t>(d.w.cols()), 0.0);
      for (std::size_t o = 0; o < next.size(); ++o) {
        double acc = d.b(o);
        for (std::size_t i = 0; i < row.size(); ++i) {
          const double c = std::min(std::max(row[i], 0.0), d.alpha);
          acc += std::round(c / s) * s * d.w(i, o);
        }
        next[o] = l + 1 < m.depth() ? std::max(acc, 0.0) : acc;
      }
      row = next;
    }
  }
  Eigen::MatrixXd y(x.rows(), static_cast<Eigen::Index>(a[0].size()));
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t c = 0; c < a[r].size(); ++c) y(r, c) = a[r][c];
  }
  return y;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("load_digits: 1437/360 split of the 1797 samples, pixels in [0, 1]") {
  const auto& s = digits();
  CHECK(s.train.size() == 1437);
  CHECK(s.test.size() == 360);
  for (const auto* d : {&s.train.data(), &s.test.data()}) {
    CHECK(d->x.cols() == 64);
    CHECK(d->x.minCoeff() >= 0.0);
    CHECK(d->x.maxCoeff() <= 1.0);
    CHECK(*std::min_element(d->y.begin(), d->y.end()) == 0);
    CHECK(*std::max_element(d->y.begin(), d->y.end()) == 9);
  }
}

TEST_CASE("load_digits: the split is a function of the seed") {
  const auto a = nn::load_digits();
  const auto b = nn::load_digits(std::string(CIMSIM_DATA_DIR) + "/digits.csv", 1);
  CHECK(a.train.data().x == digits().train.data().x);
  CHECK(a.train.data().y == digits().train.data().y);
  CHECK(a.train.data().x != b.train.data().x);
  CHECK_THROWS_AS(nn::load_digits("/nonexistent/digits.csv"), Error);
}

TEST_CASE("quantize: clip to [0, alpha] then round to alpha/cap steps") {
  Eigen::MatrixXd a(1, 6);
  a << -0.3, 0.0, 0.14, 0.15, 0.99, 3.0;
  const auto q = nn::quantize(a, 0.7, 7);
  const double expect[] = {0.0, 0.0, 0.1, 0.2, 0.7, 0.7};
  for (int i = 0; i < 6; ++i) CHECK(q(0, i) == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("forward: clean model matches a loop implementation") {
  auto m = nn::init_mlp({64, 12, 10}, 3);
  m.layers[0].b.setConstant(0.05);
  m.layers[1].alpha = 1.7;
  const Eigen::MatrixXd x = digits().test.data().x.topRows(20);
  const auto y = nn::forward(m, x, 0, m.depth());
  const auto ref = forward_by_hand(m, x);
  CHECK((y - ref).cwiseAbs().maxCoeff() < 1e-12);
  // Layer ranges compose.
  const auto h = nn::forward(m, x, 0, 1);
  CHECK((nn::forward(m, h, 1, 2) - y).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("accuracy: argmax against labels") {
  Eigen::MatrixXd logits(3, 3);
  logits << 1, 2, 0, 5, 0, 0, 0, 0, 1;
  CHECK(nn::accuracy(logits, {1, 0, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(nn::accuracy(logits, {1, 0}), Error);
}

TEST_CASE("train: deterministic for a fixed seed and learns the digits") {
  nn::TrainConfig c;
  c.epochs = 15;
  c.seed = 5;
  c.noise_fraction = 0.1;
  auto a = nn::init_mlp({64, 32, 10}, 1);
  auto b = a;
  const auto ha = nn::train(a, digits().train, c);
  nn::train(b, digits().train, c);
  for (std::size_t l = 0; l < a.depth(); ++l) {
    CHECK(a.layers[l].w == b.layers[l].w);
    CHECK(a.layers[l].alpha == b.layers[l].alpha);
  }
  CHECK(ha.loss.size() == 15);
  CHECK(ha.loss.back() < ha.loss.front());
  CHECK(nn::accuracy(a, digits().test.data()) > 0.9);
}

TEST_CASE("train: layers before `first` are untouched") {
  auto m = nn::init_mlp({64, 16, 10}, 2);
  const auto before = m.layers[0].w;
  const Eigen::MatrixXd h = nn::forward(m, digits().train.data().x, 0, 1);
  nn::Dataset d{h, digits().train.data().y, 10};
  nn::TrainConfig c;
  c.epochs = 2;
  const auto w1 = m.layers[1].w;
  nn::train(m, nn::TrainingSet(d), c, 1);
  CHECK(m.layers[0].w == before);
  CHECK(m.layers[1].w != w1);
  CHECK_THROWS_AS(nn::train(m, digits().train, c, 1), Error);
}

TEST_CASE("train: a runaway learning rate reports divergence") {
  auto m = nn::init_mlp({64, 32, 10}, 0);
  nn::TrainConfig c;
  c.lr = 1e6;
  c.epochs = 5;
  try {
    nn::train(m, digits().train, c);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::divergence);
  }
}

TEST_CASE("train: invalid settings are rejected") {
  auto m = nn::init_mlp({64, 10}, 0);
  nn::TrainConfig c;
  c.batch = 0;
  CHECK_THROWS_AS(nn::train(m, digits().train, c), Error);
  c = {};
  c.noise_fraction = -0.1;
  CHECK_THROWS_AS(nn::train(m, digits().train, c), Error);
  CHECK_THROWS_AS(nn::init_mlp({64}, 0), Error);
  CHECK_THROWS_AS(nn::init_mlp({64, 10}, 0, 7), Error);
}

TEST_CASE("noise-trained weights have lighter tails") {
  nn::TrainConfig c;
  c.seed = 0;
  auto clean = nn::init_mlp({64, 32, 10}, 0);
  auto noisy = clean;
  nn::train(clean, digits().train, c);
  c.noise_fraction = 0.2;
  nn::train(noisy, digits().train, c);
  CHECK(nn::excess_kurtosis(noisy) < nn::excess_kurtosis(clean));
  const auto& test = digits().test.data();
  CHECK(nn::noisy_accuracy(noisy, test, 0.1, 10, 7) > nn::noisy_accuracy(clean, test, 0.1, 10, 7));
}

TEST_CASE("noisy_accuracy: zero noise equals clean accuracy; draws are seeded") {
  auto m = nn::init_mlp({64, 16, 10}, 4);
  nn::TrainConfig c;
  c.epochs = 5;
  nn::train(m, digits().train, c);
  const auto& test = digits().test.data();
  CHECK(nn::noisy_accuracy(m, test, 0.0, 3, 1) == doctest::Approx(nn::accuracy(m, test)));
  CHECK(nn::noisy_accuracy(m, test, 0.3, 4, 9) == nn::noisy_accuracy(m, test, 0.3, 4, 9));
}

TEST_CASE("binarize: threshold on [0, 1] pixels") {
  Eigen::MatrixXd x(1, 4);
  x << 0.0, 0.5, 0.51, 1.0;
  const auto b = nn::binarize(x);
  CHECK(b(0, 0) == 0);
  CHECK(b(0, 1) == 0);
  CHECK(b(0, 2) == 1);
  CHECK(b(0, 3) == 1);
}

}  // TEST_SUITE
