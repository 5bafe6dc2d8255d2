#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dfsar/discriminator.hpp"
#include "dfsar/error.hpp"
#include "support/gradcheck.hpp"

using namespace dfsar;
using testsupport::random_tensor;

namespace {

Eigen::MatrixXd matrix_view(const Tensor& w) {
  const int rows = w.dim(0);
  const int cols = static_cast<int>(w.size() / rows);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r) * cols + c];
  return m;
}

double sigma_max(const Tensor& w) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(matrix_view(w)).singularValues()(0);
}

Tensor binary_edges(const Shape& s, std::uint64_t seed) {
  Tensor t = random_tensor(s, seed);
  for (double& v : t.values()) v = v > 0.8 ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("spectral norm of diag(3, 1) converges to diag(1, 1/3)") {
  nn::ParameterSet ps;
  std::mt19937_64 rng(1);
  const ag::Var w = ps.add_param("w", Tensor({2, 2, 1, 1}, std::vector<double>{3.0, 0.0, 0.0, 1.0}));
  nn::SpectralNorm sn(ps, "w", w, rng, 50);
  CHECK(sn.sigma() == doctest::Approx(3.0).epsilon(1e-9));
  const Tensor n = sn.normalized().value();
  CHECK(n[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(n[1]) < 1e-9);
  CHECK(std::abs(n[2]) < 1e-9);
  CHECK(n[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("spectral norm leaves a unit-σ weight unchanged") {
  nn::ParameterSet ps;
  std::mt19937_64 rng(2);
  // Rotation matrix: both singular values are 1.
  const double c = std::cos(0.3), s = std::sin(0.3);
  const ag::Var w = ps.add_param("w", Tensor({2, 2}, std::vector<double>{c, -s, s, c}));
  nn::SpectralNorm sn(ps, "w", w, rng, 50);
  const Tensor n = sn.normalized().value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(n[i] - w.value()[i]) < 1e-6);
}

TEST_CASE("power iteration estimate rises monotonically to the SVD oracle") {
  // The rate depends on σ₂/σ₁; these Gaussian draws have ratios up to 0.97,
  // so the check runs to convergence rather than a fixed budget.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    nn::ParameterSet ps;
    std::mt19937_64 rng(seed);
    const ag::Var w = ps.add_param("w", random_tensor({8, 4, 3, 3}, seed + 10));
    const double oracle = sigma_max(w.value());
    nn::SpectralNorm sn(ps, "w", w, rng, 0);
    double prev = 0.0;
    for (int i = 0; i < 400; ++i) {
      sn.power_iteration();
      CHECK(sn.sigma() >= prev - 1e-12);
      CHECK(sn.sigma() <= oracle + 1e-9);
      prev = sn.sigma();
    }
    CHECK(std::abs(sn.sigma() - oracle) < 1e-9);
  }
}

TEST_CASE("zero-initialized residual branch returns the shortcut") {
  nn::ParameterSet ps;
  std::mt19937_64 rng(3);
  disc::ResidualBlock block(ps, "b", 4, 8, 2, rng, 10, true);
  CHECK(block.has_projection());
  const ag::Var x(random_tensor({2, 4, 8, 8}, 4));
  for (auto mode : {disc::Mode::eval, disc::Mode::frozen}) {
    const ag::Var y = block(x, mode);
    CHECK(y.shape() == Shape{2, 8, 4, 4});
    const ag::Var s = block.shortcut(x, mode);
    for (std::size_t i = 0; i < y.value().size(); ++i) CHECK(std::abs(y.value()[i] - s.value()[i]) < 1e-12);
  }
}

TEST_CASE("residual block stride arithmetic") {
  nn::ParameterSet ps;
  std::mt19937_64 rng(4);
  disc::ResidualBlock block(ps, "b", 64, 128, 2, rng, 1);
  ag::NoGradGuard guard;
  CHECK(block(ag::Var(random_tensor({1, 64, 32, 32}, 1)), disc::Mode::eval).shape() == Shape{1, 128, 16, 16});
  disc::ResidualBlock same(ps, "s", 8, 8, 1, rng, 1);
  CHECK_FALSE(same.has_projection());
}

TEST_CASE("reference discriminator produces a 16×16 map") {
  const auto a = disc::DiscriminatorArch::reference();
  CHECK(a.map_size() == 16);
  CHECK(a.block_channels() == std::vector<int>{64, 128, 256, 512});
  CHECK(disc::DiscriminatorArch::from_json(a.to_json()) == a);
}

TEST_CASE("probability maps stay inside (0, 1) and are deterministic") {
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::toy();
  arch.sn_warmup = 20;
  const disc::Discriminator d(arch, 5);
  const Tensor img = random_tensor({3, 64, 64}, 1, 0.5);
  const Tensor edge = binary_edges({1, 64, 64}, 2);
  const Tensor gray = random_tensor({1, 64, 64}, 3, 0.5);
  const auto a = d.discriminate(img, edge, gray);
  const auto b = d.discriminate(img, edge, gray);
  CHECK(a.height() == 4);
  CHECK(a.width() == 4);
  CHECK(a.probs.storage() == b.probs.storage());
  for (double p : a.probs.values()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  Tensor huge = img;
  for (double& v : huge.values()) v *= 1e6;
  const auto scaled = d.discriminate(huge, edge, gray);
  for (double p : scaled.probs.values()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("untrained discriminator is not saturated") {
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::toy();
  arch.input_size = 32;
  double total = 0.0;
  int count = 0;
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    const disc::Discriminator d(arch, 1000 + draw);
    const auto m = d.discriminate(random_tensor({3, 32, 32}, draw, 0.5), binary_edges({1, 32, 32}, draw + 7),
                                  random_tensor({1, 32, 32}, draw + 9, 0.5));
    for (double p : m.probs.values()) total += p;
    count += static_cast<int>(m.probs.size());
  }
  const double mean = total / count;
  CHECK(mean > 0.2);
  CHECK(mean < 0.8);
}

TEST_CASE("normalized weights stay within 1 + 1e-2 after optimizer steps") {
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::toy();
  arch.input_size = 32;
  disc::Discriminator d(arch, 9);
  nn::Adam adam(d.params(), {});
  for (int step = 0; step < 3; ++step) {
    d.params().zero_grad();
    const ag::Var p = d.forward(ag::Var(random_tensor({2, 3, 32, 32}, step, 0.5)),
                                ag::Var(binary_edges({2, 1, 32, 32}, step + 20)),
                                ag::Var(random_tensor({2, 1, 32, 32}, step + 40, 0.5)), disc::Mode::train);
    ag::backward(ag::mean(p));
    adam.step();
    for (const auto* c : d.spectral_convs()) CHECK(sigma_max(c->spectral_norm().normalized().value()) <= 1.0 + 1e-2);
  }
}

TEST_CASE("frozen mode leaves parameters and buffers untouched") {
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::toy();
  arch.input_size = 32;
  const disc::Discriminator d(arch, 2);
  const auto before = d.params().digest(true);
  d.forward(ag::Var(random_tensor({1, 3, 32, 32}, 1)), ag::Var(binary_edges({1, 1, 32, 32}, 2)),
            ag::Var(random_tensor({1, 1, 32, 32}, 3)), disc::Mode::frozen);
  CHECK(d.params().digest(true) == before);
  d.forward(ag::Var(random_tensor({1, 3, 32, 32}, 1)), ag::Var(binary_edges({1, 1, 32, 32}, 2)),
            ag::Var(random_tensor({1, 1, 32, 32}, 3)), disc::Mode::train);
  CHECK(d.params().digest(true) != before);
  CHECK(d.params().digest(false) == d.params().digest(false));
}

TEST_CASE("discriminator shape errors") {
  const disc::Discriminator d(disc::DiscriminatorArch::toy(), 1);
  CHECK_THROWS_AS(d.discriminate(Tensor({3, 64, 64}), Tensor({1, 64, 32}), Tensor({1, 64, 64})), ValidationError);
  CHECK_THROWS_AS(d.discriminate(Tensor({1, 64, 64}), Tensor({1, 64, 64}), Tensor({1, 64, 64})), ValidationError);
  CHECK_THROWS_AS(d.discriminate(Tensor({3, 40, 40}), Tensor({1, 40, 40}), Tensor({1, 40, 40})), ValidationError);
}
