#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <numbers>

#include "dfsar/error.hpp"
#include "dfsar/imageops.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"

using namespace dfsar;
namespace io = dfsar::imageops;

TEST_CASE("ssim of an image with itself is one") {
  const ImageTile x = testsupport::noise_image(3, 24, 24, 1);
  CHECK(io::ssim(x, x, io::SsimOptions::for_range(x.range())) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim is symmetric and bounded") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ImageTile a = testsupport::noise_image(1, 16, 16, 2 * s);
    const ImageTile b = testsupport::noise_image(1, 16, 16, 2 * s + 1);
    const auto o = io::SsimOptions::for_range(a.range());
    const double ab = io::ssim(a, b, o), ba = io::ssim(b, a, o);
    CHECK(std::abs(ab - ba) <= 1e-12);
    CHECK(ab >= -1.0);
    CHECK(ab <= 1.0);
    CHECK(ab < 1.0);
  }
}

TEST_CASE("ssim of two constants matches the closed form") {
  const ImageTile a = ImageTile::constant(1, 8, 8, 0.5);
  const ImageTile b = ImageTile::constant(1, 8, 8, 0.25);
  io::SsimOptions o;
  o.window = 8;
  o.c1 = 1e-4;
  o.c2 = 9e-4;
  const double m1 = 0.5, m2 = 0.25;
  const double expected = ((2 * m1 * m2 + o.c1) * o.c2) / ((m1 * m1 + m2 * m2 + o.c1) * o.c2);
  CHECK(std::abs(io::ssim(a, b, o) - expected) < 1e-9);
  // The same pair on [-1, 1] is evaluated at 1.5 and 1.25.
  const auto r = io::SsimOptions::for_range({-1.0, 1.0});
  io::SsimOptions shifted = r;
  shifted.window = 8;
  const double s1 = 1.5, s2 = 1.25;
  const double closed = (2 * s1 * s2 + r.c1) / (s1 * s1 + s2 * s2 + r.c1);
  CHECK(std::abs(io::ssim(a, b, shifted) - closed) < 1e-9);
}

TEST_CASE("ssim reference constants scale with the range width") {
  const auto o = io::SsimOptions::for_range({-1.0, 1.0});
  CHECK(o.window == 11);
  CHECK(o.sigma == 1.5);
  CHECK(o.c1 == doctest::Approx(std::pow(0.02, 2)));
  CHECK(o.c2 == doctest::Approx(std::pow(0.06, 2)));
  CHECK(o.offset == 1.0);
  const auto w = io::gaussian_window(11, 1.5);
  double total = 0.0;
  for (double v : w) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim rejects mismatched shapes") {
  CHECK_THROWS_AS(io::ssim(ImageTile::constant(1, 16, 16, 0), ImageTile::constant(1, 16, 15, 0),
                           io::SsimOptions::for_range({})),
                  ValidationError);
}

TEST_CASE("gram matrix hand values") {
  CHECK(io::gram_matrix(Tensor({3, 4, 4}, 0.0)).max_abs() == 0.0);
  const Tensor g = io::gram_matrix(Tensor({1, 2, 2}, 1.0));
  CHECK(g.shape() == Shape{1, 1});
  CHECK(g[0] == 1.0);
}

TEST_CASE("gram matrix is symmetric positive semidefinite") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor f = testsupport::random_tensor({6, 5, 7}, s);
    const Tensor g = io::gram_matrix(f);
    Eigen::MatrixXd m(6, 6);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) m(i, j) = g[i * 6 + j];
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    CHECK(es.eigenvalues().minCoeff() >= -1e-9);
    // Direct sum oracle for one entry.
    double acc = 0.0;
    for (int k = 0; k < 35; ++k) acc += f[1 * 35 + k] * f[4 * 35 + k];
    CHECK(g[1 * 6 + 4] == doctest::Approx(acc / (6.0 * 35.0)).epsilon(1e-12));
  }
}

TEST_CASE("spectrum of a constant is a DC spike") {
  const auto s = io::spectrum(ImageTile::constant(1, 6, 4, 0.5));
  CHECK(std::abs(s.at(0, 0) - std::complex<double>(0.5 * 24, 0)) < 1e-12);
  for (int u = 0; u < 6; ++u)
    for (int v = 0; v < 4; ++v)
      if (u || v) CHECK(std::abs(s.at(u, v)) < 1e-12);
}

TEST_CASE("spectrum of an impulse is flat") {
  Tensor t({1, 8, 8}, 0.0);
  t[0] = 1.0;
  const auto s = io::spectrum(ImageTile(t));
  for (const auto& b : s.bins) CHECK(std::abs(b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("spectrum satisfies Parseval and matches a direct DFT") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ImageTile x = testsupport::noise_image(1, 8, 8, seed);
    const auto s = io::spectrum(x);
    double space = 0.0, freq = 0.0;
    for (double v : x.pixels().values()) space += v * v;
    for (const auto& b : s.bins) freq += std::norm(b);
    CHECK(std::abs(space - freq / 64.0) <= 1e-6 * space);
    for (int u : {1, 3})
      for (int v : {0, 5}) {
        std::complex<double> acc = 0;
        for (int y = 0; y < 8; ++y)
          for (int xx = 0; xx < 8; ++xx)
            acc += x.at(0, y, xx) * std::polar(1.0, -2 * std::numbers::pi * (u * y + v * xx) / 8.0);
        CHECK(std::abs(acc - s.at(u, v)) < 1e-10);
      }
  }
}

TEST_CASE("inverse dft undoes the forward transform up to H·W") {
  std::vector<std::complex<double>> in;
  for (int i = 0; i < 15; ++i) in.emplace_back(std::sin(i), std::cos(3 * i));
  const auto back = io::dft2(io::dft2(in, 3, 5, false), 3, 5, true);
  for (int i = 0; i < 15; ++i) CHECK(std::abs(back[i] / 15.0 - in[i]) < 1e-12);
}

TEST_CASE("partition of exact multiples and identity grids") {
  const ImageTile x = testsupport::noise_image(3, 512, 512, 1);
  const auto g = io::partition(x, 256, 0);
  CHECK(g.rows == 2);
  CHECK(g.cols == 2);
  CHECK(g.at(1, 0).at(2, 5, 7) == x.at(2, 256 + 5, 7));
  const ImageTile y = testsupport::noise_image(1, 256, 256, 2);
  const auto one = io::partition(y, 256, 0);
  CHECK(one.rows * one.cols == 1);
  CHECK(one.patches[0].pixels().storage() == y.pixels().storage());
}

TEST_CASE("partition reflect-pads the remainder and stitch crops back exactly") {
  const ImageTile x = testsupport::noise_image(2, 300, 300, 3);
  const auto g = io::partition(x, 256, 0);
  CHECK(g.rows == 2);
  CHECK(g.cols == 2);
  CHECK(g.source_height == 300);
  CHECK(g.source_width == 300);
  // Row 300 of the padded source mirrors row 298.
  CHECK(g.at(1, 0).at(0, 300 - 256, 10) == x.at(0, 298, 10));
  CHECK(io::stitch(g).pixels().storage() == x.pixels().storage());
}

TEST_CASE("stitch round trip is exact for assorted sizes at zero overlap") {
  int seed = 0;
  for (auto [h, w, t] : {std::tuple{64, 64, 16}, {70, 33, 32}, {17, 40, 17}, {100, 129, 64}}) {
    const ImageTile x = testsupport::noise_image(3, h, w, ++seed);
    CHECK(io::stitch(io::partition(x, t, 0)).pixels().storage() == x.pixels().storage());
  }
}

TEST_CASE("feathering constant patches returns the constant") {
  const ImageTile x = ImageTile::constant(3, 300, 280, 0.37);
  for (int overlap : {8, 32, 100}) {
    const ImageTile s = io::stitch(io::partition(x, 128, overlap));
    CHECK(s.height() == 300);
    CHECK(s.width() == 280);
    for (double v : s.pixels().values()) CHECK(std::abs(v - 0.37) == 0.0);
  }
}

TEST_CASE("linear feather weights across a four-pixel overlap") {
  io::PatchGrid g;
  g.rows = 1;
  g.cols = 2;
  g.tile_size = 8;
  g.overlap = 4;
  g.source_height = 8;
  g.source_width = 12;
  g.patches = {ImageTile::constant(1, 8, 8, 0.0), ImageTile::constant(1, 8, 8, 1.0)};
  const ImageTile s = io::stitch(g);
  const double expected[] = {0.2, 0.4, 0.6, 0.8};
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 4; ++x) CHECK(s.at(0, y, x) == 0.0);
    for (int i = 0; i < 4; ++i) CHECK(s.at(0, y, 4 + i) == doctest::Approx(expected[i]).epsilon(1e-12));
    for (int x = 8; x < 12; ++x) CHECK(s.at(0, y, x) == 1.0);
  }
}

TEST_CASE("partition validates tile and overlap") {
  const ImageTile x = ImageTile::constant(1, 100, 100, 0.0);
  CHECK_THROWS_AS(io::partition(x, 128, 0), ValidationError);
  CHECK_THROWS_AS(io::partition(x, 64, 64), ValidationError);
  CHECK_THROWS_AS(io::partition(x, 64, -1), ValidationError);
}

TEST_CASE("mirror index and tile count") {
  CHECK(io::mirror_index(-1, 5) == 1);
  CHECK(io::mirror_index(-2, 5) == 2);
  CHECK(io::mirror_index(5, 5) == 3);
  CHECK(io::mirror_index(3, 5) == 3);
  CHECK(io::mirror_index(-1, 1) == 0);
  CHECK(io::tile_count(300, 256, 0) == 2);
  CHECK(io::tile_count(512, 256, 0) == 2);
  CHECK(io::tile_count(256, 256, 0) == 1);
}

TEST_CASE("bilinear resize preserves constants and identity size") {
  const ImageTile c = ImageTile::constant(2, 10, 13, -0.4);
  const ImageTile r = io::resize_bilinear(c, 23, 7);
  for (double v : r.pixels().values()) CHECK(v == doctest::Approx(-0.4).epsilon(1e-12));
  const ImageTile x = testsupport::noise_image(1, 9, 9, 1);
  CHECK(io::resize_bilinear(x, 9, 9).pixels().storage() == x.pixels().storage());
}
