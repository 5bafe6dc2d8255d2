#include "dfsar/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dfsar/error.hpp"
#include "dfsar/imageops.hpp"

namespace dfsar::preprocess {

namespace {

struct LocalStats {
  std::vector<double> mean, var;
};

LocalStats local_stats(const ImageTile& ch, int window) {
  const int h = ch.height(), w = ch.width(), r = window / 2;
  LocalStats s{std::vector<double>(static_cast<std::size_t>(h) * w), std::vector<double>(static_cast<std::size_t>(h) * w)};
  const double n = static_cast<double>(window) * window;
#pragma omp parallel for schedule(static) if (h * w > 16384)
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sum = 0.0, sq = 0.0;
      for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
          const double v = ch.at(0, imageops::mirror_index(y + i, h), imageops::mirror_index(x + j, w));
          sum += v;
          sq += v * v;
        }
      const double mu = sum / n;
      s.mean[static_cast<std::size_t>(y) * w + x] = mu;
      s.var[static_cast<std::size_t>(y) * w + x] = std::max(0.0, sq / n - mu * mu);
    }
  return s;
}

double flattest_decile_mean(std::vector<double> variances) {
  const std::size_t k = std::max<std::size_t>(1, variances.size() / 10);
  std::nth_element(variances.begin(), variances.begin() + (k - 1), variances.end());
  std::sort(variances.begin(), variances.begin() + k);
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) acc += variances[i];
  return acc / static_cast<double>(k);
}

void check_window(int window) {
  DFSAR_REQUIRE(window >= 3 && window % 2 == 1, "despeckle: window must be odd and >= 3, got " + std::to_string(window));
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += (k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma)));
  for (double& v : k) v /= total;
  return k;
}

}  // namespace

double estimate_noise_variance(const ImageTile& channel, int window) {
  check_window(window);
  DFSAR_REQUIRE(channel.channels() == 1, "estimate_noise_variance: single channel expected");
  return flattest_decile_mean(local_stats(channel, window).var);
}

ImageTile despeckle(const ImageTile& tile, int window) {
  check_window(window);
  const int h = tile.height(), w = tile.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out(tile.pixels().shape());
  for (int c = 0; c < tile.channels(); ++c) {
    const ImageTile ch = tile.channel(c);
    const LocalStats s = local_stats(ch, window);
    const double noise = flattest_decile_mean(s.var);
    for (std::size_t i = 0; i < plane; ++i) {
      const double local = s.var[i];
      const double gain = local > 0.0 ? std::max(0.0, (local - noise) / local) : 0.0;
      const double v = s.mean[i] + gain * (ch.pixels()[i] - s.mean[i]);
      out[c * plane + i] = std::clamp(v, tile.range().lo, tile.range().hi);
    }
  }
  return ImageTile(std::move(out), tile.range());
}

Tensor gradient_magnitude(const ImageTile& gray, double sigma) {
  DFSAR_REQUIRE(gray.channels() == 1, "canny: single-channel input required, got " + std::to_string(gray.channels()));
  DFSAR_REQUIRE(sigma > 0.0, "canny: sigma must be positive");
  const int h = gray.height(), w = gray.width();
  const ValueRange r = gray.range();
  auto clampi = [](int v, int n) { return std::clamp(v, 0, n - 1); };

  std::vector<double> unit(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = (gray.pixels()[i] - r.lo) / r.width();

  const std::vector<double> k = gaussian_kernel_1d(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(unit.size()), smooth(unit.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * unit[static_cast<std::size_t>(y) * w + clampi(x + i, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[static_cast<std::size_t>(clampi(y + i, h)) * w + x];
      smooth[static_cast<std::size_t>(y) * w + x] = acc;
    }

  Tensor mag({2, h, w});  // channel 0 magnitude, channel 1 direction angle
  auto s = [&](int y, int x) { return smooth[static_cast<std::size_t>(clampi(y, h)) * w + clampi(x, w)]; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (s(y - 1, x + 1) + 2 * s(y, x + 1) + s(y + 1, x + 1)) - (s(y - 1, x - 1) + 2 * s(y, x - 1) + s(y + 1, x - 1));
      const double gy = (s(y + 1, x - 1) + 2 * s(y + 1, x) + s(y + 1, x + 1)) - (s(y - 1, x - 1) + 2 * s(y - 1, x) + s(y - 1, x + 1));
      mag[static_cast<std::size_t>(y) * w + x] = std::hypot(gx, gy);
      mag[static_cast<std::size_t>(h) * w + static_cast<std::size_t>(y) * w + x] = std::atan2(gy, gx);
    }
  return mag;
}

ImageTile canny_edges(const ImageTile& gray, const CannyOptions& opts) {
  DFSAR_REQUIRE(gray.channels() == 1, "canny: single-channel input required, got " + std::to_string(gray.channels()));
  DFSAR_REQUIRE(opts.low >= 0.0 && opts.low < opts.high, "canny: thresholds must satisfy 0 <= low < high");
  const int h = gray.height(), w = gray.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const Tensor mg = gradient_magnitude(gray, opts.sigma);
  auto m = [&](int y, int x) { return mg[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)]; };

  // Non-maximum suppression; ties resolve toward the lower-index neighbor.
  std::vector<double> thin(plane, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = m(y, x);
      if (v == 0.0) continue;
      double angle = mg[plane + static_cast<std::size_t>(y) * w + x] * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      int dy = 0, dx = 0;
      if (angle < 22.5 || angle >= 157.5) dx = 1;
      else if (angle < 67.5) dy = dx = 1;
      else if (angle < 112.5) dy = 1;
      else { dy = 1; dx = -1; }
      if (v > m(y - dy, x - dx) && v >= m(y + dy, x + dx)) thin[static_cast<std::size_t>(y) * w + x] = v;
    }

  // Hysteresis: grow strong seeds through 8-connected weak pixels.
  Tensor edges({1, h, w});
  std::vector<int> stack;
  for (std::size_t i = 0; i < plane; ++i)
    if (thin[i] >= opts.high) {
      edges[i] = 1.0;
      stack.push_back(static_cast<int>(i));
    }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const int y = i / w, x = i % w;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
        if (edges[j] == 0.0 && thin[j] >= opts.low && thin[j] > 0.0) {
          edges[j] = 1.0;
          stack.push_back(static_cast<int>(j));
        }
      }
  }
  return ImageTile(std::move(edges), ValueRange{0.0, 1.0});
}

ImageTile to_grayscale(const ImageTile& rgb, const std::array<double, 3>& weights) {
  DFSAR_REQUIRE(rgb.channels() == 3, "to_grayscale: 3 channels required, got " + std::to_string(rgb.channels()));
  DFSAR_REQUIRE(std::all_of(weights.begin(), weights.end(), [](double v) { return v >= 0.0; }),
                "to_grayscale: weights must be non-negative");
  const double total = weights[0] + weights[1] + weights[2];
  DFSAR_REQUIRE(std::abs(total - 1.0) < 1e-9, "to_grayscale: weights must sum to 1");
  const std::size_t plane = static_cast<std::size_t>(rgb.height()) * rgb.width();
  Tensor out({1, rgb.height(), rgb.width()});
  const Tensor& p = rgb.pixels();
  for (std::size_t i = 0; i < plane; ++i) {
    const double v = weights[0] * p[i] + weights[1] * p[plane + i] + weights[2] * p[2 * plane + i];
    out[i] = std::clamp(v, rgb.range().lo, rgb.range().hi);
  }
  return ImageTile(std::move(out), rgb.range());
}

ImageTile ensure_rgb(const ImageTile& tile) {
  if (tile.channels() == 3) return tile;
  DFSAR_REQUIRE(tile.channels() == 1, "expected a 1- or 3-channel tile, got " + std::to_string(tile.channels()));
  const std::size_t plane = static_cast<std::size_t>(tile.height()) * tile.width();
  Tensor out({3, tile.height(), tile.width()});
  for (int c = 0; c < 3; ++c) std::copy_n(tile.pixels().data(), plane, out.data() + c * plane);
  return ImageTile(std::move(out), tile.range());
}

SampleTriplet assemble_triplet(const ImageTile& sar_rgb, std::optional<ImageTile> eo_rgb, const PreprocessConfig& cfg) {
  DFSAR_REQUIRE(sar_rgb.channels() == 3, "assemble_triplet: SAR input must be 3-channel");
  if (eo_rgb) {
    DFSAR_REQUIRE(eo_rgb->channels() == 3, "assemble_triplet: EO target must be 3-channel");
    DFSAR_REQUIRE(eo_rgb->height() == sar_rgb.height() && eo_rgb->width() == sar_rgb.width(),
                  "assemble_triplet: SAR and EO sizes differ");
  }
  ImageTile texture = despeckle(sar_rgb, cfg.despeckle_window);
  ImageTile gray = to_grayscale(texture, cfg.gray_weights);
  ImageTile edge = canny_edges(gray, cfg.canny);

  const std::size_t plane = static_cast<std::size_t>(gray.height()) * gray.width();
  Tensor structure({2, gray.height(), gray.width()});
  std::copy_n(edge.pixels().data(), plane, structure.data());
  std::copy_n(gray.pixels().data(), plane, structure.data() + plane);
  return SampleTriplet{ImageTile(std::move(structure), ValueRange{-1.0, 1.0}), std::move(texture), std::move(eo_rgb)};
}

}  // namespace dfsar::preprocess
