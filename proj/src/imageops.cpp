#include "dfsar/imageops.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>

#include "dfsar/error.hpp"

namespace dfsar::imageops {

// ---------------------------------------------------------------- SSIM

SsimOptions SsimOptions::for_range(const ValueRange& r) {
  SsimOptions o;
  o.c1 = (0.01 * r.width()) * (0.01 * r.width());
  o.c2 = (0.03 * r.width()) * (0.03 * r.width());
  o.offset = -r.lo;
  return o;
}

std::vector<double> gaussian_window(int size, double sigma) {
  DFSAR_REQUIRE(size >= 1 && sigma > 0.0, "gaussian_window: invalid size or sigma");
  std::vector<double> g1(size);
  const double center = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) total += (g1[i] = std::exp(-(i - center) * (i - center) / (2.0 * sigma * sigma)));
  for (double& v : g1) v /= total;
  std::vector<double> g(static_cast<std::size_t>(size) * size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) g[i * size + j] = g1[i] * g1[j];
  return g;
}

double ssim(const ImageTile& a, const ImageTile& b, const SsimOptions& opts) {
  DFSAR_REQUIRE(a.pixels().shape() == b.pixels().shape(),
                "ssim: shape mismatch " + shape_str(a.pixels().shape()) + " vs " + shape_str(b.pixels().shape()));
  const int h = a.height(), w = a.width(), win = opts.window;
  DFSAR_REQUIRE(win >= 1 && win <= h && win <= w,
                "ssim: window " + std::to_string(win) + " does not fit a " + std::to_string(h) + "x" +
                    std::to_string(w) + " image");
  const std::vector<double> kernel = gaussian_window(win, opts.sigma);
  const int oh = h - win + 1, ow = w - win + 1;
  double channel_total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    double acc = 0.0;
#pragma omp parallel for reduction(+ : acc) schedule(static) if (oh * ow * win * win > 65536)
    for (int y = 0; y < oh; ++y) {
      double row_acc = 0.0;
      for (int x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double k = kernel[i * win + j];
            const double va = a.at(c, y + i, x + j) + opts.offset, vb = b.at(c, y + i, x + j) + opts.offset;
            ma += k * va;
            mb += k * vb;
            saa += k * va * va;
            sbb += k * vb * vb;
            sab += k * va * vb;
          }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        const double num = (2.0 * ma * mb + opts.c1) * (2.0 * cov + opts.c2);
        const double den = (ma * ma + mb * mb + opts.c1) * (var_a + var_b + opts.c2);
        row_acc += std::clamp(num / den, -1.0, 1.0);
      }
      acc += row_acc;
    }
    channel_total += acc / (static_cast<double>(oh) * ow);
  }
  return std::clamp(channel_total / a.channels(), -1.0, 1.0);
}

// ---------------------------------------------------------------- features

Tensor gram_matrix(const Tensor& feature) {
  DFSAR_REQUIRE(feature.rank() == 3 && feature.size() > 0, "gram_matrix: expects a nonempty C×H×W feature");
  const int c = feature.dim(0);
  const std::size_t hw = static_cast<std::size_t>(feature.dim(1)) * feature.dim(2);
  const double norm = static_cast<double>(c) * static_cast<double>(hw);
  Tensor g({c, c});
  for (int i = 0; i < c; ++i)
    for (int j = i; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += feature[i * hw + p] * feature[j * hw + p];
      g[i * c + j] = g[j * c + i] = acc / norm;
    }
  return g;
}

namespace {
std::mutex g_fftw_plan_mutex;
}

std::vector<std::complex<double>> dft2(const std::vector<std::complex<double>>& in, int h, int w, bool inverse) {
  DFSAR_REQUIRE(h > 0 && w > 0 && in.size() == static_cast<std::size_t>(h) * w, "dft2: size mismatch");
  std::vector<std::complex<double>> out(in.size());
  auto* src = reinterpret_cast<fftw_complex*>(const_cast<std::complex<double>*>(in.data()));
  auto* dst = reinterpret_cast<fftw_complex*>(out.data());
  fftw_plan plan;
  {
    std::lock_guard lock(g_fftw_plan_mutex);
    plan = fftw_plan_dft_2d(h, w, src, dst, inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(g_fftw_plan_mutex);
    fftw_destroy_plan(plan);
  }
  return out;
}

Spectrum spectrum(const ImageTile& tile) {
  DFSAR_REQUIRE(tile.channels() == 1, "spectrum: single-channel tile required");
  const int h = tile.height(), w = tile.width();
  std::vector<std::complex<double>> in(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = tile.pixels()[i];
  return {h, w, dft2(in, h, w, false)};
}

// ---------------------------------------------------------------- geometry

int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

ImageTile crop(const ImageTile& tile, int y, int x, int h, int w) {
  DFSAR_REQUIRE(y >= 0 && x >= 0 && h > 0 && w > 0 && y + h <= tile.height() && x + w <= tile.width(),
                "crop: window outside the tile");
  Tensor t({tile.channels(), h, w});
  for (int c = 0; c < tile.channels(); ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) t[(static_cast<std::size_t>(c) * h + i) * w + j] = tile.at(c, y + i, x + j);
  return ImageTile(std::move(t), tile.range());
}

ImageTile resize_bilinear(const ImageTile& tile, int h, int w) {
  DFSAR_REQUIRE(h > 0 && w > 0, "resize_bilinear: empty target");
  if (h == tile.height() && w == tile.width()) return tile;
  const int sh = tile.height(), sw = tile.width();
  const double ry = static_cast<double>(sh) / h, rx = static_cast<double>(sw) / w;
  Tensor t({tile.channels(), h, w});
  for (int i = 0; i < h; ++i) {
    const double fy = std::clamp((i + 0.5) * ry - 0.5, 0.0, sh - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double ay = fy - y0;
    for (int j = 0; j < w; ++j) {
      const double fx = std::clamp((j + 0.5) * rx - 0.5, 0.0, sw - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double ax = fx - x0;
      for (int c = 0; c < tile.channels(); ++c) {
        const double top = (1 - ax) * tile.at(c, y0, x0) + ax * tile.at(c, y0, x1);
        const double bot = (1 - ax) * tile.at(c, y1, x0) + ax * tile.at(c, y1, x1);
        t[(static_cast<std::size_t>(c) * h + i) * w + j] =
            std::clamp((1 - ay) * top + ay * bot, tile.range().lo, tile.range().hi);
      }
    }
  }
  return ImageTile(std::move(t), tile.range());
}

ImageTile reflect_pad(const ImageTile& tile, int h, int w) {
  DFSAR_REQUIRE(h >= tile.height() && w >= tile.width(), "reflect_pad: target smaller than tile");
  if (h == tile.height() && w == tile.width()) return tile;
  Tensor t({tile.channels(), h, w});
  for (int c = 0; c < tile.channels(); ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        t[(static_cast<std::size_t>(c) * h + i) * w + j] =
            tile.at(c, mirror_index(i, tile.height()), mirror_index(j, tile.width()));
  return ImageTile(std::move(t), tile.range());
}

int tile_count(int n, int tile_size, int overlap) {
  if (n <= tile_size) return 1;
  const int stride = tile_size - overlap;
  return 1 + (n - tile_size + stride - 1) / stride;
}

PatchGrid partition(const ImageTile& image, int tile_size, int overlap) {
  DFSAR_REQUIRE(tile_size > 0 && tile_size <= image.height() && tile_size <= image.width(),
                "partition: tile size " + std::to_string(tile_size) + " larger than image " +
                    std::to_string(image.height()) + "x" + std::to_string(image.width()));
  DFSAR_REQUIRE(overlap >= 0 && overlap < tile_size, "partition: overlap must be in [0, tile_size)");
  PatchGrid grid;
  grid.tile_size = tile_size;
  grid.overlap = overlap;
  grid.source_height = image.height();
  grid.source_width = image.width();
  grid.rows = tile_count(image.height(), tile_size, overlap);
  grid.cols = tile_count(image.width(), tile_size, overlap);
  const int stride = grid.stride();
  const ImageTile padded = reflect_pad(image, (grid.rows - 1) * stride + tile_size, (grid.cols - 1) * stride + tile_size);
  grid.patches.reserve(static_cast<std::size_t>(grid.rows) * grid.cols);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) grid.patches.push_back(crop(padded, r * stride, c * stride, tile_size, tile_size));
  return grid;
}

namespace {

// Feather weight along one axis at local coordinate t of a patch.
double feather(int t, int tile, int overlap, bool has_before, bool has_after) {
  double w = 1.0;
  if (overlap == 0) return w;
  if (has_before && t < overlap) w *= static_cast<double>(t + 1) / (overlap + 1);
  if (has_after && t >= tile - overlap) w *= static_cast<double>(tile - t) / (overlap + 1);
  return w;
}

}  // namespace

ImageTile stitch(const PatchGrid& grid) {
  DFSAR_REQUIRE(grid.rows > 0 && grid.cols > 0 &&
                    grid.patches.size() == static_cast<std::size_t>(grid.rows) * grid.cols,
                "stitch: grid is not well formed");
  const int t = grid.tile_size, stride = grid.stride();
  const int channels = grid.patches.front().channels();
  const ValueRange range = grid.patches.front().range();
  for (const auto& p : grid.patches)
    DFSAR_REQUIRE(p.height() == t && p.width() == t && p.channels() == channels,
                  "stitch: inconsistent patch shapes");
  const int ph = (grid.rows - 1) * stride + t, pw = (grid.cols - 1) * stride + t;
  DFSAR_REQUIRE(grid.source_height <= ph && grid.source_width <= pw, "stitch: source larger than grid coverage");

  // Running weighted mean: out += (w / W)(p - out). Equal contributions leave the value bit-exact.
  Tensor out({channels, ph, pw});
  std::vector<double> weight(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const ImageTile& p = grid.at(r, c);
      for (int i = 0; i < t; ++i) {
        const double wy = feather(i, t, grid.overlap, r > 0, r + 1 < grid.rows);
        for (int j = 0; j < t; ++j) {
          const double wgt = wy * feather(j, t, grid.overlap, c > 0, c + 1 < grid.cols);
          const int y = r * stride + i, x = c * stride + j;
          double& acc_w = weight[static_cast<std::size_t>(y) * pw + x];
          acc_w += wgt;
          const double frac = wgt / acc_w;
          for (int ch = 0; ch < channels; ++ch) {
            double& o = out[(static_cast<std::size_t>(ch) * ph + y) * pw + x];
            o += frac * (p.at(ch, i, j) - o);
          }
        }
      }
    }
  Tensor cropped({channels, grid.source_height, grid.source_width});
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < grid.source_height; ++y)
      for (int x = 0; x < grid.source_width; ++x)
        cropped[(static_cast<std::size_t>(ch) * grid.source_height + y) * grid.source_width + x] =
            std::clamp(out[(static_cast<std::size_t>(ch) * ph + y) * pw + x], range.lo, range.hi);
  return ImageTile(std::move(cropped), range);
}

}  // namespace dfsar::imageops
