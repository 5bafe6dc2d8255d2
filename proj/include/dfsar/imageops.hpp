#pragma once

#include <complex>
#include <vector>

#include "dfsar/image.hpp"

namespace dfsar::imageops {

// ---------------------------------------------------------------- SSIM

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.0;
  double c2 = 0.0;
  /// Added to every value first. The luminance term assumes non-negative
  /// intensities, so data in [lo, hi] is moved to [0, L].
  double offset = 0.0;

  /// 11×11 Gaussian window (σ = 1.5) with c1 = (0.01·L)², c2 = (0.03·L)², L = range width, offset −lo.
  static SsimOptions for_range(const ValueRange& r);
};

/// Normalized window×window Gaussian weights (row-major).
std::vector<double> gaussian_window(int size, double sigma);

/// Mean SSIM over all fully-contained windows, averaged per channel. Symmetric
/// in (a, b) and clamped into [-1, 1].
double ssim(const ImageTile& a, const ImageTile& b, const SsimOptions& opts);

// ---------------------------------------------------------------- features

/// G[i,j] = Σ_{h,w} F[i,h,w]·F[j,h,w] / (C·H·W) for a C×H×W feature.
Tensor gram_matrix(const Tensor& feature);

struct Spectrum {
  int height = 0;
  int width = 0;
  std::vector<std::complex<double>> bins;  // row-major, unnormalized forward DFT
  std::complex<double> at(int u, int v) const { return bins[static_cast<std::size_t>(u) * width + v]; }
};

/// 2-D DFT of a single-channel tile.
Spectrum spectrum(const ImageTile& tile);
/// Forward (sign -1) or backward (sign +1, unnormalized) DFT of an H×W complex grid.
std::vector<std::complex<double>> dft2(const std::vector<std::complex<double>>& in, int h, int w, bool inverse);

// ---------------------------------------------------------------- geometry

/// Reflect-101 index into [0, n) for any integer i.
int mirror_index(int i, int n);

ImageTile crop(const ImageTile& tile, int y, int x, int h, int w);
ImageTile resize_bilinear(const ImageTile& tile, int h, int w);
/// Reflect-pads on the bottom/right up to h×w.
ImageTile reflect_pad(const ImageTile& tile, int h, int w);

struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int tile_size = 0;
  int overlap = 0;
  int source_height = 0;
  int source_width = 0;
  std::vector<ImageTile> patches;  // row-major

  int stride() const { return tile_size - overlap; }
  const ImageTile& at(int r, int c) const { return patches[static_cast<std::size_t>(r) * cols + c]; }
  ImageTile& at(int r, int c) { return patches[static_cast<std::size_t>(r) * cols + c]; }
};

/// Number of tiles needed along an axis of length n.
int tile_count(int n, int tile_size, int overlap);

PatchGrid partition(const ImageTile& image, int tile_size, int overlap);
/// Blends overlaps with linear feathering and crops to the source dimensions.
ImageTile stitch(const PatchGrid& grid);

}  // namespace dfsar::imageops
