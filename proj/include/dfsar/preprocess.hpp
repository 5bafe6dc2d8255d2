#pragma once

#include <array>
#include <optional>

#include "dfsar/image.hpp"

namespace dfsar::preprocess {

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

/// Lee filter (local linear MMSE) applied per channel with reflect borders.
/// Noise variance is the mean local variance of the flattest decile of windows.
ImageTile despeckle(const ImageTile& tile, int window = 5);

/// Estimated noise variance used by `despeckle` for one channel.
double estimate_noise_variance(const ImageTile& channel, int window);

struct CannyOptions {
  double low = 0.1;
  double high = 0.2;
  double sigma = 1.4;
};

/// Binary {0,1} edge map. Gradients are taken on the input rescaled from its
/// value range onto [0,1]; thresholds apply to the Sobel magnitude.
ImageTile canny_edges(const ImageTile& gray, const CannyOptions& opts = {});
/// Sobel gradient magnitude after Gaussian smoothing (exposed for tests).
Tensor gradient_magnitude(const ImageTile& gray, double sigma);

ImageTile to_grayscale(const ImageTile& rgb, const std::array<double, 3>& weights = kLumaWeights);

struct PreprocessConfig {
  int despeckle_window = 5;
  CannyOptions canny;
  std::array<double, 3> gray_weights = kLumaWeights;
};

/// The three network inputs derived from one SAR tile.
struct SampleTriplet {
  ImageTile structure;  ///< 2×H×W: channel 0 edge ∈ {0,1}, channel 1 grayscale
  ImageTile texture;    ///< 3×H×W despeckled RGB
  std::optional<ImageTile> target;

  int height() const { return texture.height(); }
  int width() const { return texture.width(); }
};

/// Replicates a single-channel tile to three channels; passes RGB through.
ImageTile ensure_rgb(const ImageTile& tile);

/// despeckle → grayscale → canny; structure = [edge; gray], texture = despeckled RGB.
SampleTriplet assemble_triplet(const ImageTile& sar_rgb, std::optional<ImageTile> eo_rgb,
                               const PreprocessConfig& cfg = {});

}  // namespace dfsar::preprocess
