#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfsar/tensor.hpp"

namespace dfsar {

struct ValueRange {
  double lo = -1.0;
  double hi = 1.0;
  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool operator==(const ValueRange&) const = default;
};

/// C×H×W raster whose pixels all lie inside `range`.
class ImageTile {
 public:
  ImageTile() = default;
  /// Throws ValidationError if a pixel falls outside the range or the tensor is not rank 3.
  ImageTile(Tensor pixels, ValueRange range = {});
  static ImageTile constant(int channels, int height, int width, double value, ValueRange range = {});

  int channels() const { return pixels_.dim(0); }
  int height() const { return pixels_.dim(1); }
  int width() const { return pixels_.dim(2); }
  const Tensor& pixels() const { return pixels_; }
  const ValueRange& range() const { return range_; }
  double at(int c, int y, int x) const { return pixels_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }
  bool empty() const { return pixels_.empty(); }

  /// 1×C×H×W copy for network input.
  Tensor as_batch() const;
  /// Extracts sample n of an N×C×H×W batch; values are clamped into `range`.
  static ImageTile from_batch(const Tensor& batch, int n, ValueRange range = {});

  ImageTile channel(int c) const;

 private:
  Tensor pixels_;
  ValueRange range_;
};

/// Stacks same-shaped tiles into N×C×H×W.
Tensor stack_tiles(const std::vector<ImageTile>& tiles);

/// 8-bit interleaved raster as stored on disk.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;  // HWC
};

/// Reads 8-bit grayscale or RGB PNG (palette/alpha/16-bit are converted).
RawImage read_png(const std::string& path);
void write_png(const std::string& path, const RawImage& image);
/// PNG bytes without touching the filesystem.
std::vector<std::uint8_t> encode_png(const RawImage& image);

/// Affine map of 8-bit storage [0,255] into `range`.
ImageTile from_raw(const RawImage& raw, ValueRange range = {});
/// Inverse affine map, rounded to nearest and clamped to [0,255].
RawImage to_raw(const ImageTile& tile);

}  // namespace dfsar
