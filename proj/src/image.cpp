#include "dfsar/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include "dfsar/error.hpp"

namespace dfsar {

ImageTile::ImageTile(Tensor pixels, ValueRange range) : pixels_(std::move(pixels)), range_(range) {
  DFSAR_REQUIRE(pixels_.rank() == 3, "ImageTile: expected C×H×W, got " + shape_str(pixels_.shape()));
  DFSAR_REQUIRE(range_.lo < range_.hi, "ImageTile: empty value range");
  for (double v : pixels_.values())
    DFSAR_REQUIRE(range_.contains(v), "ImageTile: pixel " + std::to_string(v) + " outside value range");
}

ImageTile ImageTile::constant(int channels, int height, int width, double value, ValueRange range) {
  return ImageTile(Tensor({channels, height, width}, value), range);
}

Tensor ImageTile::as_batch() const { return pixels_.reshaped({1, channels(), height(), width()}); }

ImageTile ImageTile::from_batch(const Tensor& batch, int n, ValueRange range) {
  DFSAR_REQUIRE(batch.rank() == 4 && n >= 0 && n < batch.dim(0), "from_batch: bad batch index");
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t len = static_cast<std::size_t>(c) * h * w;
  std::vector<double> data(batch.data() + n * len, batch.data() + (n + 1) * len);
  for (double& v : data) v = std::clamp(v, range.lo, range.hi);
  return ImageTile(Tensor({c, h, w}, std::move(data)), range);
}

ImageTile ImageTile::channel(int c) const {
  DFSAR_REQUIRE(c >= 0 && c < channels(), "ImageTile::channel: index out of range");
  const std::size_t plane = static_cast<std::size_t>(height()) * width();
  std::vector<double> data(pixels_.data() + c * plane, pixels_.data() + (c + 1) * plane);
  return ImageTile(Tensor({1, height(), width()}, std::move(data)), range_);
}

Tensor stack_tiles(const std::vector<ImageTile>& tiles) {
  DFSAR_REQUIRE(!tiles.empty(), "stack_tiles: no tiles");
  const Shape& s = tiles.front().pixels().shape();
  Tensor out({static_cast<int>(tiles.size()), s[0], s[1], s[2]});
  const std::size_t len = shape_numel(s);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    DFSAR_REQUIRE(tiles[i].pixels().shape() == s, "stack_tiles: tiles differ in shape");
    std::copy_n(tiles[i].pixels().data(), len, out.data() + i * len);
  }
  return out;
}

// ---------------------------------------------------------------- PNG

namespace {

struct PngReadState {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadState() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteState {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteState() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

void write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void flush_noop(png_structp) {}

}  // namespace

RawImage read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw MissingAssetError("image", path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ValidationError("unsupported or corrupt image (not a PNG): " + path);

  PngReadState st;
  st.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!st.png) throw Error("png_create_read_struct failed");
  st.info = png_create_info_struct(st.png);
  if (!st.info) throw Error("png_create_info_struct failed");

  RawImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(st.png))) throw ValidationError("corrupt PNG: " + path);
  png_init_io(st.png, fp.get());
  png_set_sig_bytes(st.png, 8);
  png_read_info(st.png, st.info);

  const png_byte color = png_get_color_type(st.png, st.info);
  const png_byte depth = png_get_bit_depth(st.png, st.info);
  if (depth == 16) png_set_strip_16(st.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(st.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(st.png);
  if (png_get_valid(st.png, st.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(st.png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(st.png, st.info, PNG_INFO_tRNS)) png_set_strip_alpha(st.png);
  png_read_update_info(st.png, st.info);

  img.width = static_cast<int>(png_get_image_width(st.png, st.info));
  img.height = static_cast<int>(png_get_image_height(st.png, st.info));
  img.channels = png_get_channels(st.png, st.info);
  if (img.channels != 1 && img.channels != 3)
    throw ValidationError("unsupported channel count " + std::to_string(img.channels) + " in " + path);
  img.data.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  png_read_image(st.png, rows.data());
  png_read_end(st.png, nullptr);
  return img;
}

std::vector<std::uint8_t> encode_png(const RawImage& image) {
  DFSAR_REQUIRE(image.channels == 1 || image.channels == 3, "encode_png: 1 or 3 channels required");
  DFSAR_REQUIRE(image.data.size() == static_cast<std::size_t>(image.width) * image.height * image.channels,
                "encode_png: buffer size mismatch");
  std::vector<std::uint8_t> out;
  PngWriteState st;
  st.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!st.png) throw Error("png_create_write_struct failed");
  st.info = png_create_info_struct(st.png);
  if (!st.info) throw Error("png_create_info_struct failed");
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(st.png))) throw Error("PNG encoding failed");
  png_set_write_fn(st.png, &out, write_to_vector, flush_noop);
  png_set_IHDR(st.png, st.info, image.width, image.height, 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(st.png, st.info);
  for (int y = 0; y < image.height; ++y)
    rows[y] = const_cast<png_bytep>(image.data.data() + static_cast<std::size_t>(y) * image.width * image.channels);
  png_write_image(st.png, rows.data());
  png_write_end(st.png, nullptr);
  return out;
}

void write_png(const std::string& path, const RawImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

ImageTile from_raw(const RawImage& raw, ValueRange range) {
  Tensor t({raw.channels, raw.height, raw.width});
  const double scale = range.width() / 255.0;
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < raw.channels; ++c) {
        const std::uint8_t v = raw.data[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c];
        // Endpoints map exactly; interior values by the affine map.
        double out = v == 255 ? range.hi : range.lo + scale * v;
        t[(static_cast<std::size_t>(c) * raw.height + y) * raw.width + x] = out;
      }
  return ImageTile(std::move(t), range);
}

RawImage to_raw(const ImageTile& tile) {
  RawImage raw{tile.width(), tile.height(), tile.channels(), {}};
  raw.data.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
  const ValueRange& r = tile.range();
  for (int c = 0; c < raw.channels; ++c)
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < raw.width; ++x) {
        const double v = (tile.at(c, y, x) - r.lo) / r.width() * 255.0;
        raw.data[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return raw;
}

}  // namespace dfsar
