#include "dfsar/dataio.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "dfsar/error.hpp"
#include "dfsar/imageops.hpp"

namespace dfsar::dataio {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<ManifestEntry> Manifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

namespace {

std::string resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

ManifestEntry parse_row(const nlohmann::json& row, const fs::path& base, int line) {
  if (!row.is_object()) throw ValidationError("row is not a JSON object");
  for (const char* key : {"sar_path", "eo_path", "split", "acquisition_gap_days"})
    if (!row.contains(key)) throw ValidationError(std::string("missing key '") + key + "'");
  if (!row["sar_path"].is_string() || !row["eo_path"].is_string() || !row["split"].is_string())
    throw ValidationError("sar_path, eo_path and split must be strings");
  if (!row["acquisition_gap_days"].is_number()) throw ValidationError("acquisition_gap_days must be a number");

  ManifestEntry e;
  e.line = line;
  e.sar_path = resolve(base, row["sar_path"].get<std::string>());
  e.eo_path = resolve(base, row["eo_path"].get<std::string>());
  e.split = parse_split(row["split"].get<std::string>());
  e.acquisition_gap_days = row["acquisition_gap_days"].get<double>();
  if (!std::isfinite(e.acquisition_gap_days) || e.acquisition_gap_days < 0.0)
    throw ValidationError("acquisition_gap_days must be a non-negative number");
  if (e.split == Split::train && e.acquisition_gap_days > kMaxTrainingGapDays)
    throw ValidationError("acquisition gap of " + std::to_string(e.acquisition_gap_days) +
                          " days exceeds the 1-day training limit");

  RawImage sar, eo;
  try {
    sar = read_png(e.sar_path);
  } catch (const Error& err) {
    throw ValidationError(std::string("unresolvable sar_path: ") + err.what());
  }
  try {
    eo = read_png(e.eo_path);
  } catch (const Error& err) {
    throw ValidationError(std::string("unresolvable eo_path: ") + err.what());
  }
  if (sar.width != eo.width || sar.height != eo.height)
    throw ValidationError("dimension mismatch: SAR " + std::to_string(sar.width) + "x" + std::to_string(sar.height) +
                          " vs EO " + std::to_string(eo.width) + "x" + std::to_string(eo.height));
  return e;
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingAssetError("manifest", path);
  const fs::path base = fs::path(path).parent_path();
  Manifest m;
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.entries.push_back(parse_row(nlohmann::json::parse(text), base, line));
    } catch (const nlohmann::json::exception& err) {
      m.rejected.push_back({line, std::string("malformed JSON: ") + err.what()});
    } catch (const ValidationError& err) {
      m.rejected.push_back({line, err.what()});
    }
  }
  return m;
}

ImageTile load_tile(const std::string& path, ValueRange target_range) {
  return from_raw(read_png(path), target_range);
}

void save_tile(const std::string& path, const ImageTile& tile) { write_png(path, to_raw(tile)); }

AugmentDraw draw_augment(std::uint64_t seed, const AugmentConfig& cfg) {
  DFSAR_REQUIRE(cfg.crop > 0 && cfg.resize_to >= cfg.crop, "augment: resize_to must be >= crop");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> offset(0, cfg.resize_to - cfg.crop);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  AugmentDraw d;
  d.crop_y = offset(rng);
  d.crop_x = offset(rng);
  d.flip = coin(rng) < cfg.flip_probability;
  return d;
}

ImageTile hflip(const ImageTile& tile) {
  Tensor t(tile.pixels().shape());
  const int h = tile.height(), w = tile.width();
  for (int c = 0; c < tile.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t[(static_cast<std::size_t>(c) * h + y) * w + x] = tile.at(c, y, w - 1 - x);
  return ImageTile(std::move(t), tile.range());
}

ImageTile apply_augment(const ImageTile& tile, const AugmentDraw& draw, const AugmentConfig& cfg) {
  DFSAR_REQUIRE(tile.height() >= cfg.crop && tile.width() >= cfg.crop,
                "augment: tile " + std::to_string(tile.height()) + "x" + std::to_string(tile.width()) +
                    " smaller than crop size " + std::to_string(cfg.crop));
  ImageTile resized = imageops::resize_bilinear(tile, cfg.resize_to, cfg.resize_to);
  ImageTile cropped = imageops::crop(resized, draw.crop_y, draw.crop_x, cfg.crop, cfg.crop);
  return draw.flip ? hflip(cropped) : cropped;
}

std::pair<ImageTile, ImageTile> augment(const ImageTile& sar, const ImageTile& eo, std::uint64_t seed,
                                        const AugmentConfig& cfg) {
  DFSAR_REQUIRE(sar.height() == eo.height() && sar.width() == eo.width(),
                "augment: SAR and EO tiles differ in size");
  const AugmentDraw d = draw_augment(seed, cfg);
  return {apply_augment(sar, d, cfg), apply_augment(eo, d, cfg)};
}

}  // namespace dfsar::dataio
