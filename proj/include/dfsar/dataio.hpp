#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfsar/image.hpp"

namespace dfsar::dataio {

enum class Split { train, val, test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Maximum SAR/EO acquisition separation admitted to training, in days.
inline constexpr double kMaxTrainingGapDays = 1.0;

struct ManifestEntry {
  std::string sar_path;  ///< resolved against the manifest's directory
  std::string eo_path;
  Split split = Split::train;
  double acquisition_gap_days = 0.0;
  int line = 0;  ///< 1-based line in the manifest
};

struct ManifestDiagnostic {
  int line = 0;
  std::string reason;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<ManifestDiagnostic> rejected;

  std::vector<ManifestEntry> split(Split s) const;
};

/// Parses a JSON-lines manifest. A missing manifest throws MissingAssetError;
/// bad rows are collected in `rejected` and never abort the load.
Manifest load_manifest(const std::string& path);

/// Reads a PNG and maps storage [0,255] onto `target_range`.
ImageTile load_tile(const std::string& path, ValueRange target_range = {});
void save_tile(const std::string& path, const ImageTile& tile);

struct AugmentConfig {
  int resize_to = 286;
  int crop = 256;
  double flip_probability = 0.5;
};

/// One draw of the geometric transform applied to both members of a pair.
struct AugmentDraw {
  int crop_y = 0;
  int crop_x = 0;
  bool flip = false;
};

AugmentDraw draw_augment(std::uint64_t seed, const AugmentConfig& cfg);
/// Resize (skipped when already resize_to), crop, optional horizontal flip.
ImageTile apply_augment(const ImageTile& tile, const AugmentDraw& draw, const AugmentConfig& cfg);
ImageTile hflip(const ImageTile& tile);

/// Same transform for SAR and EO; deterministic in `seed`.
std::pair<ImageTile, ImageTile> augment(const ImageTile& sar, const ImageTile& eo, std::uint64_t seed,
                                        const AugmentConfig& cfg = {});

}  // namespace dfsar::dataio
