#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfsar/discriminator.hpp"
#include "dfsar/generator.hpp"
#include "dfsar/imageops.hpp"
#include "dfsar/preprocess.hpp"

namespace dfsar::interp {

// ---------------------------------------------------------------- Siamese

inline constexpr int kEmbeddingDim = 128;

/// Weight-tied twin encoder: conv 5×5 (64) + pool, conv 5×5 (128) + pool,
/// fully connected 512 → 256 → 128, unit-normalized output.
class SiameseEmbedder {
 public:
  SiameseEmbedder(int input_size, std::uint64_t seed);

  int input_size() const { return input_size_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// N×3×S×S → N×128 unit rows.
  ag::Var embed(const ag::Var& batch) const;
  /// Resizes to the input size, replicates gray to RGB, embeds without gradient.
  Tensor embed(const ImageTile& image) const;
  /// Image tile as a 1×3×S×S network input.
  Tensor prepare(const ImageTile& image) const;

  void save(const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  /// Throws MissingAssetError("siamese") if the file is absent.
  static std::unique_ptr<SiameseEmbedder> load(const std::string& path);

 private:
  int input_size_;
  nn::ParameterSet params_;
  nn::Conv2d conv1_, conv2_;
  nn::Linear fc1_, fc2_, fc3_;
};

/// 100·(1 − d/2) for a chord distance d ∈ [0, 2] between unit embeddings.
double confidence_from_distance(double d);
/// Percent agreement between a SAR tile and an EO tile through one embedder.
double confidence_score(const ImageTile& sar, const ImageTile& eo, const SiameseEmbedder& embedder);

// ---------------------------------------------------------------- heatmap

/// Colormap entry as 8-bit RGB for p ∈ [0, 1] (clamped).
std::array<std::uint8_t, 3> colormap(double p);

/// Bilinear resize of a 1×h×w map to 1×H×W (pixel-centre aligned).
Tensor upsample_bilinear(const Tensor& map, int height, int width);

/// Alpha blend of the colormapped probabilities over an RGB image in [-1, 1].
ImageTile overlay_heatmap(const ImageTile& translation, const disc::ProbabilityMap& map, double alpha);

/// Discriminator view of an RGB image: edges and gray are recomputed, the
/// image is reflect-padded to a multiple of 16 and the map covers the padding.
disc::ProbabilityMap probability_map(const ImageTile& image, const disc::Discriminator& discriminator,
                                     const preprocess::PreprocessConfig& pre = {});

ImageTile confidence_heatmap(const ImageTile& translated, const disc::Discriminator& discriminator, double alpha,
                             const preprocess::PreprocessConfig& pre = {});

// ---------------------------------------------------------------- consistency

enum class Orientation { horizontal, vertical };

struct ConsistencyEdge {
  int row = 0, col = 0;  ///< first patch; the second is to the right (horizontal) or below (vertical)
  Orientation orientation = Orientation::horizontal;
  double ssim = 0.0;
};

struct ConsistencyGraph {
  int rows = 0, cols = 0;
  std::vector<ConsistencyEdge> edges;
  bool applicable = false;
  double mean = 0.0;
  double min = 0.0;
  int argmin = -1;  ///< index into edges, -1 when not applicable

  /// R·(S−1) + (R−1)·S.
  static int expected_edges(int rows, int cols) { return rows * (cols - 1) + (rows - 1) * cols; }
  nlohmann::json to_json() const;
};

/// SSIM between facing strip_width-pixel strips of every adjacent pair. A 1×1
/// grid yields an empty graph marked not applicable.
ConsistencyGraph spatial_consistency(const imageops::PatchGrid& grid, int strip_width);

/// Thumbnails of the patches with each seam coloured and labelled by its score.
RawImage render_consistency(const ConsistencyGraph& graph, const imageops::PatchGrid& grid);

// ---------------------------------------------------------------- pipeline

struct TranslateOptions {
  int tile = 0;  ///< 0 selects the generator input size
  int overlap = 0;
  preprocess::PreprocessConfig preprocess;
};

/// Translated patches of a SAR image, still on the partition grid.
imageops::PatchGrid translate_grid(const ImageTile& sar, const gen::Generator& generator,
                                   const TranslateOptions& opts = {});
/// partition → per-patch generate → stitch.
ImageTile translate(const ImageTile& sar, const gen::Generator& generator, const TranslateOptions& opts = {});

struct AssessOptions {
  TranslateOptions translate;
  double alpha = 0.45;
  int strip_width = 16;
};

struct AssessmentReport {
  ImageTile translation;
  ImageTile heatmap_overlay;
  disc::ProbabilityMap probability;
  double confidence_percent = 0.0;
  ConsistencyGraph consistency;
  RawImage consistency_image;
};

AssessmentReport assess(const ImageTile& sar, const gen::Generator& generator,
                        const disc::Discriminator& discriminator, const SiameseEmbedder& siamese,
                        const AssessOptions& opts = {});

/// The five report files; `provenance` is embedded in report.json.
inline constexpr std::array<const char*, 5> kReportFiles{"translation.png", "heatmap.png", "consistency.json",
                                                          "consistency.png", "report.json"};
void write_report(const std::string& dir, const AssessmentReport& report, const nlohmann::json& provenance);

}  // namespace dfsar::interp
