#include "dfsar/interpretability.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dfsar/archive.hpp"
#include "dfsar/error.hpp"

namespace dfsar::interp {

namespace {

constexpr std::uint8_t kColormap[256][3] = {
#include "assets/colormap_bluered.inc"
};

constexpr int kFcWidths[] = {512, 256, kEmbeddingDim};

}  // namespace

// ---------------------------------------------------------------- Siamese

SiameseEmbedder::SiameseEmbedder(int input_size, std::uint64_t seed) : input_size_(input_size) {
  DFSAR_REQUIRE(input_size >= 4 && input_size % 4 == 0,
                "siamese: input size must be a positive multiple of 4, got " + std::to_string(input_size));
  std::mt19937_64 rng(seed);
  conv1_ = nn::Conv2d(params_, "conv1",
                      {.in = 3, .out = 64, .kernel = 5, .stride = 1, .pad = 2, .init_std = std::sqrt(2.0 / 75.0)}, rng);
  conv2_ = nn::Conv2d(params_, "conv2",
                      {.in = 64, .out = 128, .kernel = 5, .stride = 1, .pad = 2, .init_std = std::sqrt(2.0 / 1600.0)},
                      rng);
  const int flat = 128 * (input_size / 4) * (input_size / 4);
  fc1_ = nn::Linear(params_, "fc1", flat, kFcWidths[0], std::sqrt(2.0 / flat), rng);
  fc2_ = nn::Linear(params_, "fc2", kFcWidths[0], kFcWidths[1], std::sqrt(2.0 / kFcWidths[0]), rng);
  fc3_ = nn::Linear(params_, "fc3", kFcWidths[1], kFcWidths[2], std::sqrt(1.0 / kFcWidths[1]), rng);
}

ag::Var SiameseEmbedder::embed(const ag::Var& batch) const {
  const Shape& s = batch.shape();
  DFSAR_REQUIRE(s.size() == 4 && s[1] == 3 && s[2] == input_size_ && s[3] == input_size_,
                "siamese: expected N×3×" + std::to_string(input_size_) + "×" + std::to_string(input_size_) +
                    " input, got " + shape_str(s));
  ag::Var h = ag::max_pool2x2(ag::relu(conv1_(batch)));
  h = ag::max_pool2x2(ag::relu(conv2_(h)));
  h = ag::reshape(h, {s[0], static_cast<int>(h.value().size() / s[0])});
  h = ag::relu(fc1_(h));
  h = ag::relu(fc2_(h));
  return ag::l2_normalize_lastdim(fc3_(h));
}

Tensor SiameseEmbedder::prepare(const ImageTile& image) const {
  ImageTile rgb = preprocess::ensure_rgb(image);
  if (rgb.height() != input_size_ || rgb.width() != input_size_)
    rgb = imageops::resize_bilinear(rgb, input_size_, input_size_);
  return rgb.as_batch();
}

Tensor SiameseEmbedder::embed(const ImageTile& image) const {
  ag::NoGradGuard guard;
  return embed(ag::Var(prepare(image))).value().reshaped({kEmbeddingDim});
}

void SiameseEmbedder::save(const std::string& path, const nlohmann::json& extra) const {
  io::Archive a;
  a.manifest = extra;
  a.manifest["kind"] = "siamese";
  a.manifest["input_size"] = input_size_;
  a.manifest["embedding_dim"] = kEmbeddingDim;
  io::put_parameters(a, "siamese.", params_);
  io::save_archive(path, a);
}

std::unique_ptr<SiameseEmbedder> SiameseEmbedder::load(const std::string& path) {
  const io::Archive a = io::load_archive(path, "siamese");
  DFSAR_REQUIRE(a.manifest.value("kind", "") == "siamese", "siamese checkpoint " + path + " has the wrong kind");
  auto e = std::make_unique<SiameseEmbedder>(a.manifest.at("input_size").get<int>(), 0);
  io::get_parameters(a, "siamese.", e->params_);
  return e;
}

double confidence_from_distance(double d) {
  DFSAR_REQUIRE(std::isfinite(d) && d >= 0.0, "confidence: distance must be finite and non-negative");
  return std::clamp(100.0 * (1.0 - d / 2.0), 0.0, 100.0);
}

double confidence_score(const ImageTile& sar, const ImageTile& eo, const SiameseEmbedder& embedder) {
  const Tensor a = embedder.embed(sar);
  const Tensor b = embedder.embed(eo);
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return confidence_from_distance(std::sqrt(ss));
}

// ---------------------------------------------------------------- heatmap

std::array<std::uint8_t, 3> colormap(double p) {
  const int i = static_cast<int>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
  return {kColormap[i][0], kColormap[i][1], kColormap[i][2]};
}

Tensor upsample_bilinear(const Tensor& map, int height, int width) {
  DFSAR_REQUIRE(map.rank() == 3 && map.dim(0) == 1, "upsample_bilinear: expected a 1×h×w map");
  DFSAR_REQUIRE(height > 0 && width > 0, "upsample_bilinear: empty target");
  const int h = map.dim(1), w = map.dim(2);
  Tensor out({1, height, width});
  const double sy = static_cast<double>(h) / height, sx = static_cast<double>(w) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      const double top = map[y0 * w + x0] * (1 - tx) + map[y0 * w + x1] * tx;
      const double bot = map[y1 * w + x0] * (1 - tx) + map[y1 * w + x1] * tx;
      out[static_cast<std::size_t>(y) * width + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

namespace {

int round_up16(int n) { return (n + 15) / 16 * 16; }

ImageTile blend(const ImageTile& translation, const Tensor& probs, int cover_w, double alpha) {
  const ImageTile rgb = preprocess::ensure_rgb(translation);
  if (alpha == 0.0) return rgb;
  const int h = rgb.height(), w = rgb.width();
  const ValueRange r = rgb.range();
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto c = colormap(probs[static_cast<std::size_t>(y) * cover_w + x]);
      for (int ch = 0; ch < 3; ++ch) {
        const double tint = r.lo + r.width() * c[ch] / 255.0;
        const std::size_t i = (static_cast<std::size_t>(ch) * h + y) * w + x;
        out[i] = std::clamp((1.0 - alpha) * rgb.pixels()[i] + alpha * tint, r.lo, r.hi);
      }
    }
  return ImageTile(std::move(out), r);
}

}  // namespace

ImageTile overlay_heatmap(const ImageTile& translation, const disc::ProbabilityMap& map, double alpha) {
  DFSAR_REQUIRE(alpha >= 0.0 && alpha <= 1.0, "heatmap: alpha must lie in [0, 1]");
  // A map from a padded image covers the padded extent; the overlay keeps the top-left part.
  int cover_h = translation.height(), cover_w = translation.width();
  if (cover_h % map.height() != 0 || cover_w % map.width() != 0) {
    cover_h = round_up16(cover_h);
    cover_w = round_up16(cover_w);
  }
  const Tensor probs = upsample_bilinear(map.probs, cover_h, cover_w);
  return blend(translation, probs, cover_w, alpha);
}

disc::ProbabilityMap probability_map(const ImageTile& image, const disc::Discriminator& discriminator,
                                     const preprocess::PreprocessConfig& pre) {
  const ImageTile rgb = preprocess::ensure_rgb(image);
  const ImageTile padded = imageops::reflect_pad(rgb, round_up16(rgb.height()), round_up16(rgb.width()));
  const ImageTile gray = preprocess::to_grayscale(padded, pre.gray_weights);
  const ImageTile edge = preprocess::canny_edges(gray, pre.canny);
  return discriminator.discriminate(padded.pixels(), edge.pixels(), gray.pixels());
}

ImageTile confidence_heatmap(const ImageTile& translated, const disc::Discriminator& discriminator, double alpha,
                             const preprocess::PreprocessConfig& pre) {
  return overlay_heatmap(translated, probability_map(translated, discriminator, pre), alpha);
}

// ---------------------------------------------------------------- consistency

nlohmann::json ConsistencyGraph::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) nodes.push_back({{"row", r}, {"col", c}});
  nlohmann::json es = nlohmann::json::array();
  for (const auto& e : edges) {
    const bool h = e.orientation == Orientation::horizontal;
    es.push_back({{"from", {e.row, e.col}},
                  {"to", {h ? e.row : e.row + 1, h ? e.col + 1 : e.col}},
                  {"orientation", h ? "horizontal" : "vertical"},
                  {"ssim", e.ssim}});
  }
  nlohmann::json summary = {{"applicable", applicable}, {"edge_count", edges.size()}};
  if (applicable) {
    summary["mean"] = mean;
    summary["min"] = min;
    summary["argmin"] = argmin;
  } else {
    summary["mean"] = nullptr;
    summary["min"] = nullptr;
    summary["argmin"] = nullptr;
  }
  return {{"rows", rows}, {"cols", cols}, {"nodes", nodes}, {"edges", es}, {"summary", summary}};
}

ConsistencyGraph spatial_consistency(const imageops::PatchGrid& grid, int strip_width) {
  DFSAR_REQUIRE(grid.rows > 0 && grid.cols > 0 &&
                    grid.patches.size() == static_cast<std::size_t>(grid.rows) * grid.cols,
                "spatial consistency: grid is not well formed");
  const ValueRange range = grid.patches.front().range();
  const imageops::SsimOptions opts = imageops::SsimOptions::for_range(range);
  DFSAR_REQUIRE(strip_width >= opts.window, "spatial consistency: strip width " + std::to_string(strip_width) +
                                                " is narrower than the SSIM window " + std::to_string(opts.window));
  DFSAR_REQUIRE(strip_width <= grid.tile_size, "spatial consistency: strip wider than the patch");

  ConsistencyGraph g;
  g.rows = grid.rows;
  g.cols = grid.cols;
  const int t = grid.tile_size, s = strip_width;
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c + 1 < grid.cols; ++c) {
      const ImageTile a = imageops::crop(grid.at(r, c), 0, t - s, t, s);
      const ImageTile b = imageops::crop(grid.at(r, c + 1), 0, 0, t, s);
      g.edges.push_back({r, c, Orientation::horizontal, imageops::ssim(a, b, opts)});
    }
  for (int r = 0; r + 1 < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const ImageTile a = imageops::crop(grid.at(r, c), t - s, 0, s, t);
      const ImageTile b = imageops::crop(grid.at(r + 1, c), 0, 0, s, t);
      g.edges.push_back({r, c, Orientation::vertical, imageops::ssim(a, b, opts)});
    }

  g.applicable = !g.edges.empty();
  if (g.applicable) {
    double acc = 0.0;
    g.min = 2.0;
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
      acc += g.edges[i].ssim;
      if (g.edges[i].ssim < g.min) {
        g.min = g.edges[i].ssim;
        g.argmin = static_cast<int>(i);
      }
    }
    g.mean = acc / static_cast<double>(g.edges.size());
  }
  return g;
}

namespace {

// 3×5 glyphs, one row per entry, bit 2 = left column.
constexpr std::uint8_t kDigits[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};
constexpr std::uint8_t kDot[5] = {0, 0, 0, 0, 2};
constexpr std::uint8_t kMinus[5] = {0, 0, 7, 0, 0};

constexpr int kCell = 64;
constexpr int kGap = 22;

struct Canvas {
  RawImage img;
  Canvas(int w, int h) {
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.data.assign(static_cast<std::size_t>(w) * h * 3, 255);
  }
  void put(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    std::copy(c.begin(), c.end(), img.data.begin() + (static_cast<std::size_t>(y) * img.width + x) * 3);
  }
  void rect(int x, int y, int w, int h, std::array<std::uint8_t, 3> c) {
    for (int j = y; j < y + h; ++j)
      for (int i = x; i < x + w; ++i) put(i, j, c);
  }
  void text(int cx, int cy, const std::string& s) {
    const int w = static_cast<int>(s.size()) * 4 - 1;
    int x = cx - w / 2;
    const int y = cy - 2;
    for (char ch : s) {
      const std::uint8_t* glyph = ch == '.' ? kDot : ch == '-' ? kMinus : kDigits[ch - '0'];
      for (int r = 0; r < 5; ++r)
        for (int b = 0; b < 3; ++b)
          if (glyph[r] & (4 >> b)) put(x + b, y + r, {0, 0, 0});
      x += 4;
    }
  }
};

std::string score_label(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

RawImage render_consistency(const ConsistencyGraph& graph, const imageops::PatchGrid& grid) {
  DFSAR_REQUIRE(graph.rows == grid.rows && graph.cols == grid.cols, "render: graph and grid disagree");
  const int pitch = kCell + kGap;
  Canvas canvas(grid.cols * pitch + kGap, grid.rows * pitch + kGap);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const RawImage thumb =
          to_raw(preprocess::ensure_rgb(imageops::resize_bilinear(grid.at(r, c), kCell, kCell)));
      const int ox = kGap + c * pitch, oy = kGap + r * pitch;
      for (int y = 0; y < kCell; ++y)
        for (int x = 0; x < kCell; ++x) {
          const std::size_t i = (static_cast<std::size_t>(y) * kCell + x) * 3;
          canvas.put(ox + x, oy + y, {thumb.data[i], thumb.data[i + 1], thumb.data[i + 2]});
        }
    }
  for (const auto& e : graph.edges) {
    const auto colour = colormap((e.ssim + 1.0) / 2.0);
    if (e.orientation == Orientation::horizontal) {
      const int x = kGap + e.col * pitch + kCell, y = kGap + e.row * pitch;
      canvas.rect(x + 2, y, kGap - 4, kCell, colour);
      canvas.text(x + kGap / 2, y + kCell / 2, score_label(e.ssim));
    } else {
      const int x = kGap + e.col * pitch, y = kGap + e.row * pitch + kCell;
      canvas.rect(x, y + 2, kCell, kGap - 4, colour);
      canvas.text(x + kCell / 2, y + kGap / 2, score_label(e.ssim));
    }
  }
  return canvas.img;
}

// ---------------------------------------------------------------- pipeline

imageops::PatchGrid translate_grid(const ImageTile& sar, const gen::Generator& generator,
                                   const TranslateOptions& opts) {
  const int tile = opts.tile > 0 ? opts.tile : generator.arch().input_size;
  const ImageTile rgb = preprocess::ensure_rgb(sar);
  const int h = std::max(rgb.height(), tile), w = std::max(rgb.width(), tile);
  imageops::PatchGrid grid = imageops::partition(imageops::reflect_pad(rgb, h, w), tile, opts.overlap);
  grid.source_height = rgb.height();
  grid.source_width = rgb.width();

  ag::NoGradGuard guard;
  for (auto& patch : grid.patches) {
    const preprocess::SampleTriplet t = preprocess::assemble_triplet(patch, std::nullopt, opts.preprocess);
    const gen::GeneratorOutput out =
        generator.forward(ag::Var(t.structure.as_batch()), ag::Var(t.texture.as_batch()), gen::Mode::eval);
    patch = ImageTile::from_batch(out.image.value(), 0);
  }
  return grid;
}

ImageTile translate(const ImageTile& sar, const gen::Generator& generator, const TranslateOptions& opts) {
  return imageops::stitch(translate_grid(sar, generator, opts));
}

AssessmentReport assess(const ImageTile& sar, const gen::Generator& generator,
                        const disc::Discriminator& discriminator, const SiameseEmbedder& siamese,
                        const AssessOptions& opts) {
  AssessmentReport r;
  const imageops::PatchGrid grid = translate_grid(sar, generator, opts.translate);
  r.translation = imageops::stitch(grid);
  r.probability = probability_map(r.translation, discriminator, opts.translate.preprocess);
  r.heatmap_overlay = overlay_heatmap(r.translation, r.probability, opts.alpha);
  r.confidence_percent = confidence_score(sar, r.translation, siamese);
  r.consistency = spatial_consistency(grid, opts.strip_width);
  r.consistency_image = render_consistency(r.consistency, grid);
  return r;
}

void write_report(const std::string& dir, const AssessmentReport& report, const nlohmann::json& provenance) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  write_png((d / "translation.png").string(), to_raw(report.translation));
  write_png((d / "heatmap.png").string(), to_raw(report.heatmap_overlay));
  write_png((d / "consistency.png").string(), report.consistency_image);
  const nlohmann::json graph = report.consistency.to_json();
  {
    std::ofstream out(d / "consistency.json");
    out << graph.dump(2) << "\n";
  }
  const nlohmann::json summary = graph.at("summary");
  const nlohmann::json doc = {{"confidence_percent", report.confidence_percent},
                              {"consistency_summary", summary},
                              {"translation", {{"height", report.translation.height()},
                                               {"width", report.translation.width()}}},
                              {"provenance", provenance}};
  std::ofstream out(d / "report.json");
  out << doc.dump(2) << "\n";
  if (!out) throw Error("could not write report to " + dir);
}

}  // namespace dfsar::interp
