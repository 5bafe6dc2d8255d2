#include "dfsar/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfsar/archive.hpp"
#include "dfsar/config.hpp"
#include "dfsar/dataio.hpp"
#include "dfsar/error.hpp"
#include "dfsar/interpretability.hpp"
#include "dfsar/training.hpp"

namespace dfsar::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<long long> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "flat key = value configuration file");
    app->add_option("--overrides", overrides, "key=value settings applied after the config file");
    app->add_option("--seed", seed, "seed for every random draw (overrides the config)");
  }

  Config resolve() const {
    Config c = config_path.empty() ? Config() : Config::load(config_path);
    c.apply_overrides(overrides);
    if (seed) c.set("seed", std::to_string(*seed));
    return c;
  }
};

void require_file(const std::string& path, const std::string& asset) {
  if (path.empty() || !fs::is_regular_file(path)) throw MissingAssetError(asset, path.empty() ? "(not given)" : path);
}

nlohmann::json provenance(const Config& cfg, const nlohmann::json& checkpoints, const nlohmann::json& inputs) {
  return {{"seed", cfg.integer("seed")}, {"config_hash", cfg.hash()}, {"checkpoints", checkpoints}, {"inputs", inputs}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error("could not write " + path.string());
}

// Writes a PNG and returns the SHA-256 of its bytes.
std::string write_png_hashed(const fs::path& path, const RawImage& raw) {
  const std::vector<std::uint8_t> bytes = encode_png(raw);
  io::write_bytes(path.string(), bytes);
  return io::sha256_hex(bytes.data(), bytes.size());
}

// Architecture keys changed from their defaults pin the checkpoint architecture.
void check_configured_arch(const Config& cfg, const gen::GeneratorArch& stored) {
  const Config defaults;
  bool configured = false;
  for (const char* key : {"model.toy_mode", "model.input_size", "model.levels", "model.width_divisor"})
    configured = configured || cfg.str(key) != defaults.str(key);
  if (!configured) return;
  const gen::GeneratorArch want = training::TrainConfig::from_config(cfg).generator;
  if (!(want.input_size == stored.input_size && want.levels == stored.levels &&
        want.width_divisor == stored.width_divisor))
    throw ValidationError("architecture mismatch: checkpoint holds " + stored.to_json().dump() +
                          ", configuration asks for " + want.to_json().dump());
}

interp::TranslateOptions translate_options(const Config& cfg, std::optional<int> tile, std::optional<int> overlap) {
  interp::TranslateOptions o;
  o.preprocess = training::preprocess_from_config(cfg);
  o.tile = tile ? *tile : (cfg.is_auto("translate.tile") ? 0 : static_cast<int>(cfg.integer("translate.tile")));
  o.overlap = overlap ? *overlap : static_cast<int>(cfg.integer("translate.overlap"));
  DFSAR_REQUIRE(o.tile >= 0, "translate: tile must be positive");
  return o;
}

// ---------------------------------------------------------------- commands

int cmd_prepare(const Common& common, const std::string& manifest_path, const std::string& out_dir, std::ostream& out,
                std::ostream& err) {
  require_file(manifest_path, "manifest");
  const Config cfg = common.resolve();
  const preprocess::PreprocessConfig pre = training::preprocess_from_config(cfg);
  const dataio::Manifest manifest = dataio::load_manifest(manifest_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  int failures = 0;
  for (const auto& d : manifest.rejected) {
    err << "manifest line " << d.line << ": " << d.reason << "\n";
    ++failures;
  }
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    try {
      const ImageTile sar = preprocess::ensure_rgb(dataio::load_tile(e.sar_path));
      const ImageTile eo = preprocess::ensure_rgb(dataio::load_tile(e.eo_path));
      const preprocess::SampleTriplet t = preprocess::assemble_triplet(sar, eo, pre);
      char stem[32];
      std::snprintf(stem, sizeof stem, "tile_%04zu", i);
      const ImageTile edge(t.structure.channel(0).pixels(), ValueRange{0.0, 1.0});
      nlohmann::json assets;
      const std::pair<const char*, RawImage> files[] = {{"edge", to_raw(edge)},
                                                        {"gray", to_raw(t.structure.channel(1))},
                                                        {"rgb", to_raw(t.texture)},
                                                        {"target", to_raw(*t.target)}};
      for (const auto& [kind, raw] : files) {
        const std::string name = std::string(stem) + "_" + kind + ".png";
        assets[kind] = {{"path", name}, {"sha256", write_png_hashed(dir / name, raw)}};
      }
      rows.push_back({{"line", e.line},
                      {"split", dataio::to_string(e.split)},
                      {"sar_path", e.sar_path},
                      {"eo_path", e.eo_path},
                      {"acquisition_gap_days", e.acquisition_gap_days},
                      {"sar_sha256", io::sha256_file(e.sar_path, "SAR tile")},
                      {"eo_sha256", io::sha256_file(e.eo_path, "EO tile")},
                      {"assets", assets}});
    } catch (const Error& ex) {
      err << "manifest line " << e.line << ": " << ex.what() << "\n";
      ++failures;
    }
  }
  write_json(dir / "index.json",
             {{"entries", rows},
              {"provenance",
               provenance(cfg, nlohmann::json::object(),
                          {{"manifest", io::sha256_file(manifest_path, "manifest")}})}});
  out << "prepared " << rows.size() << " triplet(s) in " << out_dir << "\n";
  return failures ? kValidationFailure : kSuccess;
}

int cmd_train(const Common& common, const std::string& manifest_path, const std::string& out_dir, bool resume,
              std::ostream& out, std::ostream& err) {
  require_file(manifest_path, "manifest");
  const Config cfg = common.resolve();
  const training::TrainConfig tc = training::TrainConfig::from_config(cfg);
  const dataio::Manifest manifest = dataio::load_manifest(manifest_path);
  for (const auto& d : manifest.rejected) err << "manifest line " << d.line << " skipped: " << d.reason << "\n";
  const training::PairDataset data = training::PairDataset::from_manifest(manifest);
  DFSAR_REQUIRE(data.size() > 0, "train: the manifest has no admissible train entries");

  const training::TrainResult r = training::train(data, tc, out_dir, resume, cfg.dump());
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& c : r.checkpoints) hashes[fs::path(c).filename().string()] = io::sha256_file(c, "checkpoint");
  write_json(fs::path(out_dir) / "provenance.json",
             provenance(cfg, hashes, {{"manifest", io::sha256_file(manifest_path, "manifest")}}));
  out << "trained to step " << tc.steps << "; final checkpoint " << r.final_checkpoint << "\n";
  return kSuccess;
}

int cmd_train_siamese(const Common& common, const std::string& manifest_path, const std::string& out_path,
                      std::ostream& out) {
  require_file(manifest_path, "manifest");
  const Config cfg = common.resolve();
  const training::SiameseConfig sc = training::SiameseConfig::from_config(cfg);
  const training::PairDataset data = training::PairDataset::from_manifest(dataio::load_manifest(manifest_path));
  double last = 0.0;
  const auto embedder = training::train_siamese(data, sc, [&](const training::SiameseStep& s) { last = s.loss; });
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  embedder->save(out_path, {{"provenance", provenance(cfg, nlohmann::json::object(),
                                                      {{"manifest", io::sha256_file(manifest_path, "manifest")}})}});
  out << "siamese checkpoint " << out_path << " (final loss " << last << ")\n";
  return kSuccess;
}

int cmd_translate(const Common& common, const std::string& checkpoint, const std::string& input,
                  const std::string& output, std::optional<int> tile, std::optional<int> overlap, std::ostream& out) {
  require_file(checkpoint, "generator checkpoint");
  require_file(input, "input image");
  const Config cfg = common.resolve();
  const auto generator = training::load_generator(checkpoint);
  check_configured_arch(cfg, generator->arch());
  const ImageTile sar = dataio::load_tile(input);
  const ImageTile result = interp::translate(sar, *generator, translate_options(cfg, tile, overlap));
  if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  dataio::save_tile(output, result);
  write_json(output + ".json", {{"provenance", provenance(cfg, {{"generator", io::sha256_file(checkpoint)}},
                                                          {{"input", io::sha256_file(input)}})}});
  out << "wrote " << output << " (" << result.width() << "x" << result.height() << ")\n";
  return kSuccess;
}

int cmd_assess(const Common& common, const std::string& checkpoint, const std::string& siamese,
               const std::string& input, const std::string& out_dir, std::ostream& out) {
  require_file(checkpoint, "generator checkpoint");
  require_file(siamese, "siamese");
  require_file(input, "input image");
  const Config cfg = common.resolve();
  const auto generator = training::load_generator(checkpoint);
  check_configured_arch(cfg, generator->arch());
  const auto discriminator = training::load_discriminator(checkpoint);
  const auto embedder = interp::SiameseEmbedder::load(siamese);

  interp::AssessOptions opts;
  opts.translate = translate_options(cfg, std::nullopt, std::nullopt);
  opts.alpha = cfg.real("heatmap.alpha");
  opts.strip_width = static_cast<int>(cfg.integer("consistency.strip_width"));
  const interp::AssessmentReport report =
      interp::assess(dataio::load_tile(input), *generator, *discriminator, *embedder, opts);
  const std::string ck = io::sha256_file(checkpoint);
  interp::write_report(out_dir, report,
                       provenance(cfg, {{"generator", ck}, {"discriminator", ck}, {"siamese", io::sha256_file(siamese)}},
                                  {{"input", io::sha256_file(input)}}));
  out << "confidence " << report.confidence_percent << "%, " << report.consistency.edges.size()
      << " seam(s); report in " << out_dir << "\n";
  return kSuccess;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SAR-to-EO translation with interpretability reports", "dfsar"};
  app.require_subcommand(1);

  Common common;
  std::string manifest, out_dir, out_path, checkpoint, siamese, input, output;
  std::optional<int> tile, overlap;
  bool resume = false;

  CLI::App* prepare = app.add_subcommand("prepare", "materialize preprocessed triplets with an index");
  prepare->add_option("--manifest", manifest, "JSON-lines pair manifest")->required();
  prepare->add_option("--out", out_dir, "output directory")->required();

  CLI::App* train = app.add_subcommand("train", "adversarial training with checkpoints and a JSON-lines log");
  train->add_option("--manifest", manifest, "JSON-lines pair manifest")->required();
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_flag("--resume", resume, "continue from the latest checkpoint in the run directory");

  CLI::App* train_siamese = app.add_subcommand("train-siamese", "contrastive training of the confidence embedder");
  train_siamese->add_option("--manifest", manifest, "JSON-lines pair manifest")->required();
  train_siamese->add_option("--out", out_path, "checkpoint file")->required();

  CLI::App* translate = app.add_subcommand("translate", "tile, translate and stitch one SAR image");
  translate->add_option("--checkpoint", checkpoint, "training checkpoint")->required();
  translate->add_option("--input", input, "SAR PNG")->required();
  translate->add_option("--output", output, "EO PNG")->required();
  translate->add_option("--tile", tile, "tile size (default: generator input size)");
  translate->add_option("--overlap", overlap, "tile overlap in pixels");

  CLI::App* assess = app.add_subcommand("assess", "translation, heatmap, confidence and seam report");
  assess->add_option("--checkpoint", checkpoint, "training checkpoint (generator and discriminator)")->required();
  assess->add_option("--siamese", siamese, "Siamese checkpoint")->required();
  assess->add_option("--input", input, "SAR PNG")->required();
  assess->add_option("--out", out_dir, "report directory")->required();

  for (CLI::App* sub : {prepare, train, train_siamese, translate, assess}) common.attach(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kValidationFailure;
  }

  try {
    if (*prepare) return cmd_prepare(common, manifest, out_dir, out, err);
    if (*train) return cmd_train(common, manifest, out_dir, resume, out, err);
    if (*train_siamese) return cmd_train_siamese(common, manifest, out_path, out);
    if (*translate) return cmd_translate(common, checkpoint, input, output, tile, overlap, out);
    if (*assess) return cmd_assess(common, checkpoint, siamese, input, out_dir, out);
  } catch (const MissingAssetError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingAsset;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  }
  return kValidationFailure;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"dfsar"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dfsar::cli
