#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dfsar/archive.hpp"
#include "dfsar/cli.hpp"
#include "dfsar/dataio.hpp"
#include "dfsar/imageops.hpp"
#include "dfsar/interpretability.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace dfsar;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Overrides that shrink the model to a 32-pixel toy.
const std::vector<std::string> kTiny = {
    "--overrides", "model.toy_mode=true", "--overrides", "model.input_size=32", "--overrides", "model.levels=3",
    "--overrides", "model.width_divisor=16", "--overrides", "disc.width_divisor=16", "--overrides",
    "disc.sn_warmup=5", "--overrides", "train.batch_size=2", "--overrides", "train.steps=2", "--overrides",
    "siamese.input_size=16", "--overrides", "siamese.steps=2", "--overrides", "siamese.batch_size=2"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string manifest_row(const std::string& sar, const std::string& eo, double gap = 1.0) {
  return nlohmann::json{{"sar_path", sar}, {"eo_path", eo}, {"split", "train"}, {"acquisition_gap_days", gap}}.dump();
}

// Pairs on disk, a manifest, one trained checkpoint and a Siamese checkpoint,
// built once and shared by the tests below.
struct Workspace {
  testsupport::TempDir dir{"cli"};
  std::string manifest, checkpoint, siamese;

  Workspace() {
    std::ofstream m(dir.file("pairs.jsonl"));
    for (int i = 0; i < 3; ++i) {
      const auto [sar, eo] = testsupport::synthetic_pair(40, 200 + i);
      const std::string s = "sar" + std::to_string(i) + ".png", e = "eo" + std::to_string(i) + ".png";
      dataio::save_tile(dir.file(s), sar);
      dataio::save_tile(dir.file(e), eo);
      m << manifest_row(s, e) << "\n";
    }
    m.close();
    manifest = dir.file("pairs.jsonl");
    const Result t = run(with({"train", "--manifest", manifest, "--out", dir.file("run")}, kTiny));
    REQUIRE_MESSAGE(t.code == 0, t.err);
    checkpoint = dir.file("run/checkpoint_000002.dfsar");
    const Result s = run(with({"train-siamese", "--manifest", manifest, "--out", dir.file("siamese.dfsar")}, kTiny));
    REQUIRE_MESSAGE(s.code == 0, s.err);
    siamese = dir.file("siamese.dfsar");
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  return names;
}

}  // namespace

TEST_CASE("prepare on an empty manifest writes an empty index") {
  testsupport::TempDir dir("prep0");
  std::ofstream(dir.file("m.jsonl")).close();
  const Result r = run({"prepare", "--manifest", dir.file("m.jsonl"), "--out", dir.file("out")});
  CHECK(r.code == cli::kSuccess);
  const nlohmann::json index = read_json(dir.file("out/index.json"));
  CHECK(index["entries"].empty());
  CHECK(index["provenance"].contains("config_hash"));
}

TEST_CASE("prepare materializes four assets per entry and is idempotent") {
  Workspace& w = workspace();
  const std::string out = w.dir.file("prep");
  REQUIRE(run({"prepare", "--manifest", w.manifest, "--out", out}).code == 0);
  const nlohmann::json first = read_json(fs::path(out) / "index.json");
  REQUIRE(first["entries"].size() == 3);
  for (const auto& row : first["entries"]) {
    for (const char* kind : {"edge", "gray", "rgb", "target"}) {
      const std::string path = (fs::path(out) / row["assets"][kind]["path"].get<std::string>()).string();
      CHECK(fs::is_regular_file(path));
      CHECK(io::sha256_file(path) == row["assets"][kind]["sha256"]);
    }
    CHECK(row["sar_sha256"].get<std::string>().size() == 64);
  }
  CHECK(listing(out).size() == 13);
  REQUIRE(run({"prepare", "--manifest", w.manifest, "--out", out}).code == 0);
  CHECK(read_json(fs::path(out) / "index.json") == first);
}

TEST_CASE("prepare reports rejected rows with a nonzero exit") {
  Workspace& w = workspace();
  testsupport::TempDir dir("prepbad");
  std::ofstream(dir.file("m.jsonl")) << manifest_row(w.dir.file("sar0.png"), w.dir.file("eo0.png")) << "\n"
                                     << manifest_row(w.dir.file("sar1.png"), w.dir.file("eo1.png"), 9.0) << "\n";
  const Result r = run({"prepare", "--manifest", dir.file("m.jsonl"), "--out", dir.file("out")});
  CHECK(r.code == cli::kValidationFailure);
  CHECK(r.err.find("line 2") != std::string::npos);
  CHECK(read_json(dir.file("out/index.json"))["entries"].size() == 1);
}

TEST_CASE("exit codes for missing assets and bad settings") {
  testsupport::TempDir dir("codes");
  CHECK(run({"prepare", "--manifest", dir.file("absent.jsonl"), "--out", dir.file("o")}).code == cli::kMissingAsset);
  std::ofstream(dir.file("m.jsonl")).close();
  const Result bad = run({"prepare", "--manifest", dir.file("m.jsonl"), "--out", dir.file("o"), "--overrides", "no.such=1"});
  CHECK(bad.code == cli::kValidationFailure);
  CHECK(bad.err.find("no.such") != std::string::npos);
  CHECK(run({"frobnicate"}).code == cli::kValidationFailure);
  CHECK(run({"prepare", "--manifest", dir.file("m.jsonl"), "--out", dir.file("o"), "--config", dir.file("none.cfg")})
            .code == cli::kMissingAsset);
}

TEST_CASE("train writes checkpoints, a log and provenance") {
  Workspace& w = workspace();
  const fs::path run_dir = w.dir.file("run");
  CHECK(fs::is_regular_file(w.checkpoint));
  std::ifstream log(run_dir / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == ++lines);
    CHECK(j.contains("g_feat"));
  }
  CHECK(lines == 2);
  const nlohmann::json p = read_json(run_dir / "provenance.json");
  CHECK(p["seed"] == 0);
  CHECK(p["checkpoints"]["checkpoint_000002.dfsar"] == io::sha256_file(w.checkpoint));
}

TEST_CASE("1024×768 at tile 256 partitions into 4×3") {
  CHECK(imageops::tile_count(1024, 256, 0) == 4);
  CHECK(imageops::tile_count(768, 256, 0) == 3);
  const auto grid = imageops::partition(ImageTile::constant(1, 768, 1024, 0.0), 256, 0);
  CHECK(grid.cols == 4);
  CHECK(grid.rows == 3);
}

TEST_CASE("translate tiles, stitches and is deterministic") {
  Workspace& w = workspace();
  // Same arithmetic as 1024×768 at tile 256, scaled to the 32-pixel model.
  const ImageTile sar = testsupport::noise_image(1, 96, 128, 5);
  dataio::save_tile(w.dir.file("big.png"), sar);
  const std::vector<std::string> base = {"translate", "--checkpoint", w.checkpoint, "--input", w.dir.file("big.png"),
                                         "--tile", "32"};
  const Result a = run(with(base, {"--output", w.dir.file("t1.png")}));
  REQUIRE_MESSAGE(a.code == 0, a.err);
  REQUIRE(run(with(base, {"--output", w.dir.file("t2.png")})).code == 0);
  CHECK(io::sha256_file(w.dir.file("t1.png")) == io::sha256_file(w.dir.file("t2.png")));
  const ImageTile out = dataio::load_tile(w.dir.file("t1.png"));
  CHECK(out.width() == 128);
  CHECK(out.height() == 96);
  CHECK(out.channels() == 3);
  const nlohmann::json prov = read_json(w.dir.file("t1.png.json"))["provenance"];
  CHECK(prov["checkpoints"]["generator"] == io::sha256_file(w.checkpoint));
  CHECK(prov.contains("config_hash"));
}

TEST_CASE("translate rejects a checkpoint that does not match the configured architecture") {
  Workspace& w = workspace();
  const Result r = run({"translate", "--checkpoint", w.checkpoint, "--input", w.dir.file("sar0.png"), "--output",
                        w.dir.file("x.png"), "--overrides", "model.toy_mode=true"});
  CHECK(r.code == cli::kValidationFailure);
  CHECK(r.err.find("architecture mismatch") != std::string::npos);
}

TEST_CASE("assess without the Siamese checkpoint exits 2 naming it") {
  Workspace& w = workspace();
  const Result r = run({"assess", "--checkpoint", w.checkpoint, "--siamese", w.dir.file("missing.dfsar"), "--input",
                        w.dir.file("sar0.png"), "--out", w.dir.file("rep0")});
  CHECK(r.code == cli::kMissingAsset);
  CHECK(r.err.find("siamese") != std::string::npos);
  CHECK_FALSE(fs::exists(w.dir.file("rep0")));
}

TEST_CASE("assess writes exactly the five report files") {
  Workspace& w = workspace();
  dataio::save_tile(w.dir.file("sq.png"), testsupport::noise_image(1, 64, 64, 8));
  const Result r = run({"assess", "--checkpoint", w.checkpoint, "--siamese", w.siamese, "--input",
                        w.dir.file("sq.png"), "--out", w.dir.file("rep")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(listing(w.dir.file("rep")) ==
        std::set<std::string>(interp::kReportFiles.begin(), interp::kReportFiles.end()));
  const nlohmann::json report = read_json(w.dir.file("rep/report.json"));
  CHECK(report["confidence_percent"].get<double>() >= 0.0);
  CHECK(report["confidence_percent"].get<double>() <= 100.0);
  CHECK(report["consistency_summary"]["edge_count"] == 4);
  CHECK(report["provenance"]["checkpoints"]["siamese"] == io::sha256_file(w.siamese));
  CHECK(read_json(w.dir.file("rep/consistency.json"))["edges"].size() == 4);
}

TEST_CASE("heatmap.alpha=0 makes the heatmap equal the translation") {
  Workspace& w = workspace();
  const Result r = run({"assess", "--checkpoint", w.checkpoint, "--siamese", w.siamese, "--input",
                        w.dir.file("sar1.png"), "--out", w.dir.file("rep_a0"), "--overrides", "heatmap.alpha=0"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(io::read_bytes(w.dir.file("rep_a0/heatmap.png"), "heatmap") ==
        io::read_bytes(w.dir.file("rep_a0/translation.png"), "translation"));
}
