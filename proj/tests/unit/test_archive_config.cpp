#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dfsar/archive.hpp"
#include "dfsar/config.hpp"
#include "dfsar/error.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace dfsar;

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("archive serialization round trip is bit-exact") {
  io::Archive a;
  a.manifest = {{"kind", "test"}, {"n", 3}};
  a.arrays["x"] = testsupport::random_tensor({2, 3, 4}, 1);
  a.arrays["empty"] = Tensor({0});
  Tensor odd({3});
  odd[0] = -0.0;
  odd[1] = 1e-310;
  odd[2] = std::numeric_limits<double>::infinity();
  a.arrays["odd"] = odd;
  const io::Archive b = io::deserialize(io::serialize(a));
  CHECK(b.manifest == a.manifest);
  REQUIRE(b.arrays.size() == 3);
  for (const auto& [k, t] : a.arrays) {
    CHECK(b.arrays.at(k).shape() == t.shape());
    CHECK(b.arrays.at(k).storage() == t.storage());
  }
  CHECK(std::signbit(b.arrays.at("odd")[0]));
}

TEST_CASE("corrupt archives are rejected") {
  io::Archive a;
  a.arrays["x"] = testsupport::random_tensor({4, 4}, 2);
  std::vector<std::uint8_t> bytes = io::serialize(a);
  std::vector<std::uint8_t> bad = bytes;
  bad[0] ^= 0xff;
  CHECK_THROWS_AS(io::deserialize(bad), ValidationError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{4}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> shortened(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    CHECK_THROWS_AS(io::deserialize(shortened), ValidationError);
  }
}

TEST_CASE("archives on disk and missing files") {
  testsupport::TempDir dir("archive");
  io::Archive a;
  a.manifest["v"] = 1;
  a.arrays["w"] = testsupport::random_tensor({5}, 3);
  io::save_archive(dir.file("a.dfsar"), a);
  CHECK(io::load_archive(dir.file("a.dfsar"), "test").arrays.at("w").storage() == a.arrays["w"].storage());
  try {
    io::load_archive(dir.file("nope.dfsar"), "widget checkpoint");
    FAIL("expected MissingAssetError");
  } catch (const MissingAssetError& e) {
    CHECK(std::string(e.what()).find("widget checkpoint") != std::string::npos);
  }
  CHECK_THROWS_AS(io::sha256_file(dir.file("nope")), MissingAssetError);
}

TEST_CASE("parameter sets restore only into matching shapes") {
  nn::ParameterSet src;
  src.add_param("a", testsupport::random_tensor({2, 2}, 4));
  io::Archive ar;
  io::put_parameters(ar, "m.", src);

  nn::ParameterSet same;
  const ag::Var a = same.add_param("a", Tensor({2, 2}));
  io::get_parameters(ar, "m.", same);
  CHECK(a.value().storage() == src.params().at("a").value().storage());

  nn::ParameterSet wrong;
  wrong.add_param("a", Tensor({4}));
  CHECK_THROWS_AS(io::get_parameters(ar, "m.", wrong), ValidationError);
}

TEST_CASE("config parsing, comments and overrides") {
  const Config c = Config::parse("# comment\n\nseed = 7\n  heatmap.alpha=0.25  \ngrayscale.weights = 1, 0 ,0\n");
  CHECK(c.integer("seed") == 7);
  CHECK(c.real("heatmap.alpha") == 0.25);
  CHECK(c.reals("grayscale.weights") == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(c.is_auto("model.input_size"));
  CHECK_FALSE(c.boolean("model.toy_mode"));

  Config d = c;
  d.apply_overrides({"model.toy_mode=yes", "seed = 9"});
  CHECK(d.boolean("model.toy_mode"));
  CHECK(d.integer("seed") == 9);
  CHECK_THROWS_AS(d.apply_overrides({"seed"}), ValidationError);
  CHECK_THROWS_AS(d.apply_overrides({"sede=1"}), ValidationError);
}

TEST_CASE("config errors name the line and key") {
  try {
    Config::parse("seed = 1\nmodel.input_szie = 64\n", "x.cfg");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("x.cfg:2") != std::string::npos);
    CHECK(msg.find("model.input_szie") != std::string::npos);
  }
  CHECK_THROWS_AS(Config::parse("just words\n"), ValidationError);
  Config c;
  c.set("seed", "1.5");
  CHECK_THROWS_AS(c.integer("seed"), ValidationError);
  c.set("model.toy_mode", "maybe");
  CHECK_THROWS_AS(c.boolean("model.toy_mode"), ValidationError);
  CHECK_THROWS_AS(Config::load("/nonexistent/dir/c.cfg"), MissingAssetError);
}

TEST_CASE("config dump is canonical and the hash tracks values") {
  const Config a = Config::parse("seed = 3\nheatmap.alpha = 0.5\n");
  const Config b = Config::parse("heatmap.alpha = 0.5\n# reordered\nseed = 3\n");
  CHECK(a.dump() == b.dump());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  CHECK(Config::parse(a.dump()).hash() == a.hash());
  CHECK(Config().hash() != a.hash());
}

TEST_CASE("shipped config files parse") {
  for (const char* name : {"toy.cfg", "reference.cfg"}) {
    const Config c = Config::load(std::string(DFSAR_TEST_DATA_DIR "/../../configs/") + name);
    CHECK(c.has("model.toy_mode"));
  }
  CHECK(Config::load(DFSAR_TEST_DATA_DIR "/../../configs/toy.cfg").boolean("model.toy_mode"));
}
